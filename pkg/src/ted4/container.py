"""The ``.ted4`` bitstream: quantize a trained model, write and read it back.

Layout is documented byte-for-byte in ``docs/FORMAT.md``.  Every
distribution parameter used for coding is computed from decoder-visible
data only (fp16 positions, fp32 weights, previously decoded chunks) and with
identical tensor shapes on both sides, so encoder and decoder agree exactly.
"""
from __future__ import annotations

import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import torch

from . import entropy as E
from .anchors import AnchorSet, canonical_order, fp16_round, raw_activation
from .coder import CoderError, TableDecoder, TableStream, cumulative, decode_mask, encode_mask, quantize_pmf
from .config import ModelConfig
from .model import MASK_LOGIT, Networks, TedModel, build_networks

MAGIC = b"TED4"
VERSION = 1
ALIGN = 32
S_CAP = 512

SEC_POSITIONS, SEC_WEIGHTS, SEC_MASKS, SEC_ATTRIBUTES = 1, 2, 3, 4
SECTION_NAMES = {SEC_POSITIONS: "positions", SEC_WEIGHTS: "weights", SEC_MASKS: "masks",
                 SEC_ATTRIBUTES: "attributes"}

_HEAD = struct.Struct("<4sHH IHHHH I HHHHHH d 6f d H")
_ENTRY = struct.Struct("<HHIII")


class FormatError(ValueError):
    pass


@dataclass
class CodedModel:
    """All decoder-visible state."""
    config: ModelConfig
    positions: np.ndarray       # (N, 3) float16
    offset_mask: np.ndarray     # (N, K) bool
    temporal_mask: np.ndarray   # (N,) bool
    symbols: dict               # attribute -> int64 array
    weights: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)

    @property
    def n_anchors(self):
        return len(self.positions)

    def coded_types(self):
        names = ["feat", "offsets", "scaling", "tfeat"]
        if self.config.temporal_activation:
            names.append("tau")
        return names

    def equals(self, other):
        if self.config != other.config:
            return False
        arrays = [(self.positions, other.positions), (self.offset_mask, other.offset_mask),
                  (self.temporal_mask, other.temporal_mask)]
        if set(self.symbols) != set(other.symbols) or list(self.weights) != list(other.weights):
            return False
        arrays += [(self.symbols[k], other.symbols[k]) for k in self.symbols]
        arrays += [(self.weights[k], other.weights[k]) for k in self.weights]
        return all(a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes() for a, b in arrays)


# -- shared encoder/decoder computations ---------------------------------------

def networks_from_weights(cfg: ModelConfig, weights) -> Networks:
    nets = build_networks(cfg, seed=0, dtype=torch.float32)
    state = nets.state_dict()
    for name, arr in weights.items():
        if name not in state or tuple(state[name].shape) != arr.shape:
            raise FormatError(f"weight {name} does not match the model layout")
        state[name] = torch.from_numpy(arr.astype(np.float32))
    nets.load_state_dict(state)
    return nets


def weights_of(nets: Networks):
    return OrderedDict((k, v.detach().cpu().numpy().astype(np.float32)) for k, v in nets.state_dict().items())


def _normalized(cfg, positions16):
    lo = torch.tensor(cfg.bbox_min, dtype=torch.float32)
    hi = torch.tensor(cfg.bbox_max, dtype=torch.float32)
    return (torch.from_numpy(positions16.astype(np.float32)) - lo) / (hi - lo)


def _np(t):
    return t.detach().numpy().astype(np.float64)


class CodingContext:
    """Distribution parameters for every coded stream, in stream order."""

    def __init__(self, cfg: ModelConfig, nets: Networks, positions16, offset_mask, temporal_mask):
        self.cfg, self.nets = cfg, nets
        self.om, self.tm = np.asarray(offset_mask, bool), np.asarray(temporal_mask, bool)
        self.N = len(positions16)
        if cfg.prior == "hyperprior":
            with torch.no_grad():
                self.hp_t = nets.hyper(_normalized(cfg, positions16))
            self.hp = {k: tuple(_np(x) for x in v) for k, v in self.hp_t.items()}

    def types(self):
        t = ["feat", "offsets", "scaling", "tfeat"]
        if self.cfg.temporal_activation:
            t.append("tau")
        return t

    def rows(self, name):
        if name == "tfeat":
            return np.nonzero(self.tm)[0]
        return np.arange(self.N)

    def steps(self, name):
        """Per-anchor quantization step for the coded rows of ``name``."""
        if self.cfg.prior == "hyperprior":
            q = self.hp[name][2][:, 0]
        else:
            q = np.full(self.N, float(self.nets.factorized.step(name).detach()))
        return q[self.rows(name)]

    def streams(self):
        """``(name, chunk)`` pairs in coding order."""
        for name in self.types():
            if name == "feat" and self.cfg.prior == "hyperprior":
                for k in range(self.cfg.n_chunks):
                    yield name, k
            else:
                yield name, None

    def chunk_cols(self, chunk):
        if chunk is None:
            return slice(None)
        c = self.cfg.feat_dim // self.cfg.n_chunks
        return slice(chunk * c, (chunk + 1) * c)

    def gaussian_params(self, name, chunk, feat_symbols):
        """Flat (mu, sigma, q) for the coded values of one stream."""
        mu, sigma, q = self.hp[name]
        if name == "feat":
            ctx = np.zeros((self.N, self.cfg.feat_dim))
            prefix = self.chunk_cols(chunk).start
            ctx[:, :prefix] = feat_symbols[:, :prefix] * q[:, :1]
            with torch.no_grad():
                hmu, hsig, _ = self.hp_t["feat"]
                m, s = self.nets.ar.forward_chunk(hmu, hsig, torch.from_numpy(ctx.astype(np.float32)), chunk)
            mu, sigma = _np(m), _np(s)
            q = np.broadcast_to(q[:, :1], mu.shape)
        elif name == "offsets":
            K = self.cfg.n_offsets
            mu = mu.reshape(self.N, K, 3)[self.om]
            sigma = sigma.reshape(self.N, K, 3)[self.om]
            q = np.broadcast_to(q[:, :1, None], (self.N, K, 3))[self.om]
        else:
            rows = self.rows(name)
            mu, sigma = mu[rows], sigma[rows]
            q = np.broadcast_to(q[rows][:, :1], mu.shape)
        return mu.reshape(-1), sigma.reshape(-1), np.ascontiguousarray(q).reshape(-1)

    def factorized_channels(self, name):
        """Channel of each coded value, in coding order."""
        dim = self.nets.factorized.dims[name]
        if name == "offsets":
            slots = np.nonzero(self.om)[1]
            return (3 * slots[:, None] + np.arange(3)[None]).reshape(-1)
        return np.tile(np.arange(dim), len(self.rows(name)))


def _flat_offsets(values, om):
    """Offsets are coded for active slots only: (n_active, 3)."""
    N = om.shape[0]
    return values.reshape(N, -1, 3)[om]


def _bound(symbols, centers):
    spread = np.abs(symbols - centers).max(initial=0)
    return int(min(spread + 2, S_CAP))


def _gaussian_tables(mu, sigma, q, S):
    centers = np.rint(mu / q).astype(np.int64)
    grid = centers[:, None] + np.arange(-S, S + 1)[None]
    p = E.gaussian_bin_probs(mu, sigma, q, grid.astype(np.float64))
    esc = np.clip(1.0 - p.sum(1, keepdims=True), 0.0, None)
    return cumulative(quantize_pmf(np.concatenate([p, esc], 1))), centers


def _factorized_probs(prior, q, idx, channels):
    """Bin masses of integer ``idx`` under the per-channel learned CDF."""
    C = prior.channels
    grid = np.zeros((len(idx), C), dtype=np.float32)
    grid[np.arange(len(idx)), channels] = idx * q
    with torch.no_grad():
        p = prior.likelihood(torch.from_numpy(grid), torch.tensor(q, dtype=torch.float32), floor=0.0)
    return p.double().numpy()[np.arange(len(idx)), channels]


def _factorized_tables(prior, q, channels, S):
    grid = np.arange(-S, S + 1, dtype=np.float64)
    vals = torch.from_numpy((grid[:, None] * q).astype(np.float32)).expand(-1, prior.channels).contiguous()
    with torch.no_grad():
        p = prior.likelihood(vals, torch.tensor(q, dtype=torch.float32), floor=0.0).double().numpy().T
    esc = np.clip(1.0 - p.sum(1, keepdims=True), 0.0, None)
    table = cumulative(quantize_pmf(np.concatenate([p, esc], 1))).tolist()
    return [table[c] for c in channels], np.zeros(len(channels), dtype=np.int64)


def _stream_symbols(ctx, symbols, name, chunk):
    return symbols[name][:, ctx.chunk_cols(chunk)].reshape(-1) if name == "feat" else symbols[name].reshape(-1)


def _stream_tables(ctx: CodingContext, name, chunk, feat_symbols, S=None, sym=None):
    """``(cum, S, centers, bits)`` for one stream; ``bits`` is the
    continuous-model cost of ``sym`` when given."""
    bits = None
    if ctx.cfg.prior == "hyperprior":
        mu, sigma, q = ctx.gaussian_params(name, chunk, feat_symbols)
        if S is None:
            S = _bound(sym, np.rint(mu / q).astype(np.int64))
        cum, centers = _gaussian_tables(mu, sigma, q, S)
        if sym is not None:
            p = E.gaussian_bin_probs(mu, sigma, q, sym[:, None].astype(np.float64))[:, 0]
            bits = float(-np.log2(np.maximum(p, E.PROB_FLOOR)).sum())
        return cum, S, centers, bits
    fz = ctx.nets.factorized
    prior, q = fz.priors[name], float(fz.step(name).detach())
    channels = ctx.factorized_channels(name)
    if S is None:
        S = _bound(sym, 0)
    cum, centers = _factorized_tables(prior, q, channels, S)
    if sym is not None:
        p = _factorized_probs(prior, q, sym, channels)
        bits = float(-np.log2(np.maximum(p, E.PROB_FLOOR)).sum())
    return cum, S, centers, bits


# -- quantization ---------------------------------------------------------------

def quantize_model(model: TedModel) -> CodedModel:
    """Encoder-side quantization: canonical order, fp16 positions, fp32
    weights, hard masks and integer attribute symbols."""
    cfg = model.config
    a = model.anchors
    pos = fp16_round(a.xyz.detach().double().numpy())
    order = canonical_order(pos, a.index.numpy())
    positions = pos[order].astype(np.float16)
    om = (a.offset_logit.detach().numpy() > 0)[order]
    tm = (a.temporal_logit.detach().numpy() > 0)[order]
    weights = weights_of(model.nets)
    nets = networks_from_weights(cfg, weights)
    ctx = CodingContext(cfg, nets, positions, om, tm)
    N, K = len(order), cfg.n_offsets
    raw = {
        "feat": a.feat.detach().double().numpy()[order],
        "offsets": a.offsets.detach().double().numpy()[order].reshape(N, 3 * K),
        "scaling": a.scaling.detach().double().numpy()[order],
        "tfeat": a.tfeat.detach().double().numpy()[order],
        "tau": a.tau.detach().double().numpy()[order],
    }
    symbols = {}
    for name in ctx.types():
        q = ctx.steps(name)[:, None]
        vals = raw[name][ctx.rows(name)]
        sym = (np.sign(vals / q) * np.floor(np.abs(vals / q) + 0.5)).astype(np.int64)
        if name == "offsets":
            sym = _flat_offsets(sym, om)
        symbols[name] = sym
    return CodedModel(cfg, positions, om, tm, symbols, weights)


def dequantize(coded: CodedModel, nets: Networks | None = None):
    """Float attributes the decoder reconstructs (float64 arrays)."""
    cfg = coded.config
    nets = nets or networks_from_weights(cfg, coded.weights)
    ctx = CodingContext(cfg, nets, coded.positions, coded.offset_mask, coded.temporal_mask)
    N, K = coded.n_anchors, cfg.n_offsets
    out = {
        "feat": np.zeros((N, cfg.feat_dim)), "offsets": np.zeros((N, K, 3)), "scaling": np.zeros((N, 3)),
        "tfeat": np.zeros((N, cfg.tfeat_dim)),
        "tau": np.tile(raw_activation(torch.zeros(1), torch.ones(1)).numpy(), (N, 1)),
    }
    for name in ctx.types():
        q = ctx.steps(name)
        sym = coded.symbols[name]
        if name == "offsets":
            qo = np.broadcast_to(q[:, None], coded.offset_mask.shape)[coded.offset_mask]
            out["offsets"][coded.offset_mask] = sym * qo[:, None]
        else:
            out[name][ctx.rows(name)] = sym * q[:, None]
    return out


def model_from_coded(coded: CodedModel) -> TedModel:
    cfg = coded.config
    nets = networks_from_weights(cfg, coded.weights)
    vals = dequantize(coded, nets)
    f32 = lambda v: torch.from_numpy(np.asarray(v, dtype=np.float32))
    anchors = AnchorSet(
        xyz=f32(coded.positions), feat=f32(vals["feat"]), scaling=f32(vals["scaling"]),
        offsets=f32(vals["offsets"]), tfeat=f32(vals["tfeat"]), tau=f32(vals["tau"]),
        offset_logit=f32(np.where(coded.offset_mask, MASK_LOGIT, -MASK_LOGIT)),
        temporal_logit=f32(np.where(coded.temporal_mask, MASK_LOGIT, -MASK_LOGIT)),
    )
    model = TedModel(cfg, anchors, nets)
    model.dynamic_phase = True
    model.decoded = True
    model.requires_grad_(False)
    return model


# -- attribute stream ----------------------------------------------------------

def encode_attributes(coded: CodedModel, nets=None, with_estimate=False):
    """Attribute section payload: u16 symbol bound per stream, then one
    range-coded stream.  With ``with_estimate`` also returns the summed
    continuous-model cost in bits."""
    cfg = coded.config
    nets = nets or networks_from_weights(cfg, coded.weights)
    ctx = CodingContext(cfg, nets, coded.positions, coded.offset_mask, coded.temporal_mask)
    stream = TableStream()
    bounds, estimate = [], 0.0
    for name, chunk in ctx.streams():
        sym = _stream_symbols(ctx, coded.symbols, name, chunk)
        cum, S, centers, bits = _stream_tables(ctx, name, chunk, coded.symbols.get("feat"), sym=sym)
        stream.encode(sym, cum, S, centers)
        bounds.append(S)
        estimate += bits
    payload = struct.pack(f"<{len(bounds)}H", *bounds) + stream.finish()
    return (payload, estimate) if with_estimate else payload


def decode_attributes(data, cfg, nets, positions, om, tm):
    ctx = CodingContext(cfg, nets, positions, om, tm)
    plan = list(ctx.streams())
    hdr = struct.calcsize(f"<{len(plan)}H")
    if len(data) < hdr:
        raise FormatError("attribute section is truncated")
    bounds = struct.unpack(f"<{len(plan)}H", data[:hdr])
    if any(S < 1 or S > S_CAP for S in bounds):
        raise FormatError("symbol bound out of range")
    dec = TableDecoder(data[hdr:])
    dims = E.attribute_dims(cfg.feat_dim, cfg.n_offsets, cfg.tfeat_dim)
    symbols = {}
    feat = np.zeros((ctx.N, cfg.feat_dim), dtype=np.int64)
    for (name, chunk), S in zip(plan, bounds):
        cum, _, centers, _ = _stream_tables(ctx, name, chunk, feat, S=S)
        vals = dec.decode(cum, S, centers)
        if name == "feat":
            feat[:, ctx.chunk_cols(chunk)] = vals.reshape(ctx.N, -1)
            symbols["feat"] = feat
        elif name == "offsets":
            symbols[name] = vals.reshape(-1, 3)
        else:
            symbols[name] = vals.reshape(len(ctx.rows(name)), dims[name])
    return symbols


def estimate_attribute_bits(coded: CodedModel):
    """Sum of -log2 p over coded symbols under the continuous model."""
    return encode_attributes(coded, with_estimate=True)[1]


# -- container --------------------------------------------------------------------

def _flags(cfg):
    return (1 if cfg.temporal_activation else 0) | (2 if cfg.prior == "factorized" else 0)


def _pack_header(coded: CodedModel, n_sections):
    c = coded.config
    return _HEAD.pack(MAGIC, VERSION, _flags(c), coded.n_anchors, c.n_offsets, c.feat_dim, c.tfeat_dim,
                      c.bank_dim, c.n_frames, c.pe_bands, c.hyper_hidden, c.n_chunks, c.ar_hidden,
                      c.deform_hidden, c.decoder_hidden, c.voxel_size, *c.bbox_min, *c.bbox_max,
                      c.lambda_rate, n_sections)


def _pad(n):
    return (-n) % ALIGN


def write_container(coded: CodedModel) -> bytes:
    sections = []
    sections.append((SEC_POSITIONS, coded.positions.astype("<f2").tobytes()))
    sections.append((SEC_WEIGHTS, b"".join(w.astype("<f4").tobytes() for w in coded.weights.values())))
    om_bytes = encode_mask(coded.offset_mask.reshape(-1).tolist())
    tm_bytes = encode_mask(coded.temporal_mask.reshape(-1).tolist())
    sections.append((SEC_MASKS, struct.pack("<I", len(om_bytes)) + om_bytes + tm_bytes))
    sections.append((SEC_ATTRIBUTES, encode_attributes(coded)))
    head = _pack_header(coded, len(sections))
    table_len = _ENTRY.size * len(sections) + 4
    offset = len(head) + table_len
    offset += _pad(offset)
    entries, body = [], bytearray()
    for sid, payload in sections:
        entries.append(_ENTRY.pack(sid, 0, offset, len(payload), zlib.crc32(payload)))
        body += payload + b"\0" * _pad(len(payload))
        offset += len(payload) + _pad(len(payload))
    prefix = head + b"".join(entries)
    prefix += struct.pack("<I", zlib.crc32(prefix))
    return bytes(prefix + b"\0" * _pad(len(prefix)) + body)


def parse_layout(data: bytes):
    """Header fields and ``{section_id: (offset, length)}``; validates CRCs."""
    if len(data) < _HEAD.size:
        raise FormatError("container is truncated")
    fields = _HEAD.unpack_from(data)
    if fields[0] != MAGIC:
        raise FormatError("bad magic bytes")
    if fields[1] != VERSION:
        raise FormatError(f"unsupported format version {fields[1]}")
    n_sec = fields[-1]
    end = _HEAD.size + _ENTRY.size * n_sec
    if len(data) < end + 4:
        raise FormatError("container is truncated")
    (crc,) = struct.unpack_from("<I", data, end)
    if zlib.crc32(data[:end]) != crc:
        raise FormatError("header checksum mismatch")
    pos = end + 4
    if any(data[pos:pos + _pad(pos)]):
        raise FormatError("non-zero padding")
    sections = {}
    for i in range(n_sec):
        sid, _, off, length, scrc = _ENTRY.unpack_from(data, _HEAD.size + i * _ENTRY.size)
        if off + length > len(data):
            raise FormatError(f"section {SECTION_NAMES.get(sid, sid)} is truncated")
        payload = data[off:off + length]
        if zlib.crc32(payload) != scrc:
            raise FormatError(f"checksum mismatch in section {SECTION_NAMES.get(sid, sid)}")
        pad = data[off + length:off + length + _pad(length)]
        if len(pad) != _pad(length) or any(pad):
            raise FormatError("bad section padding")
        sections[sid] = (off, length)
    return fields, sections, end + 4


def _config_from_fields(f):
    (_, _, flags, N, K, d_f, d, D, F, pe, hh, nc, arh, dh, dech, voxel, *rest) = f
    bbox = rest[:6]
    lam = rest[6]
    cfg = ModelConfig(feat_dim=d_f, tfeat_dim=d, bank_dim=D, n_offsets=K, n_frames=F, voxel_size=voxel,
                      pe_bands=pe, hyper_hidden=hh, n_chunks=nc, ar_hidden=arh, deform_hidden=dh,
                      decoder_hidden=dech, prior="factorized" if flags & 2 else "hyperprior",
                      temporal_activation=bool(flags & 1), bbox_min=tuple(bbox[:3]), bbox_max=tuple(bbox[3:]),
                      lambda_rate=lam)
    return cfg, N


def read_container(data: bytes) -> CodedModel:
    try:
        return _read_container(bytes(data))
    except FormatError:
        raise
    except (struct.error, CoderError, ValueError, IndexError) as exc:
        raise FormatError(f"malformed container: {exc}") from exc


def _read_container(data: bytes) -> CodedModel:
    fields, sections, _ = parse_layout(data)
    cfg, N = _config_from_fields(fields)
    for sid in SECTION_NAMES:
        if sid not in sections:
            raise FormatError(f"missing section {SECTION_NAMES[sid]}")
    sec = lambda sid: data[sections[sid][0]:sections[sid][0] + sections[sid][1]]
    raw_pos = sec(SEC_POSITIONS)
    if len(raw_pos) != N * 6:
        raise FormatError("positions section has the wrong size")
    positions = np.frombuffer(raw_pos, dtype="<f2").reshape(N, 3).astype(np.float16)
    template = weights_of(build_networks(cfg))
    blob = sec(SEC_WEIGHTS)
    if len(blob) != 4 * sum(v.size for v in template.values()):
        raise FormatError("weights section has the wrong size")
    weights, off = OrderedDict(), 0
    for name, arr in template.items():
        n = arr.size
        weights[name] = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(arr.shape).astype(np.float32)
        off += 4 * n
    masks = sec(SEC_MASKS)
    (n_om,) = struct.unpack_from("<I", masks)
    om = np.array(decode_mask(masks[4:4 + n_om]), dtype=bool)
    tm = np.array(decode_mask(masks[4 + n_om:]), dtype=bool)
    if om.size != N * cfg.n_offsets or tm.size != N:
        raise FormatError("mask section does not match the anchor count")
    om = om.reshape(N, cfg.n_offsets)
    nets = networks_from_weights(cfg, weights)
    symbols = decode_attributes(sec(SEC_ATTRIBUTES), cfg, nets, positions, om, tm)
    return CodedModel(cfg, positions, om, tm, symbols, weights)


def section_sizes(data: bytes):
    """Bytes per section including alignment padding, plus the header size."""
    _, sections, head_end = parse_layout(data)
    out = {}
    for sid, (off, length) in sections.items():
        out[SECTION_NAMES.get(sid, str(sid))] = {"payload_bytes": length, "bytes": length + _pad(length)}
    header = head_end + _pad(head_end)
    return header, out
