"""The full dynamic scene model: anchors + deformation + decoders + entropy."""
from __future__ import annotations

import numpy as np
import torch
from torch import nn

from . import entropy as E
from .anchors import AnchorSet, activation_params, fp16_round, init_anchor_set, raw_activation
from .config import ModelConfig
from .deformation import DeformationBank, DeformationNets, deform
from .render import AttributeDecoders, Primitives, decode_primitives, render
from .temporal import activation, straight_through_mask

MASK_LOGIT = 8.0


def _bbox(points, pad):
    lo = np.asarray(points).min(0) - pad
    hi = np.asarray(points).max(0) + pad
    return tuple(np.float32(lo).tolist()), tuple(np.float32(hi).tolist())


class Networks(nn.Module):
    """Everything that is shipped as fp32 weights (bank included)."""

    def __init__(self, cfg: ModelConfig, generator=None):
        super().__init__()
        dims = E.attribute_dims(cfg.feat_dim, cfg.n_offsets, cfg.tfeat_dim)
        self.bank = DeformationBank(cfg.n_frames, cfg.bank_dim, generator=generator)
        self.deform = DeformationNets(cfg.tfeat_dim, cfg.bank_dim, cfg.feat_dim, cfg.deform_hidden,
                                      dx_scale=0.1 * cfg.voxel_size)
        self.decoders = AttributeDecoders(cfg.feat_dim, cfg.n_offsets, cfg.decoder_hidden)
        if cfg.prior == "hyperprior":
            self.hyper = E.HyperpriorNet(dims, cfg.pe_bands, cfg.hyper_hidden)
            self.ar = E.ChannelARNet(cfg.feat_dim, cfg.n_chunks, cfg.ar_hidden)
        else:
            self.factorized = E.FactorizedEntropy(dims)


def build_networks(cfg: ModelConfig, seed=0, dtype=torch.float32):
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed + 1)
    return Networks(cfg, gen).to(dtype)


class TedModel(nn.Module):
    def __init__(self, config: ModelConfig, anchors: AnchorSet, nets: Networks | None = None, seed=0):
        super().__init__()
        self.config = config
        dtype = anchors.xyz.dtype
        self.anchors = anchors
        self.nets = nets if nets is not None else build_networks(config, seed, dtype)
        self.dynamic_phase = False
        self.decoded = False  # attributes already dequantized

    @classmethod
    def from_points(cls, points, config: ModelConfig, seed=0, dtype=torch.float32):
        points = np.asarray(points, dtype=np.float64)
        lo, hi = _bbox(points, config.voxel_size)
        config.bbox_min, config.bbox_max = lo, hi
        anchors = init_anchor_set(points, config.voxel_size, config, seed=seed, dtype=dtype)
        return cls(config, anchors, seed=seed)

    @property
    def dtype(self):
        return self.anchors.xyz.dtype

    @property
    def uses_activation(self):
        return self.config.temporal_activation and self.dynamic_phase

    # -- entropy side -----------------------------------------------------------

    def normalized_positions(self, xyz=None):
        xyz = self.anchors.xyz.detach() if xyz is None else xyz
        p16 = torch.as_tensor(fp16_round(xyz.detach().cpu().numpy()), dtype=self.dtype)
        lo = torch.tensor(self.config.bbox_min, dtype=self.dtype)
        hi = torch.tensor(self.config.bbox_max, dtype=self.dtype)
        return (p16 - lo) / (hi - lo)

    def offset_mask(self, hard=False):
        if hard or self.decoded:
            return (self.anchors.offset_logit.detach() > 0).to(self.dtype)
        return straight_through_mask(self.anchors.offset_logit)

    def temporal_mask(self, hard=False):
        if hard or self.decoded:
            return (self.anchors.temporal_logit.detach() > 0).to(self.dtype)
        return straight_through_mask(self.anchors.temporal_logit)

    def coded_types(self):
        names = ["feat", "offsets", "scaling", "tfeat"]
        if self.config.temporal_activation and self.dynamic_phase:
            names.append("tau")
        return names

    def attributes(self, mode="noise", generator=None):
        """Quantized attributes and per-anchor bits.

        ``mode`` is ``"noise"`` (training), ``"hard"`` (rounded) or ``None``
        (use stored values as-is, e.g. on a decoded model).
        Returns ``(attrs, bits_per_anchor, breakdown)``.
        """
        a = self.anchors
        N, K = len(a), a.n_offsets
        raw = {"feat": a.feat, "offsets": a.offsets.reshape(N, 3 * K), "scaling": a.scaling,
               "tfeat": a.tfeat, "tau": a.tau}
        if mode is None or self.decoded:
            attrs = dict(raw)
            attrs["offsets"] = a.offsets
            return attrs, torch.zeros(N, dtype=self.dtype), {}
        types = self.coded_types()
        xn = self.normalized_positions()
        out, bits = {}, {}
        if self.config.prior == "hyperprior":
            hp = self.nets.hyper(xn)
            for name in types:
                mu, sigma, q = hp[name]
                val = E.quantize(raw[name], q, mode, generator)
                if name == "feat":
                    mu, sigma = self.nets.ar(mu, sigma, val)
                out[name] = val
                bits[name] = -torch.log2(E.likelihood(val, mu, sigma, q))
        else:
            fz = self.nets.factorized
            for name in types:
                q = fz.step(name)
                val = E.quantize(raw[name], q, mode, generator)
                out[name] = val
                bits[name] = -torch.log2(fz.priors[name].likelihood(val, q))
        for name in raw:
            out.setdefault(name, raw[name])
        per_anchor = {}
        om = self.offset_mask(hard=(mode == "hard"))
        tm = self.temporal_mask(hard=(mode == "hard"))
        for name, b in bits.items():
            if name == "offsets":
                per_anchor[name] = (b.reshape(N, K, 3).sum(-1) * om).sum(-1)
            elif name == "tfeat":
                per_anchor[name] = b.sum(-1) * tm
            else:
                per_anchor[name] = b.sum(-1)
        out["offsets"] = out["offsets"].reshape(N, K, 3)
        total = sum(per_anchor.values()) if per_anchor else torch.zeros(N, dtype=self.dtype)
        return out, total, per_anchor

    # -- rendering side ---------------------------------------------------------

    def window(self, attrs):
        return activation_params(attrs["tau"])

    def activation_at(self, t, attrs):
        if not self.uses_activation:
            return torch.ones(len(self.anchors), dtype=self.dtype)
        a_s, b_s, a_f, b_f = self.window(attrs)
        return activation(a_s, b_s, a_f, b_f, t)

    def deformed(self, t, attrs, hard_masks=False):
        return deform(self.anchors.xyz, attrs["feat"], attrs["tfeat"], self.nets.bank, self.nets.deform, t,
                      dynamic=self.temporal_mask(hard_masks))

    def static_opacity(self, attrs, hard_masks=True):
        """(N, K) primitive opacity after offset masking (time-invariant)."""
        _, _, _, op = self.nets.decoders(attrs["feat"], attrs["feat"], attrs["scaling"])
        return op * self.offset_mask(hard_masks)

    def primitives_at(self, t, attrs, train=False):
        hard = not train
        xyz_t, feat_t = self.deformed(t, attrs, hard_masks=hard)
        om = self.offset_mask(hard)
        prims = decode_primitives(xyz_t, feat_t, attrs["feat"], attrs["scaling"], attrs["offsets"], om,
                                  self.nets.decoders, drop=hard)
        tau_t = self.activation_at(t, attrs)
        K = self.anchors.n_offsets
        anchor_of = torch.div(prims.ids, K, rounding_mode="floor")
        prims.opacities = prims.opacities * tau_t[anchor_of]
        return prims

    def render(self, camera, t, attrs=None, train=False, background=(0.0, 0.0, 0.0), with_weights=False):
        if attrs is None:
            attrs, _, _ = self.attributes(mode=None if self.decoded else "hard")
        prims = self.primitives_at(t, attrs, train=train)
        return render(prims, camera, background, drop_transparent=not train, with_weights=with_weights), prims

    # -- mutation ---------------------------------------------------------------

    def set_windows(self, a_s, a_f, b_s=0.05, b_f=0.05):
        tau = raw_activation(torch.as_tensor(a_s), torch.as_tensor(a_f), b_s, b_f).to(self.dtype)
        with torch.no_grad():
            self.anchors.tau.copy_(tau)

    def replace_anchors(self, anchors: AnchorSet):
        self.anchors = anchors


# -- checkpoints ------------------------------------------------------------------

def save_checkpoint(model: TedModel, path, extra=None):
    """Float checkpoint of a trained (not yet quantized) model."""
    import dataclasses

    torch.save({
        "config": dataclasses.asdict(model.config),
        "anchors": {k: v.detach().clone() for k, v in model.anchors.state_dict().items()},
        "nets": model.nets.state_dict(),
        "dynamic_phase": model.dynamic_phase,
        "extra": extra or {},
    }, path)


def load_checkpoint(path) -> TedModel:
    state = torch.load(path, weights_only=True)
    cfg = ModelConfig(**state["config"])
    a = state["anchors"]
    anchors = AnchorSet(**{k: a[k] for k in AnchorSet.PARAM_NAMES}, index=a["index"])
    nets = build_networks(cfg, dtype=anchors.xyz.dtype)
    nets.load_state_dict(state["nets"])
    model = TedModel(cfg, anchors, nets)
    model.dynamic_phase = bool(state["dynamic_phase"])
    return model
