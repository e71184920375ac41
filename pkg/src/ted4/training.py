"""Losses, the two-phase training loop, gradient checking and RD sweeps."""
from __future__ import annotations

import copy
import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import entropy as E
from .anchors import ToyScene
from .config import LossWeights, TrainConfig
from .deformation import bank_tv_loss
from .model import TedModel
from .render import psnr, ssim
from .temporal import first_last_visible, prune_mask, visibility_matrix

LOSS_PARTS = ("distortion", "rate", "offset_mask", "temp_mask", "vol", "tv")


class DivergenceError(RuntimeError):
    def __init__(self, iteration, part):
        super().__init__(f"non-finite loss term {part!r} at iteration {iteration}")
        self.iteration, self.part = iteration, part


# -- losses --------------------------------------------------------------------

def distortion_loss(render, target):
    render, target = torch.as_tensor(render), torch.as_tensor(target)
    if render.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(render.shape)} vs {tuple(target.shape)}")
    target = target.to(render.dtype)
    l1 = torch.abs(render - target).mean()
    return 0.8 * l1 + 0.2 * (1.0 - ssim(render, target))


def mask_losses(anchors):
    """Mean soft offset-mask and temporal-mask values."""
    return torch.sigmoid(anchors.offset_logit).mean(), torch.sigmoid(anchors.temporal_logit).mean()


def vol_loss(scales):
    scales = getattr(scales, "scales", scales)
    if len(scales) == 0:
        return scales.new_zeros(())
    return scales.prod(-1).mean()


def total_loss(parts: dict, weights: LossWeights):
    for name in LOSS_PARTS:
        v = parts.get(name, 0.0)
        if not bool(torch.isfinite(torch.as_tensor(v)).all()):
            raise FloatingPointError(f"non-finite loss term {name!r}")
    p = lambda k: parts.get(k, 0.0)
    return (p("distortion")
            + weights.lambda_rate * (p("rate") + weights.lambda_offset_mask * p("offset_mask"))
            + weights.lambda_temp_mask * p("temp_mask")
            + weights.lambda_vol * p("vol")
            + weights.lambda_tv * p("tv"))


# -- training --------------------------------------------------------------------

ANCHOR_GROUPS = {
    "xyz": "lr_position", "feat": "lr_feature", "scaling": "lr_feature", "offsets": "lr_feature",
    "tfeat": "lr_feature", "offset_logit": "lr_feature", "temporal_logit": "lr_feature", "tau": "lr_activation",
}


def make_optimizer(model: TedModel, cfg: TrainConfig):
    groups = [{"params": [getattr(model.anchors, n)], "lr": getattr(cfg, lr), "name": n}
              for n, lr in ANCHOR_GROUPS.items()]
    bank = [model.nets.bank.Z]
    nets = [p for n, p in model.nets.named_parameters() if not n.startswith("bank.")]
    groups += [{"params": bank, "lr": cfg.lr_bank, "name": "bank"},
               {"params": nets, "lr": cfg.lr_net, "name": "nets"}]
    return torch.optim.Adam(groups)


def _swap_anchor_params(opt, old, new, keep):
    """Point the anchor groups at ``new`` and slice their Adam moments."""
    for group in opt.param_groups:
        name = group["name"]
        if name not in ANCHOR_GROUPS:
            continue
        p_old, p_new = getattr(old, name), getattr(new, name)
        state = opt.state.pop(p_old, None)
        if state:
            state = {k: (v[keep] if torch.is_tensor(v) and v.dim() > 0 else v) for k, v in state.items()}
            opt.state[p_new] = state
        group["params"] = [p_new]


def full_windows(n, dtype):
    from .anchors import raw_activation

    return raw_activation(torch.zeros(n), torch.ones(n)).to(dtype)


def anchor_contributions(model: TedModel, camera, t):
    """Total blending weight each anchor receives in one rendered view."""
    with torch.no_grad():
        out, prims = model.render(camera, t, with_weights=True)
    per_anchor = torch.zeros(len(model.anchors), dtype=torch.float64)
    K = model.anchors.n_offsets
    per_anchor.index_add_(0, torch.div(prims.ids, K, rounding_mode="floor"), out.weights.double())
    return per_anchor.numpy()


def init_activation_from_visibility(model: TedModel, scene: ToyScene, threshold=0.5, occlusion_aware=True):
    """Set every window to the first/last timestamp at which the anchor is
    seen.  Returns the (T, N) visibility matrix."""
    attrs, _, _ = model.attributes("hard")

    def positions_at(t):
        with torch.no_grad():
            xyz, _ = model.deformed(t, attrs, hard_masks=True)
        return xyz.double().numpy()

    contrib = None
    if occlusion_aware:
        contrib = lambda ci, t: anchor_contributions(model, scene.cameras[ci], t)
    vis = visibility_matrix(positions_at, scene.cameras, scene.timestamps, contrib, threshold)
    a_s, a_f, _ = first_last_visible(vis, scene.timestamps)
    model.set_windows(torch.from_numpy(a_s), torch.from_numpy(a_f))
    return vis


def prune_step(model: TedModel, cfg: TrainConfig, opt=None):
    """Time-aware pruning; returns the number of removed anchors."""
    with torch.no_grad():
        attrs, _, _ = model.attributes("hard")
        alpha = model.static_opacity(attrs)
        tau = model.anchors.tau if model.uses_activation else full_windows(len(model.anchors), model.dtype)
        ts = np.linspace(0.0, 1.0, cfg.prune_samples)
        keep = prune_mask(tau, alpha, cfg.prune_threshold, ts, temporal=model.uses_activation)
    if bool(keep.all()) or not bool(keep.any()):
        return 0
    old = model.anchors
    new = old.select(keep)
    model.replace_anchors(new)
    if opt is not None:
        _swap_anchor_params(opt, old, new, keep)
    return int((~keep).sum())


@dataclass
class TrainResult:
    model: TedModel
    log: list = field(default_factory=list)


def _view_schedule(scene: ToyScene, rng):
    C, F = scene.frames.shape[:2]
    pairs = np.array([(c, f) for c in range(C) for f in range(F)])
    while True:
        for i in rng.permutation(len(pairs)):
            yield tuple(int(v) for v in pairs[i])


def coded_element_count(model: TedModel):
    dims = E.attribute_dims(model.config.feat_dim, model.config.n_offsets, model.config.tfeat_dim)
    return len(model.anchors) * sum(dims[k] for k in model.coded_types())


def train(scene: ToyScene, config: TrainConfig, log_path=None, model: TedModel | None = None,
          callback=None) -> TrainResult:
    """Two-phase rate-distortion training on a toy scene."""
    cfg = copy.deepcopy(config)
    mcfg = dataclasses.replace(cfg.model, n_frames=scene.n_frames, lambda_rate=cfg.weights.lambda_rate)
    torch.manual_seed(cfg.seed)
    if model is None:
        if len(scene.points) == 0:
            raise ValueError("scene has no points to initialise anchors from")
        model = TedModel.from_points(scene.points, mcfg, seed=cfg.seed)
    noise = torch.Generator().manual_seed(cfg.seed + 17)
    views = _view_schedule(scene, np.random.default_rng(cfg.seed))
    opt = make_optimizer(model, cfg)
    targets = torch.from_numpy(scene.frames)
    log, sink = [], open(log_path, "w") if log_path else None
    try:
        for it in range(cfg.iterations):
            if it == cfg.static_iterations and not model.dynamic_phase:
                init_activation_from_visibility(model, scene, cfg.visibility_threshold,
                                                cfg.occlusion_aware_visibility)
                model.dynamic_phase = True
            if it > 0 and cfg.prune_every and it % cfg.prune_every == 0:
                prune_step(model, cfg, opt)
            c, f = next(views)
            t = float(scene.timestamps[f])
            attrs, bits, breakdown = model.attributes("noise", noise)
            out, prims = model.render(scene.cameras[c], t, attrs=attrs, train=True)
            om, tm = mask_losses(model.anchors)
            parts = {
                "distortion": distortion_loss(out.image, targets[c, f]),
                "rate": bits.sum() / max(coded_element_count(model), 1),
                "offset_mask": om, "temp_mask": tm,
                "vol": vol_loss(prims.scales), "tv": bank_tv_loss(model.nets.bank.Z),
            }
            try:
                loss = total_loss(parts, cfg.weights)
            except FloatingPointError:
                bad = next(k for k, v in parts.items() if not bool(torch.isfinite(v).all()))
                raise DivergenceError(it, bad) from None
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            entry = {"iteration": it, "phase": "dynamic" if model.dynamic_phase else "static",
                     "loss": float(loss.detach()), **{k: float(torch.as_tensor(v).detach()) for k, v in parts.items()},
                     "anchors": len(model.anchors), "est_bits": float(bits.detach().sum())}
            log.append(entry)
            if sink:
                sink.write(json.dumps(entry) + "\n")
            if callback:
                callback(model, entry)
    finally:
        if sink:
            sink.close()
    model.requires_grad_(False)
    return TrainResult(model, log)


# -- evaluation ------------------------------------------------------------------

def evaluate(model: TedModel, scene: ToyScene):
    """Mean PSNR / SSIM over every camera and frame."""
    ps, ss = [], []
    with torch.no_grad():
        for c, cam in enumerate(scene.cameras):
            for f, t in enumerate(scene.timestamps):
                out, _ = model.render(cam, float(t))
                target = torch.from_numpy(scene.frames[c, f]).double()
                ps.append(psnr(out.image.double(), target))
                ss.append(float(ssim(out.image.double(), target)))
    return {"psnr": float(np.mean(ps)), "ssim": float(np.mean(ss))}


# -- gradient checking ------------------------------------------------------------

def grad_check(loss_fn, params, eps=1e-6, n_samples=20, seed=0):
    """Max relative error between autograd and central differences over a
    random subsample of parameter entries."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = list(params)
    for p in params:
        p.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    gmax = max((float(g.abs().max()) for g in grads if g.numel()), default=0.0)
    floor = 1e-6 * max(1.0, gmax)
    sizes = np.array([p.numel() for p in params])
    rng = np.random.default_rng(seed)
    total = int(sizes.sum())
    picks = rng.choice(total, size=min(n_samples, total), replace=False)
    bounds = np.cumsum(sizes)
    worst = 0.0
    with torch.no_grad():
        for flat in picks:
            k = int(np.searchsorted(bounds, flat, side="right"))
            j = int(flat - (bounds[k - 1] if k else 0))
            view = params[k].view(-1)
            orig = float(view[j])
            view[j] = orig + eps
            hi = float(loss_fn())
            view[j] = orig - eps
            lo = float(loss_fn())
            view[j] = orig
            num = (hi - lo) / (2 * eps)
            ana = float(grads[k].reshape(-1)[j])
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, err)
    return worst


# -- rate-distortion sweeps ---------------------------------------------------------

@dataclass
class RDPoint:
    lambda_rate: float
    bytes: int
    psnr: float
    ssim: float
    attribute_bytes: int = 0
    anchors: int = 0


def train_and_encode(scene, config: TrainConfig):
    from .container import model_from_coded, quantize_model, read_container, section_sizes, write_container

    result = train(scene, config)
    data = write_container(quantize_model(result.model))
    decoded = model_from_coded(read_container(data))
    metrics = evaluate(decoded, scene)
    _, secs = section_sizes(data)
    return result, data, decoded, metrics, secs


def rd_sweep(scene, lambdas, config: TrainConfig, out_dir=None):
    """One trained and encoded model per lambda; metrics are decode-side."""
    rows = []
    for lam in lambdas:
        cfg = copy.deepcopy(config)
        cfg.weights.lambda_rate = float(lam)
        result, data, decoded, metrics, secs = train_and_encode(scene, cfg)
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            (Path(out_dir) / f"lambda_{lam:g}.ted4").write_bytes(data)
        rows.append(RDPoint(float(lam), len(data), metrics["psnr"], metrics["ssim"],
                            secs["attributes"]["payload_bytes"], len(decoded.anchors)))
    return rows


def bd_rate(curve_a, curve_b):
    """Average bitrate difference of ``curve_b`` relative to ``curve_a`` in
    percent at equal PSNR; ``None`` when a curve has fewer than two points
    or the PSNR ranges do not overlap."""
    (ra, pa), (rb, pb) = ((np.log(np.asarray([p[0] for p in c], dtype=np.float64)),
                           np.asarray([p[1] for p in c], dtype=np.float64)) for c in (curve_a, curve_b))
    if len(ra) < 2 or len(rb) < 2:
        return None
    lo, hi = max(pa.min(), pb.min()), min(pa.max(), pb.max())
    if not hi > lo:
        return None
    deg = min(3, len(ra) - 1, len(rb) - 1)
    fa, fb = np.polyfit(pa, ra, deg), np.polyfit(pb, rb, deg)
    ia, ib = np.polyint(fa), np.polyint(fb)
    avg_a = (np.polyval(ia, hi) - np.polyval(ia, lo)) / (hi - lo)
    avg_b = (np.polyval(ib, hi) - np.polyval(ib, lo)) / (hi - lo)
    return float((math.exp(avg_b - avg_a) - 1.0) * 100.0)


# -- entropy-model comparison -------------------------------------------------------

def correlated_attributes(n=400, dim=8, seed=0, noise=0.05):
    """Positions in the unit cube with attributes that are smooth functions
    of position (plus a little noise)."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 1, size=(n, 3))
    freqs = rng.normal(scale=3.0, size=(3, dim))
    phase = rng.uniform(0, 2 * np.pi, size=dim)
    vals = 2.0 * np.sin(x @ freqs + phase) + noise * rng.normal(size=(n, dim))
    return x, vals


def compare_priors(positions, values, q=0.1, steps=400, seed=0, lr=1e-2):
    """Estimated bits of the same hard-quantized symbols under a fitted
    position-conditioned Gaussian prior and a fitted factorized prior."""
    torch.manual_seed(seed)
    x = torch.as_tensor(positions, dtype=torch.float32)
    v = torch.as_tensor(values, dtype=torch.float32)
    dim = v.shape[1]
    hyper = E.HyperpriorNet({"a": dim}, n_bands=4, hidden=64, base_step={"a": q})
    fact = E.FactorizedPrior(dim)
    gen = torch.Generator().manual_seed(seed)
    q_t = torch.tensor(q)
    models = {"hyperprior": hyper, "factorized": fact}

    def bits(name, vals):
        if name == "hyperprior":
            mu, sigma, _ = hyper(x)["a"]
            return -torch.log2(E.likelihood(vals, mu, sigma, q_t)).sum()
        return -torch.log2(fact.likelihood(vals, q_t)).sum()

    for name, m in models.items():
        opt = torch.optim.Adam(m.parameters(), lr=lr)
        for _ in range(steps):
            loss = bits(name, E.quantize(v, q_t, "noise", gen)) / v.numel()
            opt.zero_grad()
            loss.backward()
            opt.step()
    hard = E.quantize(v, q_t, "hard")
    with torch.no_grad():
        return {name: float(bits(name, hard)) for name in models}
