"""Attribute decoding and a small CPU splatting rasterizer.

Projection follows the usual EWA local-affine approximation: the 3D
covariance is mapped through the camera rotation and the Jacobian of the
perspective division.  Splats are composited front to back after a depth
sort (ties broken by canonical primitive id), footprints are cut at 3 sigma
and per-splat alpha is capped at 0.99.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .anchors import gaussian_means

SCALE_MIN, SCALE_MAX = 1e-6, 1e2
ALPHA_MAX = 0.99
CUTOFF_SIGMA = 3.0
MAX_CONDITION = 1e8


@dataclass
class GaussianPrimitive:
    mean: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    color: np.ndarray
    opacity: float

    def __post_init__(self):
        if np.any(np.asarray(self.scale) <= 0):
            raise ValueError("scales must be strictly positive")
        if abs(np.linalg.norm(self.rotation) - 1.0) > 1e-6:
            raise ValueError("rotation quaternion must have unit length")


@dataclass
class Primitives:
    """Batched primitives; ``ids`` fixes the compositing tie-break order."""
    means: torch.Tensor
    scales: torch.Tensor
    rotations: torch.Tensor
    colors: torch.Tensor
    opacities: torch.Tensor
    ids: torch.Tensor

    def __len__(self):
        return self.means.shape[0]

    def subset(self, keep):
        return Primitives(*(getattr(self, f)[keep] for f in
                            ("means", "scales", "rotations", "colors", "opacities", "ids")))

    def item(self, i):
        return GaussianPrimitive(*(getattr(self, f)[i].detach().numpy() for f in
                                   ("means", "scales", "rotations", "colors")),
                                 float(self.opacities[i]))

    @classmethod
    def empty(cls, dtype=torch.float32):
        z = lambda *s: torch.zeros(*s, dtype=dtype)
        return cls(z(0, 3), z(0, 3), z(0, 4), z(0, 3), z(0), torch.zeros(0, dtype=torch.long))


@dataclass
class RenderedImage:
    image: torch.Tensor           # (H, W, 3)
    alpha: torch.Tensor           # (H, W) accumulated opacity
    weights: torch.Tensor | None  # per input primitive total blending weight
    skipped: int = 0


class AttributeDecoders(nn.Module):
    """Scaffold MLPs: f' -> K x (scale, rotation), f -> K x (color, opacity)."""

    def __init__(self, feat_dim, n_offsets, hidden=64):
        super().__init__()
        self.n_offsets = n_offsets
        self.geometry = nn.Sequential(nn.Linear(feat_dim, hidden), nn.ReLU(), nn.Linear(hidden, n_offsets * 7))
        self.appearance = nn.Sequential(nn.Linear(feat_dim, hidden), nn.ReLU(), nn.Linear(hidden, n_offsets * 4))

    def forward(self, feat_deformed, feat, scaling):
        K = self.n_offsets
        geo = self.geometry(feat_deformed).reshape(*feat_deformed.shape[:-1], K, 7)
        app = self.appearance(feat).reshape(*feat.shape[:-1], K, 4)
        log_scale = geo[..., :3] + torch.log(torch.abs(scaling)[..., None, :].clamp_min(SCALE_MIN))
        scales = torch.exp(log_scale).clamp(SCALE_MIN, SCALE_MAX)
        unit = torch.zeros(4, dtype=geo.dtype)
        unit[0] = 1.0
        rotations = F.normalize(geo[..., 3:] + unit, dim=-1)
        colors = torch.sigmoid(app[..., :3])
        opacities = torch.sigmoid(app[..., 3])
        return scales, rotations, colors, opacities


def decode_primitives(xyz, feat_deformed, feat, scaling, offsets, offset_mask, decoders, drop=True):
    """Primitives of a batch of anchors.

    ``offset_mask`` is (N, K) with values in {0, 1} (straight-through in
    training); opacity is multiplied by it and, with ``drop``, masked
    primitives are removed.
    """
    N, K = offsets.shape[:2]
    if feat_deformed.shape[-1] != feat.shape[-1]:
        raise ValueError("deformed feature dimension mismatch")
    means = gaussian_means(xyz, scaling, offsets)
    scales, rotations, colors, opacities = decoders(feat_deformed, feat, scaling)
    opacities = opacities * offset_mask
    ids = torch.arange(N * K).reshape(N, K)
    prims = Primitives(means.reshape(-1, 3), scales.reshape(-1, 3), rotations.reshape(-1, 4),
                       colors.reshape(-1, 3), opacities.reshape(-1), ids.reshape(-1))
    if drop:
        prims = prims.subset(offset_mask.detach().reshape(-1) > 0.5)
    return prims


def quaternion_to_matrix(q):
    w, x, y, z = q.unbind(-1)
    return torch.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], -1).reshape(*q.shape[:-1], 3, 3)


def project(prims: Primitives, camera, dilation=0.3):
    """Camera-space depth, 2D means and 2D covariances of each splat."""
    dtype = prims.means.dtype
    R = torch.as_tensor(camera.R, dtype=dtype)
    t = torch.as_tensor(camera.t, dtype=dtype)
    p = prims.means @ R.T + t
    x, y, z = p.unbind(-1)
    zs = torch.where(z > camera.near, z, torch.ones_like(z))
    u = camera.fx * x / zs + camera.cx
    v = camera.fy * y / zs + camera.cy
    M = quaternion_to_matrix(prims.rotations) * prims.scales[..., None, :]
    cov = R @ (M @ M.transpose(-1, -2)) @ R.T
    zero = torch.zeros_like(zs)
    J = torch.stack([
        torch.stack([camera.fx / zs, zero, -camera.fx * x / zs ** 2], -1),
        torch.stack([zero, camera.fy / zs, -camera.fy * y / zs ** 2], -1),
    ], -2)
    cov2 = J @ cov @ J.transpose(-1, -2) + dilation * torch.eye(2, dtype=dtype)
    return z, torch.stack([u, v], -1), cov2


def _condition(cov2):
    a, b, c = cov2[:, 0, 0], cov2[:, 0, 1], cov2[:, 1, 1]
    mid = 0.5 * (a + c)
    rad = torch.sqrt(torch.clamp(mid * mid - (a * c - b * b), min=0.0))
    hi, lo = mid + rad, mid - rad
    return hi / torch.clamp(lo, min=1e-300)


def render(prims: Primitives, camera, background=(0.0, 0.0, 0.0), dilation=0.3,
           drop_transparent=True, with_weights=False) -> RenderedImage:
    dtype = prims.means.dtype
    H, W = camera.height, camera.width
    bg = torch.as_tensor(background, dtype=dtype)
    n_in = len(prims)
    if n_in:
        depth, mean2, cov2 = project(prims, camera, dilation)
        with torch.no_grad():
            ok = (depth > camera.near) & (depth < camera.far)
            cond = _condition(cov2.detach())
            degenerate = ok & (~torch.isfinite(cond) | (cond > MAX_CONDITION))
            ok &= ~degenerate
            if drop_transparent:
                ok &= prims.opacities.detach() > 0
        skipped = int(degenerate.sum())
        idx = torch.nonzero(ok).reshape(-1)
        order = np.lexsort((prims.ids[idx].numpy(), depth.detach()[idx].double().numpy()))
        idx = idx[torch.as_tensor(order, dtype=torch.long)]
    else:
        skipped, idx = 0, torch.zeros(0, dtype=torch.long)
    if len(idx) == 0:
        image = bg.expand(H, W, 3).clone()
        weights = torch.zeros(n_in, dtype=dtype) if with_weights else None
        return RenderedImage(image, torch.zeros(H, W, dtype=dtype), weights, skipped)

    m2, c2 = mean2[idx], cov2[idx]
    det = c2[:, 0, 0] * c2[:, 1, 1] - c2[:, 0, 1] ** 2
    ia, ib, ic = c2[:, 1, 1] / det, -c2[:, 0, 1] / det, c2[:, 0, 0] / det
    jj, ii = torch.meshgrid(torch.arange(W, dtype=dtype) + 0.5, torch.arange(H, dtype=dtype) + 0.5, indexing="xy")
    px = torch.stack([jj.reshape(-1), ii.reshape(-1)], -1)
    d = px[:, None, :] - m2[None]
    maha = ia * d[..., 0] ** 2 + 2 * ib * d[..., 0] * d[..., 1] + ic * d[..., 1] ** 2
    g = torch.where(maha <= CUTOFF_SIGMA ** 2, torch.exp(-0.5 * maha), torch.zeros_like(maha))
    a = torch.clamp(prims.opacities[idx] * g, max=ALPHA_MAX)
    trans = torch.cumprod(1.0 - a, dim=1)
    T = torch.cat([torch.ones_like(trans[:, :1]), trans[:, :-1]], 1)
    w = a * T
    color = w @ prims.colors[idx] + trans[:, -1:] * bg
    image = color.reshape(H, W, 3).clamp(0.0, 1.0)
    alpha = (1.0 - trans[:, -1]).reshape(H, W)
    weights = None
    if with_weights:
        weights = torch.zeros(n_in, dtype=dtype).index_add(0, idx, w.detach().sum(0))
    return RenderedImage(image, alpha, weights, skipped)


def psnr(a, b, cap=100.0):
    a, b = torch.as_tensor(a, dtype=torch.float64), torch.as_tensor(b, dtype=torch.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * np.log10(1.0 / mse))


def gaussian_window(size=11, sigma=1.5, dtype=torch.float64):
    x = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-(x ** 2) / (2 * sigma ** 2))
    g = g / g.sum()
    return g[:, None] * g[None, :]


def ssim(a, b, window=11, sigma=1.5, C1=0.01 ** 2, C2=0.03 ** 2):
    """Mean SSIM over all valid window positions and channels (differentiable).

    Images smaller than the window use the largest odd window that fits.
    """
    a, b = torch.as_tensor(a), torch.as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    side = min(a.shape[0], a.shape[1])
    if side < 3:
        raise ValueError(f"image too small for SSIM: {tuple(a.shape)}")
    if side < window:
        window = side if side % 2 else side - 1
    if a.dim() == 2:
        a, b = a[..., None], b[..., None]
    x = a.permute(2, 0, 1)[:, None]
    y = b.permute(2, 0, 1)[:, None].to(x.dtype)
    k = gaussian_window(window, sigma, x.dtype)[None, None]
    mu_x, mu_y = F.conv2d(x, k), F.conv2d(y, k)
    sxx = F.conv2d(x * x, k) - mu_x ** 2
    syy = F.conv2d(y * y, k) - mu_y ** 2
    sxy = F.conv2d(x * y, k) - mu_x * mu_y
    num = (2 * mu_x * mu_y + C1) * (2 * sxy + C2)
    den = (mu_x ** 2 + mu_y ** 2 + C1) * (sxx + syy + C2)
    return (num / den).mean()
