"""Embedding-based deformation: a shared bank of per-time vectors queried by
per-anchor temporal features."""
from __future__ import annotations

import torch
from torch import nn


class DeformationBank(nn.Module):
    """``F/2 x D`` learnable deformation vectors, node k at time k/(F/2 - 1)."""

    def __init__(self, n_frames, dim, init_std=0.1, generator=None):
        super().__init__()
        if n_frames < 2 or n_frames % 2:
            raise ValueError(f"n_frames must be even and >= 2, got {n_frames}")
        self.n_frames = n_frames
        z = torch.randn(n_frames // 2, dim, generator=generator) * init_std
        self.Z = nn.Parameter(z)

    @property
    def rows(self):
        return self.Z.shape[0]

    def node_times(self):
        m = self.rows
        if m == 1:
            return torch.zeros(1, dtype=self.Z.dtype)
        return torch.arange(m, dtype=self.Z.dtype) / (m - 1)

    def forward(self, t):
        return interp(self.Z, t)


def interp(Z, t):
    """Linear interpolation between the two bank rows bracketing ``t``."""
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    m = Z.shape[0]
    if m == 1:
        return Z[0]
    u = t * (m - 1)
    k = min(int(u), m - 2)
    w = u - k
    return (1.0 - w) * Z[k] + w * Z[k + 1]


class DeformationNets(nn.Module):
    """``F_project`` (bias-free linear d -> D) and ``F_deform`` (D -> 3 + d_f).

    The decoder output head starts at zero so an untrained model does not
    move anything.
    """

    def __init__(self, tfeat_dim, bank_dim, feat_dim, hidden=64, dx_scale=0.02):
        super().__init__()
        self.project = nn.Linear(tfeat_dim, bank_dim, bias=False)
        self.decoder = nn.Sequential(
            nn.Linear(bank_dim, hidden), nn.Tanh(),
            nn.Linear(hidden, hidden), nn.Tanh(),
            nn.Linear(hidden, 3 + feat_dim),
        )
        nn.init.zeros_(self.decoder[-1].weight)
        nn.init.zeros_(self.decoder[-1].bias)
        self.dx_scale = dx_scale

    @property
    def tfeat_dim(self):
        return self.project.in_features

    def forward(self, latent):
        out = self.decoder(latent)
        return self.dx_scale * out[..., :3], out[..., 3:]


def project(tfeat, nets: DeformationNets):
    if tfeat.shape[-1] != nets.tfeat_dim:
        raise ValueError(f"temporal feature has dimension {tfeat.shape[-1]}, expected {nets.tfeat_dim}")
    return nets.project(tfeat)


def query(w, z_t):
    if w.shape[-1] != z_t.shape[-1]:
        raise ValueError(f"dimension mismatch: {w.shape[-1]} vs {z_t.shape[-1]}")
    return w * z_t


def deform(xyz, feat, tfeat, bank, nets, t, dynamic=None):
    """Deformed positions and features at time ``t``.

    ``dynamic`` is the (possibly straight-through) temporal mask; rows with
    mask 0 come back untouched.
    """
    z_t = interp(bank.Z if isinstance(bank, DeformationBank) else bank, t)
    latent = query(project(tfeat, nets), z_t)
    dx, df = nets(latent)
    if dynamic is not None:
        gate = dynamic[..., None]
        dx, df = gate * dx, gate * df
    return xyz + dx, feat + df


def bank_tv_loss(Z):
    if Z.shape[0] < 2:
        return Z.new_zeros(())
    diff = Z[1:] - Z[:-1]
    return (diff * diff).sum() / (Z.shape[0] - 1)
