"""Temporal activation windows, time-aware opacity and pruning."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .anchors import AnchorSet, activation_params


@dataclass
class ActivationParams:
    a_s: float
    b_s: float
    a_f: float
    b_f: float

    def __post_init__(self):
        if self.b_s < 1e-3 or self.b_f < 1e-3:
            raise ValueError("transition widths must be >= 1e-3")
        if self.a_s > self.a_f:
            raise ValueError("a_s must not exceed a_f")


def activation(a_s, b_s, a_f, b_f, t):
    """Window value: 1 inside [a_s, a_f], Gaussian fall-off outside."""
    a_s = torch.as_tensor(a_s)
    b_s, a_f, b_f, t = (torch.as_tensor(v, dtype=a_s.dtype) if not torch.is_tensor(v) else v for v in (b_s, a_f, b_f, t))
    rise = torch.exp(-(((t - a_s) / b_s) ** 2))
    fall = torch.exp(-(((t - a_f) / b_f) ** 2))
    return torch.where(t < a_s, rise, torch.where(t > a_f, fall, torch.ones_like(rise)))


def window_activation(p: ActivationParams, t):
    return float(activation(torch.tensor(p.a_s, dtype=torch.float64), p.b_s, p.a_f, p.b_f, t))


def time_aware_opacity(alpha, tau_t):
    return alpha * tau_t


def straight_through_mask(logit):
    """Hard 0/1 mask in the forward pass, sigmoid gradient in the backward."""
    soft = torch.sigmoid(logit)
    hard = (soft > 0.5).to(soft.dtype)
    return hard + soft - soft.detach()


def first_last_visible(visible, timestamps):
    """Per-anchor (a_s, a_f, never_visible) from a (T, N) visibility matrix."""
    visible = np.asarray(visible, dtype=bool)
    ts = np.asarray(timestamps, dtype=np.float64)
    seen = visible.any(axis=0)
    first = np.argmax(visible, axis=0)
    last = len(ts) - 1 - np.argmax(visible[::-1], axis=0)
    a_s = np.where(seen, ts[first], 0.0)
    a_f = np.where(seen, ts[last], 1.0)
    return a_s, a_f, ~seen


def visibility_matrix(positions_at, cameras, timestamps, contribution_at=None, threshold=0.5):
    """(T, N) booleans: anchor inside some camera frustum at each timestamp.

    ``positions_at(t)`` yields deformed anchor positions.  When
    ``contribution_at(camera_index, t)`` is given, an anchor must also carry
    at least ``threshold`` rendered blending weight in that view, which
    excludes anchors hidden behind occluders.
    """
    rows = []
    for t in timestamps:
        pos = np.asarray(positions_at(float(t)))
        vis = np.zeros(len(pos), dtype=bool)
        for ci, cam in enumerate(cameras):
            inside = cam.in_frustum(pos)
            if contribution_at is not None:
                inside &= np.asarray(contribution_at(ci, float(t))) >= threshold
            vis |= inside
        rows.append(vis)
    return np.stack(rows) if rows else np.zeros((0, 0), dtype=bool)


def collective_opacity(tau, alpha, t_samples):
    """(S, N) sum of time-aware primitive opacities for each sampled time."""
    a_s, b_s, a_f, b_f = activation_params(tau)
    out = [activation(a_s, b_s, a_f, b_f, t)[:, None] * alpha for t in t_samples]
    return torch.stack([o.sum(-1) for o in out])


def prune_mask(tau, alpha, threshold, t_samples, temporal=True):
    t_samples = list(t_samples)
    if not t_samples:
        raise ValueError("t_samples must be non-empty")
    with torch.no_grad():
        if temporal:
            coll = collective_opacity(tau, alpha, t_samples)
        else:
            coll = alpha.sum(-1)[None]
        return coll.max(0).values >= threshold


def prune(anchors: AnchorSet, alpha, threshold, t_samples, temporal=True) -> AnchorSet:
    """Drop anchors whose collective opacity stays below ``threshold`` at every
    sampled time.  ``alpha`` is the (N, K) static opacity after offset masking."""
    keep = prune_mask(anchors.tau, alpha, threshold, t_samples, temporal)
    return anchors.select(keep)


@dataclass
class DurationHistogram:
    short: int = 0   # dt <= 0.2
    medium: int = 0  # 0.2 < dt < 0.8
    long: int = 0    # dt >= 0.8

    @property
    def total(self):
        return self.short + self.medium + self.long

    def fractions(self):
        n = max(self.total, 1)
        return {"short": self.short / n, "medium": self.medium / n, "long": self.long / n}

    def to_dict(self):
        return {"short_le_0.2": self.short, "medium": self.medium, "long_ge_0.8": self.long,
                "total": self.total, "fractions": self.fractions()}


def bin_durations(durations):
    d = np.asarray(durations, dtype=np.float64)
    # fp slack so a nominal 0.2 / 0.8 lands on the inclusive side
    eps = 1e-9
    short = int(np.sum(d <= 0.2 + eps))
    long = int(np.sum(d >= 0.8 - eps))
    return DurationHistogram(short, len(d) - short - long, long)


def duration_histogram(tau, dynamic=None):
    """Bin dt = a_f - a_s; restricted to rows where ``dynamic`` is set."""
    with torch.no_grad():
        a_s, _, a_f, _ = activation_params(torch.as_tensor(tau))
        d = (a_f - a_s).double().numpy()
    if dynamic is not None:
        d = d[np.asarray(dynamic, dtype=bool)]
    return bin_durations(d)
