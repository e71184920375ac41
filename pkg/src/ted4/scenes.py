"""Synthetic multi-view video scenes rendered from hand-placed Gaussians.

All scenes share a small room (back wall plus floor, seen by a row of
front-facing cameras).  ``slider`` adds a blob moving left to right and
``occluder`` adds a front wall with a blob behind it that only rises into
view around t = 0.5.
"""
from __future__ import annotations

import numpy as np
import torch

from .anchors import Camera, ToyScene
from .render import Primitives, render

SCENES = ("static-room", "slider", "occluder")

RESOLUTION = 32
N_CAMERAS = 4
N_FRAMES = 20
SPACING = 0.1

WALL_TOP = 0.1
BLOB_REST, BLOB_PEAK = -0.4, 0.3
BLOB_RADIUS = {"slider": 0.15, "occluder": 0.25}
PEEK_WIDTH = 0.09


def _plane(origin, u, v, nu, nv, color_fn, thickness=0.02):
    """Flat splats on a grid spanned by ``u`` and ``v``."""
    origin, u, v = (np.asarray(a, dtype=np.float64) for a in (origin, u, v))
    i, j = np.meshgrid(np.arange(nu), np.arange(nv), indexing="ij")
    means = origin + (i.reshape(-1, 1) + 0.5) * SPACING * u + (j.reshape(-1, 1) + 0.5) * SPACING * v
    normal = np.cross(u, v)
    scales = np.abs(u) * 0.6 * SPACING + np.abs(v) * 0.6 * SPACING + np.abs(normal) * thickness
    colors = np.array([color_fn(a, b) for a, b in zip(i.reshape(-1), j.reshape(-1))])
    return means, np.tile(scales, (len(means), 1)), colors


def _blob(center, radius, color, rng):
    n = 40
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    means = np.asarray(center) + d * radius * rng.uniform(0.3, 1.0, size=(n, 1))
    scales = np.full((n, 3), 0.45 * radius)
    colors = np.clip(np.asarray(color) + rng.normal(scale=0.03, size=(n, 3)), 0, 1)
    return means, scales, colors


def _room():
    checker = lambda a, b: (0.75, 0.7, 0.55) if (a // 3 + b // 3) % 2 else (0.45, 0.5, 0.7)
    floor_col = lambda a, b: (0.35 + 0.02 * (a % 5), 0.4, 0.3)
    wall = _plane((-1.0, -1.0, -1.0), (1, 0, 0), (0, 1, 0), 20, 20, checker)
    floor = _plane((-1.0, -1.0, -1.0), (1, 0, 0), (0, 0, 1), 20, 14, floor_col)
    return [wall, floor]


def _front_wall():
    col = lambda a, b: (0.8, 0.3 + 0.1 * ((a // 2) % 2), 0.25)
    n_up = int(round((WALL_TOP + 1.0) / SPACING))
    return _plane((-1.0, -1.0, 0.3), (1, 0, 0), (0, 1, 0), 20, n_up, col)


def blob_center(name, t):
    """Ground-truth blob trajectory (``None`` for the static room)."""
    if name == "slider":
        return np.array([-0.6 + 1.2 * t, -0.4, -0.3])
    if name == "occluder":
        # flat-topped bump: above the wall for frames 8..11 of 20
        bump = np.exp(-((t - 0.5) / PEEK_WIDTH) ** 4)
        return np.array([0.0, BLOB_REST + (BLOB_PEAK - BLOB_REST) * bump, -0.3])
    return None


def _cameras(n=N_CAMERAS, res=RESOLUTION):
    cams = []
    for k in range(n):
        x = -1.2 + 2.4 * k / max(n - 1, 1)
        eye = (x, 0.5 + 0.2 * (k % 2), 2.6)
        cams.append(Camera.look_at(eye, (0.0, -0.2, -0.3), (0.0, 1.0, 0.0), 50.0, res, res))
    return cams


def _primitives(parts):
    means = np.concatenate([p[0] for p in parts])
    scales = np.concatenate([p[1] for p in parts])
    colors = np.concatenate([p[2] for p in parts])
    n = len(means)
    f = lambda a: torch.tensor(a, dtype=torch.float64)
    rot = torch.zeros(n, 4, dtype=torch.float64)
    rot[:, 0] = 1.0
    return Primitives(f(means), f(scales), rot, f(colors), torch.full((n,), 0.98, dtype=torch.float64),
                      torch.arange(n))


def _surface_points(parts, rng, per_splat=2):
    pts = [m + rng.normal(scale=0.01, size=(per_splat,) + m.shape) for m, _, _ in parts]
    return np.concatenate([p.reshape(-1, 3) for p in pts])


def make_scene(name, seed=0, n_frames=N_FRAMES, resolution=RESOLUTION, n_cameras=N_CAMERAS) -> ToyScene:
    if name not in SCENES:
        raise ValueError(f"unknown scene {name!r}; choose from {', '.join(SCENES)}")
    if n_frames < 2 or n_frames % 2:
        raise ValueError(f"n_frames must be even and >= 2, got {n_frames}")
    rng = np.random.default_rng(seed)
    static = _room()
    if name == "occluder":
        static.append(_front_wall())
    blob_rng_state = rng.bit_generator.state
    timestamps = np.arange(n_frames) / (n_frames - 1)
    cams = _cameras(n_cameras, resolution)
    bg = (0.0, 0.0, 0.0)
    frames = np.zeros((len(cams), n_frames, resolution, resolution, 3), dtype=np.float32)
    for f, t in enumerate(timestamps):
        parts = list(static)
        center = blob_center(name, t)
        if center is not None:
            rng.bit_generator.state = blob_rng_state  # same blob shape every frame
            parts.append(_blob(center, BLOB_RADIUS[name], (0.95, 0.85, 0.2), rng))
        prims = _primitives(parts)
        for c, cam in enumerate(cams):
            with torch.no_grad():
                frames[c, f] = render(prims, cam, bg).image.numpy()
    # ground-truth points: static geometry plus the blob at t = 0.5
    parts = list(static)
    center = blob_center(name, 0.5)
    if center is not None:
        rng.bit_generator.state = blob_rng_state
        parts.append(_blob(center, BLOB_RADIUS[name], (0.95, 0.85, 0.2), rng))
    points = _surface_points(parts, np.random.default_rng(seed + 1))
    return ToyScene(cams, frames, timestamps, name, points, seed)
