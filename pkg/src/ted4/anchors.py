"""Anchors, cameras and scenes.

An anchor sits on a voxel grid and owns ``K`` Gaussian primitives whose
means are ``x + l * O_i``.  Per-anchor tensors are stored batched inside
:class:`AnchorSet`; :class:`Anchor` is a plain single-anchor view.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .config import ModelConfig

FP16_MAX = 65504.0
WIDTH_FLOOR = 1e-3
DEFAULT_WIDTH = 0.05


def softplus_inv(y):
    y = torch.as_tensor(y, dtype=torch.float64)
    return torch.where(y > 20, y, torch.log(torch.expm1(y)))


@dataclass
class Anchor:
    position: np.ndarray
    feature: np.ndarray
    scaling: np.ndarray
    offsets: np.ndarray
    temporal_feature: np.ndarray
    activation: tuple  # (a_s, b_s, a_f, b_f)
    offset_mask: np.ndarray
    temporal_mask: float


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    R: np.ndarray  # world -> camera rotation
    t: np.ndarray  # world -> camera translation
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if self.width < 8 or self.height < 8:
            raise ValueError(f"image must be at least 8x8, got {self.width}x{self.height}")
        if np.abs(self.R @ self.R.T - np.eye(3)).max() > 1e-6:
            raise ValueError("camera rotation is not orthonormal")

    @classmethod
    def look_at(cls, eye, target, up, fov_deg, width, height):
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        f = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
        return cls(f, f, width / 2, height / 2, width, height, R, -R @ eye)

    def to_dict(self):
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "R": self.R.tolist(), "t": self.t.tolist(),
            "near": self.near, "far": self.far,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def in_frustum(self, points):
        """Boolean mask of world points that project inside the image."""
        p = np.asarray(points, dtype=np.float64) @ self.R.T + self.t
        z = p[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * p[:, 0] / z + self.cx
            v = self.fy * p[:, 1] / z + self.cy
        return (z > self.near) & (z < self.far) & (u >= 0) & (u < self.width) & (v >= 0) & (v < self.height)


@dataclass
class ToyScene:
    cameras: list
    frames: np.ndarray  # (C, F, H, W, 3) in [0, 1]
    timestamps: np.ndarray
    name: str = "scene"
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    seed: int = 0

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        C, F, H, W, _ = self.frames.shape
        if C != len(self.cameras):
            raise ValueError("one frame sequence per camera required")
        if F < 2 or F % 2:
            raise ValueError(f"frame count must be even and >= 2, got {F}")
        if len(self.timestamps) != F or np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("timestamps must be strictly increasing, one per frame")
        if self.timestamps[0] < 0 or self.timestamps[-1] > 1:
            raise ValueError("timestamps must lie in [0, 1]")
        for cam in self.cameras:
            if (cam.height, cam.width) != (H, W):
                raise ValueError("all frames must share the camera resolution")

    @property
    def n_frames(self):
        return self.frames.shape[1]


def gaussian_means(position, scaling, offsets):
    """mu_i = x + l * O_i for every offset row (works for numpy and torch)."""
    return position[..., None, :] + scaling[..., None, :] * offsets


class AnchorSet(nn.Module):
    """Batched anchor parameters in canonical order.

    ``tau`` holds the raw activation parameters ``(a_s, delta, beta_s, beta_f)``
    with ``a_f = a_s + softplus(delta)`` and ``b = softplus(beta) + 1e-3``.
    """

    def __init__(self, xyz, feat, scaling, offsets, tfeat, tau, offset_logit, temporal_logit, index=None):
        super().__init__()
        self.xyz = nn.Parameter(torch.as_tensor(xyz))
        self.feat = nn.Parameter(torch.as_tensor(feat))
        self.scaling = nn.Parameter(torch.as_tensor(scaling))
        self.offsets = nn.Parameter(torch.as_tensor(offsets))
        self.tfeat = nn.Parameter(torch.as_tensor(tfeat))
        self.tau = nn.Parameter(torch.as_tensor(tau))
        self.offset_logit = nn.Parameter(torch.as_tensor(offset_logit))
        self.temporal_logit = nn.Parameter(torch.as_tensor(temporal_logit))
        if index is None:
            index = torch.arange(self.xyz.shape[0])
        self.register_buffer("index", torch.as_tensor(index, dtype=torch.long))

    PARAM_NAMES = ("xyz", "feat", "scaling", "offsets", "tfeat", "tau", "offset_logit", "temporal_logit")

    def __len__(self):
        return self.xyz.shape[0]

    @property
    def n_offsets(self):
        return self.offsets.shape[1]

    def tensors(self):
        return {name: getattr(self, name).detach().clone() for name in self.PARAM_NAMES}

    def select(self, keep):
        """New AnchorSet holding the rows in ``keep`` (bool mask or indices)."""
        keep = torch.as_tensor(keep)
        t = {k: v[keep] for k, v in self.tensors().items()}
        return AnchorSet(index=self.index[keep].clone(), **t)

    def window(self):
        """(a_s, b_s, a_f, b_f) as four (N,) tensors."""
        return activation_params(self.tau)

    def anchor(self, i):
        a_s, b_s, a_f, b_f = (v[i].item() for v in self.window())
        return Anchor(
            position=self.xyz[i].detach().numpy().copy(),
            feature=self.feat[i].detach().numpy().copy(),
            scaling=self.scaling[i].detach().numpy().copy(),
            offsets=self.offsets[i].detach().numpy().copy(),
            temporal_feature=self.tfeat[i].detach().numpy().copy(),
            activation=(a_s, b_s, a_f, b_f),
            offset_mask=torch.sigmoid(self.offset_logit[i]).detach().numpy().copy(),
            temporal_mask=torch.sigmoid(self.temporal_logit[i]).item(),
        )


def activation_params(tau):
    a_s = tau[..., 0]
    a_f = a_s + nn.functional.softplus(tau[..., 1])
    b_s = nn.functional.softplus(tau[..., 2]) + WIDTH_FLOOR
    b_f = nn.functional.softplus(tau[..., 3]) + WIDTH_FLOOR
    return a_s, b_s, a_f, b_f


def raw_activation(a_s, a_f, b_s=DEFAULT_WIDTH, b_f=DEFAULT_WIDTH):
    """Inverse of :func:`activation_params` (widths default to 0.05)."""
    a_s = torch.as_tensor(a_s, dtype=torch.float64)
    a_f = torch.as_tensor(a_f, dtype=torch.float64)
    a_s, a_f = torch.broadcast_tensors(a_s, a_f)
    span = torch.clamp(a_f - a_s, min=1e-4)
    b_s = torch.full_like(a_s, b_s) if not torch.is_tensor(b_s) else b_s
    b_f = torch.full_like(a_s, b_f) if not torch.is_tensor(b_f) else b_f
    return torch.stack(
        [a_s, softplus_inv(span), softplus_inv(b_s - WIDTH_FLOOR), softplus_inv(b_f - WIDTH_FLOOR)], -1
    )


def fp16_round(x):
    x = np.asarray(x, dtype=np.float64)
    if np.any(np.abs(x) > FP16_MAX) or not np.all(np.isfinite(x)):
        raise OverflowError("position magnitude exceeds the 16-bit float range")
    return x.astype(np.float16).astype(np.float64)


def canonical_order(positions, index):
    """Permutation sorting by fp16-rounded (x, y, z), ties by creation index."""
    p = fp16_round(positions)
    return np.lexsort((np.asarray(index), p[:, 2], p[:, 1], p[:, 0]))


def init_anchor_set(points, voxel_size, config: ModelConfig, seed=0, dtype=torch.float32):
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise ValueError("no points")
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    cells = np.unique(np.floor(points / voxel_size).astype(np.int64), axis=0)
    centers = fp16_round((cells + 0.5) * voxel_size)
    order = canonical_order(centers, np.arange(len(centers)))
    centers = centers[order]
    n, K = len(centers), config.n_offsets
    gen = torch.Generator().manual_seed(seed)
    offsets = torch.rand(n, K, 3, generator=gen, dtype=torch.float64) - 0.5
    tau = raw_activation(torch.zeros(n), torch.ones(n))
    return AnchorSet(
        xyz=torch.tensor(centers, dtype=dtype),
        feat=torch.zeros(n, config.feat_dim, dtype=dtype),
        scaling=torch.full((n, 3), voxel_size, dtype=dtype),
        offsets=offsets.to(dtype),
        tfeat=torch.zeros(n, config.tfeat_dim, dtype=dtype),
        tau=tau.to(dtype),
        offset_logit=torch.full((n, K), 2.0, dtype=dtype),
        temporal_logit=torch.full((n,), 2.0, dtype=dtype),
        index=torch.arange(n),
    )


def round_positions_fp16(anchors: AnchorSet) -> AnchorSet:
    t = anchors.tensors()
    t["xyz"] = torch.tensor(fp16_round(t["xyz"].numpy()), dtype=t["xyz"].dtype)
    return AnchorSet(index=anchors.index.clone(), **t)


# -- file formats -----------------------------------------------------------

def read_ply(path):
    """ASCII PLY reader returning the ``x y z`` columns."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ValueError(f"{path}: not a PLY file")
    n, props, i = 0, [], 1
    while lines[i].strip() != "end_header":
        tok = lines[i].split()
        if tok[0] == "format" and tok[1] != "ascii":
            raise ValueError("only ASCII PLY is supported")
        if tok[0] == "element" and tok[1] == "vertex":
            n = int(tok[2])
        elif tok[0] == "property":
            props.append(tok[-1])
        i += 1
    cols = [props.index(c) for c in "xyz"]
    rows = [lines[i + 1 + k].split() for k in range(n)]
    return np.array([[float(r[c]) for c in cols] for r in rows]).reshape(-1, 3)


def write_ply(path, points):
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    head = ["ply", "format ascii 1.0", f"element vertex {len(points)}",
            "property float x", "property float y", "property float z", "end_header"]
    body = [f"{x:.6f} {y:.6f} {z:.6f}" for x, y, z in points]
    Path(path).write_text("\n".join(head + body) + "\n")


def _read_image(path):
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def write_image(path, img):
    from PIL import Image

    arr = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def save_scene(scene: ToyScene, out_dir):
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    C, F = scene.frames.shape[:2]
    files = []
    for c in range(C):
        row = []
        for f in range(F):
            name = f"frames/cam{c:02d}_{f:03d}.png"
            write_image(out / name, scene.frames[c, f])
            row.append(name)
        files.append(row)
    write_ply(out / "points.ply", scene.points)
    manifest = {
        "name": scene.name,
        "seed": scene.seed,
        "n_frames": F,
        "resolution": [scene.cameras[0].width, scene.cameras[0].height],
        "timestamps": [float(t) for t in scene.timestamps],
        "cameras": [c.to_dict() for c in scene.cameras],
        "frames": files,
        "points": "points.ply",
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return out


def load_scene(path) -> ToyScene:
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    cams = [Camera.from_dict(c) for c in manifest["cameras"]]
    frames = np.stack([np.stack([_read_image(root / f) for f in row]) for row in manifest["frames"]])
    if frames.shape[1] != manifest["n_frames"]:
        raise ValueError("frame count does not match manifest")
    if [frames.shape[3], frames.shape[2]] != list(manifest["resolution"]):
        raise ValueError("frame resolution does not match manifest")
    pts_file = root / manifest.get("points", "points.ply")
    points = read_ply(pts_file) if pts_file.exists() else np.zeros((0, 3))
    return ToyScene(cams, frames, np.array(manifest["timestamps"]), manifest.get("name", root.name),
                    points, manifest.get("seed", 0))
