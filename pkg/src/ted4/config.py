from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib


@dataclass
class ModelConfig:
    feat_dim: int = 32
    tfeat_dim: int = 16
    bank_dim: int = 16
    n_offsets: int = 5
    n_frames: int = 20
    voxel_size: float = 0.3
    pe_bands: int = 8
    hyper_hidden: int = 64
    n_chunks: int = 4
    ar_hidden: int = 64
    deform_hidden: int = 64
    decoder_hidden: int = 64
    prior: str = "hyperprior"  # or "factorized"
    temporal_activation: bool = True
    bbox_min: tuple = (0.0, 0.0, 0.0)
    bbox_max: tuple = (1.0, 1.0, 1.0)
    lambda_rate: float = 0.002

    def __post_init__(self):
        if self.n_frames < 2 or self.n_frames % 2:
            raise ValueError(f"n_frames must be even and >= 2, got {self.n_frames}")
        if self.feat_dim % self.n_chunks:
            raise ValueError("feat_dim must be divisible by n_chunks")
        if self.prior not in ("hyperprior", "factorized"):
            raise ValueError(f"unknown prior {self.prior!r}")
        self.bbox_min = tuple(float(v) for v in self.bbox_min)
        self.bbox_max = tuple(float(v) for v in self.bbox_max)

    @property
    def bank_rows(self):
        return self.n_frames // 2


@dataclass
class LossWeights:
    lambda_rate: float = 0.002
    lambda_offset_mask: float = 1.0
    lambda_temp_mask: float = 0.01
    lambda_vol: float = 1e-4
    lambda_tv: float = 1e-3

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be non-negative")


@dataclass
class TrainConfig:
    iterations: int = 3000
    static_fraction: float = 0.4
    seed: int = 0
    lr_position: float = 1e-4
    lr_feature: float = 5e-3
    lr_net: float = 2e-3
    lr_bank: float = 2e-3
    lr_activation: float = 1e-3
    prune_every: int = 500
    prune_threshold: float = 0.005
    prune_samples: int = 8
    visibility_threshold: float = 2.0  # summed splat weight; a fully shrunk splat still deposits ~1.9 alpha
    occlusion_aware_visibility: bool = True
    lambda_sweep: list = field(default_factory=lambda: [0.001, 0.002, 0.004, 0.008])
    weights: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if not 0.0 < self.static_fraction < 1.0:
            raise ValueError("static_fraction must lie in (0, 1)")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)

    @property
    def static_iterations(self):
        return int(round(self.iterations * self.static_fraction))

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


def load_train_config(path):
    """Read a TrainConfig from a ``.json`` or ``.toml`` file."""
    path = Path(path)
    if path.suffix == ".toml":
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    else:
        data = json.loads(path.read_text())
    return TrainConfig.from_dict(data)
