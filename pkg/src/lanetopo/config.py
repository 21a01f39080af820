"""Pipeline configuration: model sizes, grid layout, toggles, loss weights."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .bev import GridSpec


class ConfigError(ValueError):
    """Raised for invalid or inconsistent pipeline configuration."""


@dataclass
class LossCoefficients:
    top: float = 5.0
    cls: float = 1.5
    det: float = 0.025
    mask: float = 1.0
    mp: float = 7.0


@dataclass
class PipelineConfig:
    """Everything the pipeline needs besides the scene and the weights.

    Defaults are the full-size model configuration; :meth:`desk` returns a
    small configuration suited to fast tests.
    """

    n_real: int = 150
    n_virtual: int = 150
    k: int = 11
    channels: int = 256
    layers: int = 4
    heads: int = 8
    ffn_dim: int = 512
    sample_points: int = 4

    grid_h: int = 100
    grid_w: int = 200
    resolution: float = 0.5
    x_min: float = -50.0
    y_min: float = -25.0
    z_min: float = -5.0
    z_max: float = 5.0

    n_semantic_types: int = 3
    sd_layers: int = 1
    sd_heads: int = 8
    sd_sample_points: int = 4

    pgm: bool = True
    pmf: bool = True
    sd: bool = False
    hybrid_attention: bool = True
    rvs_self_attention: bool = True

    mask_threshold: float = 0.5
    validity_threshold: float = 0.5
    outlier_threshold: float = 1.5
    det_thresholds: tuple[float, ...] = (1.0, 2.0, 3.0)
    top_match_threshold: float = 1.0
    mask_iou_thresholds: tuple[float, ...] = (0.5, 0.75)

    noise_sigma: float = 0.05
    seed: int = 0
    loss: LossCoefficients = field(default_factory=LossCoefficients)

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossCoefficients(**self.loss)
        self.det_thresholds = tuple(float(t) for t in self.det_thresholds)
        self.mask_iou_thresholds = tuple(float(t) for t in self.mask_iou_thresholds)
        self.validate()

    def validate(self) -> None:
        if self.k < 2:
            raise ConfigError("k must be at least 2")
        if self.n_real < 1 or self.n_virtual < 0:
            raise ConfigError("need at least one real query and n_virtual >= 0")
        if self.layers < 1:
            raise ConfigError("decoder needs at least one layer")
        if self.channels % self.heads != 0:
            raise ConfigError("channels must be divisible by heads")
        if self.channels % 4 != 0:
            raise ConfigError("channels must be divisible by 4 (position encoding)")
        if self.sd and self.channels % self.sd_heads != 0:
            raise ConfigError("channels must be divisible by sd_heads")
        if not (0.0 < self.mask_threshold < 1.0):
            raise ConfigError("mask_threshold must lie in (0, 1)")
        if not (0.0 < self.validity_threshold < 1.0):
            raise ConfigError("validity_threshold must lie in (0, 1)")
        if self.outlier_threshold <= 0:
            raise ConfigError("outlier_threshold must be positive")

    def check_runnable(self) -> None:
        """Cross-toggle checks deferred to pipeline execution."""
        if self.pmf and not self.pgm:
            raise ConfigError("points-mask fusion requires points-guided masks (pmf needs pgm)")

    @property
    def n_queries(self) -> int:
        return self.n_real + self.n_virtual

    @property
    def grid(self) -> GridSpec:
        return GridSpec(
            h=self.grid_h,
            w=self.grid_w,
            x_min=self.x_min,
            y_min=self.y_min,
            resolution=self.resolution,
        )

    @classmethod
    def desk(cls, **overrides) -> PipelineConfig:
        """Small configuration for fast deterministic tests (coarser grid)."""
        base = dict(
            n_real=16,
            n_virtual=16,
            channels=32,
            layers=2,
            heads=2,
            ffn_dim=64,
            sd_heads=2,
            grid_h=50,
            grid_w=100,
            resolution=1.0,
        )
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> PipelineConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> PipelineConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))
