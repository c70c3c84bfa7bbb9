"""Resolved run configuration shared by every CLI command.

A run is described by one JSON document with a top-level ``seed`` and the
sections ``data``, ``model``, ``optimizer`` and ``metrics``.  Missing keys
fall back to the defaults below; unknown keys are rejected.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .data import SyntheticSpec
from .dct import GfmConfig
from .optimizer import OptimizerConfig
from .perturb import BlurKernel
from .tensor import PathLike

# fixed offsets so each component draws from its own stream of the one seed
DATA_SEED_OFFSET = 0
TRAIN_SEED_OFFSET = 1
OPTIMIZER_SEED_OFFSET = 2


@dataclass(frozen=True)
class ModelSettings:
    kind: str = "template"
    temperature: float = 8.0
    motion_weight: float = 0.1
    epochs: int = 30
    lr: float = 0.2
    channels: int = 8

    def __post_init__(self):
        if self.kind not in ("template", "tinyconv"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")


@dataclass(frozen=True)
class MetricSettings:
    tau: float = 0.5
    reference: str = "predicted"
    deletion_steps: int = 16
    deletion_fill: str = "zero"

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")
        if self.reference not in ("predicted", "ground-truth"):
            raise ValueError(f"unknown accuracy reference {self.reference!r}")
        if self.deletion_fill not in ("zero", "blur"):
            raise ValueError(f"unknown deletion fill {self.deletion_fill!r}")


def _optimizer_from_dict(d: dict, seed: int) -> OptimizerConfig:
    d = dict(d)
    gfm = d.pop("gfm", None)
    kwargs = {
        "epsilon": d.pop("epsilon", OptimizerConfig.epsilon),
        "iterations": d.pop("iterations", OptimizerConfig.iterations),
        "lam": d.pop("lambda", OptimizerConfig.lam),
        "area_a": d.pop("area_a", OptimizerConfig.area_a),
        "blur": BlurKernel(d.pop("blur_sigma", 2.0)),
        "mask_init": d.pop("mask_init", OptimizerConfig.mask_init),
        "step": d.pop("step", OptimizerConfig.step),
        "smooth_sigma": d.pop("smooth_sigma", OptimizerConfig.smooth_sigma),
        "mode": d.pop("mode", OptimizerConfig.mode),
        "seed": d.pop("seed", seed + OPTIMIZER_SEED_OFFSET),
    }
    if d:
        raise ValueError(f"unknown optimizer keys: {sorted(d)}")
    if gfm is not None:
        kwargs["gfm"] = GfmConfig(float(gfm["r_l"]), float(gfm["r_h"]))
    return OptimizerConfig(**kwargs)


def _section(cls, d: dict):
    known = {f.name for f in fields(cls)}
    extra = set(d) - known
    if extra:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(extra)}")
    return cls(**d)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    model: ModelSettings = field(default_factory=ModelSettings)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    metrics: MetricSettings = field(default_factory=MetricSettings)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "data": self.data.to_dict(),
            "model": asdict(self.model),
            "optimizer": self.optimizer.to_dict(),
            "metrics": asdict(self.metrics),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        seed = int(d.pop("seed", 0))
        data = dict(d.pop("data", {}))
        data.setdefault("seed", seed + DATA_SEED_OFFSET)
        model = _section(ModelSettings, d.pop("model", {}))
        optimizer = _optimizer_from_dict(d.pop("optimizer", {}), seed)
        metrics = _section(MetricSettings, d.pop("metrics", {}))
        if d:
            raise ValueError(f"unknown config sections: {sorted(d)}")
        return cls(seed, SyntheticSpec.from_dict(data), model, optimizer, metrics)

    @classmethod
    def load(cls, path: PathLike | None) -> "RunConfig":
        if path is None:
            return cls()
        return cls.from_dict(json.loads(Path(path).read_text()))

    @property
    def train_seed(self) -> int:
        return self.seed + TRAIN_SEED_OFFSET

    def with_seed(self, seed: int) -> "RunConfig":
        """Re-derive every component seed from a new base seed."""
        return replace(self, seed=seed,
                       data=replace(self.data, seed=seed + DATA_SEED_OFFSET),
                       optimizer=replace(self.optimizer, seed=seed + OPTIMIZER_SEED_OFFSET))
