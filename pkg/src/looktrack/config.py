"""Run configuration, stored as JSON.

Example::

    {
      "model": "loot",
      "epochs": 20,
      "batches_per_epoch": 200,
      "batch_size": 8,
      "optimizer": {"learning_rate": 0.001, "beta1": 0.9, "beta2": 0.999, "epsilon": 1e-08},
      "sim": {"n_stations": 5, "width": 64, "height": 64, "min_tracks": 5, "max_tracks": 15,
              "fake_factor": 2.0, ...},
      "seed": 0
    }

Every key is optional.  Epochs, batch size and the detector default per
model kind; unknown keys are rejected at every nesting level.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .losses import Eq1Params
from .simulator import SimConfig

MODEL_KINDS = ("loot", "seq")


# epochs and batch size when the configuration leaves them out
MODEL_DEFAULTS = {"loot": {"epochs": 20, "batch_size": 8}, "seq": {"epochs": 50, "batch_size": 128}}


def default_sim(model: str) -> SimConfig:
    """Detector used when the configuration names none.

    The grid tracker wants closely spaced planes far from the vertex; the
    recurrent tracker wants planes spread along z so that candidates that
    bend away from a straight line through the vertex stand out.
    """
    if model == "seq":
        return SimConfig(station_z=(100.0, 125.0, 150.0, 175.0, 200.0), cone_half_angle=math.atan(31.5 / 200.0))
    return SimConfig()


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    model: str = "loot"
    epochs: int | None = None
    batches_per_epoch: int = 200
    batch_size: int | None = None
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    sim: SimConfig | None = None
    eq1: Eq1Params = field(default_factory=Eq1Params)
    threshold: float = 0.5
    match_ratio: float = 0.7
    eval_every: int = 1
    n_eval_events: int = 100
    # sequential tracker only
    n_train_events: int = 400
    n_test_events: int = 200
    corridor: tuple = (4.0, 4.0)
    ghosts_per_true: int = 10
    conv_filters: int = 32
    gru_units: tuple = (32, 16)
    out_dir: str = "runs"
    seed: int = 0

    def __post_init__(self):
        if self.model not in MODEL_KINDS:
            raise ValueError(f"model must be one of {MODEL_KINDS}")
        for name, value in MODEL_DEFAULTS[self.model].items():
            if getattr(self, name) is None:
                object.__setattr__(self, name, value)
        for name in ("epochs", "batches_per_epoch", "batch_size", "eval_every", "n_train_events",
                     "n_test_events", "ghosts_per_true"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n_eval_events < 0:
            raise ValueError("n_eval_events must be non-negative")
        if self.sim is None:
            object.__setattr__(self, "sim", default_sim(self.model))
        object.__setattr__(self, "corridor", tuple(float(c) for c in self.corridor))
        object.__setattr__(self, "gru_units", tuple(int(u) for u in self.gru_units))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sim"] = self.sim.to_dict()
        d["corridor"] = list(self.corridor)
        d["gru_units"] = list(self.gru_units)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        data = dict(data)
        if "optimizer" in data:
            opt = data["optimizer"]
            bad = set(opt) - {f.name for f in fields(OptimizerConfig)}
            if bad:
                raise ValueError(f"unknown optimizer keys: {sorted(bad)}")
            data["optimizer"] = OptimizerConfig(**opt)
        if "sim" in data:
            data["sim"] = SimConfig.from_dict(data["sim"])
        if "eq1" in data:
            data["eq1"] = Eq1Params.from_dict(data["eq1"])
        return cls(**data)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))
