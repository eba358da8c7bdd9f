"""Hyperparameters and their JSON form.

Every default below is a local choice; none of them come from published
training settings.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .masks import GridSpec


class ConfigError(ValueError):
    pass


def default_grid() -> GridSpec:
    # 128 x 128 cells of 0.8 m, centered on the ego vehicle (+-51.2 m)
    return GridSpec.centered(128, 128, 0.8)


@dataclass(frozen=True)
class DistillConfig:
    alpha_l: float = 8.0
    alpha_w: float = 4.0
    r_max: float = 51.2
    tau: float = 0.1
    tau_v: float = 0.25
    t_s: float = 0.5
    tau_cls: float = 0.1
    k_max: int = 512
    lambda_ra: float = 1.0
    lambda_t: float = 1.0
    lambda_rd: float = 1.0
    rakd_squared: bool = False
    grid: GridSpec = field(default_factory=default_grid)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("alpha_l", "alpha_w", "r_max", "t_s"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ConfigError(f"{name} must be positive and finite, got {v}")
        for name in ("tau", "tau_cls"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1), got {v}")
        if not (math.isfinite(self.tau_v) and self.tau_v >= 0):
            raise ConfigError(f"tau_v must be >= 0, got {self.tau_v}")
        for name in ("lambda_ra", "lambda_t", "lambda_rd"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ConfigError(f"{name} must be >= 0, got {v}")
        if not isinstance(self.k_max, int) or self.k_max < 1:
            raise ConfigError(f"k_max must be a positive integer, got {self.k_max}")
        if not isinstance(self.rakd_squared, bool):
            raise ConfigError("rakd_squared must be a boolean")
        if not isinstance(self.grid, GridSpec):
            raise ConfigError("grid must be a GridSpec")

    def replace(self, **changes) -> "DistillConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["grid"] = dataclasses.asdict(self.grid)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "DistillConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        kwargs = dict(data)
        if "grid" in kwargs:
            g = kwargs["grid"]
            grid_keys = {f.name for f in dataclasses.fields(GridSpec)}
            if not isinstance(g, dict) or set(g) != grid_keys:
                raise ConfigError(f"grid must be an object with keys {sorted(grid_keys)}")
            try:
                kwargs["grid"] = GridSpec(int(g["height"]), int(g["width"]), float(g["x0"]),
                                          float(g["y0"]), float(g["cell_size"]))
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid grid: {exc}") from exc
        for name in ("k_max",):
            if name in kwargs and (isinstance(kwargs[name], bool) or not isinstance(kwargs[name], int)):
                raise ConfigError(f"{name} must be an integer")
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def load_config(path: str | Path | None) -> DistillConfig:
    if path is None:
        return DistillConfig()
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return DistillConfig.from_dict(data)


def save_config(cfg: DistillConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
