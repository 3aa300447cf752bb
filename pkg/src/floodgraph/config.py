"""Serializable pipeline configuration.

One JSON document drives every command; any run is reproducible from the
config plus its seed.  Dotted --set overrides (e.g. ``schedule.total_epochs=300``)
parse values as JSON when possible and as strings otherwise.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .io import dumps_json, loads_json, sha256_bytes
from .mesh import DensitySpec, ValleyShape
from .model import HyperParams
from .solver import SolverConfig
from .training import EXPERIMENTS, TrainSchedule


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CatalogueSpec:
    n_historical: int = 20
    duration_hours: float = 40.0
    dt: float = 1800.0
    families: int = 4
    peak_min: float = 1000.0
    peak_max: float = 3600.0
    intervals: int = 14
    base_discharge: float = 100.0
    event_hours: float | None = None   # crop events to this horizon (peak kept)


@dataclass(frozen=True)
class PipelineConfig:
    domain: tuple[float, float] = (4600.0, 1500.0)
    density: DensitySpec = field(default_factory=DensitySpec)
    valley: ValleyShape = field(default_factory=ValleyShape)
    catalogue: CatalogueSpec = field(default_factory=CatalogueSpec)
    solver: SolverConfig = field(default_factory=SolverConfig)
    training_factor: int = 8
    experiments: tuple[str, ...] = ("E1", "E2", "E3", "E4", "E5", "E6")
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    hyper: HyperParams = field(default_factory=HyperParams)
    train_fraction: float = 40.0 / 56.0
    grid_spacing: float = 25.0
    thresholds: tuple[float, ...] = (0.05, 0.30)
    out_dir: str = "out"
    seed: int = 0

    def __post_init__(self):
        for name in self.experiments:
            if name not in EXPERIMENTS:
                raise ConfigError(f"unknown experiment {name!r}")
        if self.training_factor not in (2, 4, 8, 16, 32):
            raise ConfigError(f"training factor {self.training_factor} "
                              "must be one of 2, 4, 8, 16, 32")

    def to_dict(self) -> dict:
        return {
            "domain": list(self.domain),
            "density": self.density.to_dict(),
            "valley": self.valley.to_dict(),
            "catalogue": asdict(self.catalogue),
            "solver": asdict(self.solver),
            "training_factor": self.training_factor,
            "experiments": list(self.experiments),
            "schedule": asdict(self.schedule),
            "hyper": self.hyper.to_dict(),
            "train_fraction": self.train_fraction,
            "grid_spacing": self.grid_spacing,
            "thresholds": list(self.thresholds),
            "out_dir": self.out_dir,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = dict(d)
        if "domain" in kw:
            kw["domain"] = tuple(float(v) for v in kw["domain"])
        if "density" in kw:
            kw["density"] = DensitySpec.from_dict(kw["density"])
        if "valley" in kw:
            kw["valley"] = ValleyShape.from_dict(kw["valley"])
        if "catalogue" in kw:
            kw["catalogue"] = CatalogueSpec(**kw["catalogue"])
        if "solver" in kw:
            kw["solver"] = SolverConfig(**kw["solver"])
        if "schedule" in kw:
            kw["schedule"] = TrainSchedule(**kw["schedule"])
        if "hyper" in kw:
            kw["hyper"] = HyperParams.from_dict(kw["hyper"])
        if "experiments" in kw:
            kw["experiments"] = tuple(kw["experiments"])
        if "thresholds" in kw:
            kw["thresholds"] = tuple(float(v) for v in kw["thresholds"])
        return cls(**kw)

    def content_hash(self) -> str:
        """Hash of the pipeline configuration proper; the output location does
        not affect produced artifact bytes and is excluded."""
        doc = self.to_dict()
        doc.pop("out_dir", None)
        return sha256_bytes(dumps_json(doc).encode())


def load_config(path) -> PipelineConfig:
    try:
        doc = loads_json(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        return PipelineConfig.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config {path}: {exc}") from exc


def save_config(config: PipelineConfig, path) -> None:
    Path(path).write_text(dumps_json(config.to_dict()) + "\n")


def apply_overrides(config: PipelineConfig, overrides: list[str]) -> PipelineConfig:
    """Apply ``key=value`` / ``section.key=value`` overrides to a config."""
    doc = config.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = doc
        parts = key.split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigError(f"unknown config section {part!r} in {key!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = value
    try:
        return PipelineConfig.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid override result: {exc}") from exc
