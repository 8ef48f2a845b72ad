"""Pipeline configuration: one JSON document mapped onto nested dataclasses."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .hmm import FitConfig
from .infotheory import CiTestConfig
from .trajectory import ExtractionConfig, LaneTransition


@dataclass(frozen=True)
class PipelineConfig:
    #: trajectory CSV and lane-marker points CSV (marker_id,x,y)
    trajectories: str | None = None
    markers: str | None = None
    #: marker_id -> (c2, c1, c0), used instead of fitting marker points
    boundaries: dict = field(default_factory=dict)
    #: lane ids considered valid; None accepts any
    lanes: tuple[int, ...] | None = None
    #: canonical column -> column name in the input file
    schema: dict | None = None
    extraction: ExtractionConfig = ExtractionConfig()
    #: apply the congestion filter during extraction
    filter_density: bool = True
    fit: FitConfig = FitConfig()
    #: inclusive range of state counts searched by model selection
    k_min: int = 2
    k_max: int = 20
    elbow_fraction: float = 0.02
    ci: CiTestConfig = CiTestConfig()
    k: int = 5
    jitter_scale: float = 1e-10
    transform: str = "rank"
    similarity_threshold: float = 0.8
    prune_threshold: float = 98.0
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if not 1 <= self.k_min <= self.k_max:
            raise ConfigError("need 1 <= k_min <= k_max")
        if not 0 < self.prune_threshold <= 100:
            raise ConfigError("prune_threshold must lie in (0, 100]")
        if not 0 <= self.similarity_threshold <= 1:
            raise ConfigError("similarity_threshold must lie in [0, 1]")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.k < 1:
            raise ConfigError("k must be >= 1")

    @property
    def k_range(self) -> range:
        return range(self.k_min, self.k_max + 1)

    def with_seed(self, seed: int) -> "PipelineConfig":
        """Propagate one seed to every stochastic stage."""
        return dataclasses.replace(
            self,
            seed=seed,
            fit=dataclasses.replace(self.fit, seed=seed),
            ci=dataclasses.replace(self.ci, seed=seed),
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hashed_dict(self) -> dict:
        """Fields that affect results; worker count does not."""
        d = self.to_dict()
        d.pop("workers")
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        doc = dict(doc)
        unknown = set(doc) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            if "extraction" in doc:
                ex = dict(doc["extraction"])
                _check_keys(ExtractionConfig, ex, "extraction")
                if "transitions" in ex:
                    ex["transitions"] = tuple(LaneTransition(**t) for t in ex["transitions"])
                if "sentinel_point" in ex:
                    ex["sentinel_point"] = tuple(ex["sentinel_point"])
                doc["extraction"] = ExtractionConfig(**ex)
            if "fit" in doc:
                _check_keys(FitConfig, doc["fit"], "fit")
                doc["fit"] = FitConfig(**doc["fit"])
            if "ci" in doc:
                _check_keys(CiTestConfig, doc["ci"], "ci")
                doc["ci"] = CiTestConfig(**doc["ci"])
            if doc.get("lanes") is not None:
                doc["lanes"] = tuple(int(v) for v in doc["lanes"])
            if "boundaries" in doc:
                doc["boundaries"] = {int(k): tuple(map(float, v)) for k, v in doc["boundaries"].items()}
            return cls(**doc)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(doc)


def _check_keys(cls, doc, name):
    unknown = set(doc) - {f.name for f in dataclasses.fields(cls)}
    if unknown:
        raise ConfigError(f"unknown keys in {name}: {sorted(unknown)}")
