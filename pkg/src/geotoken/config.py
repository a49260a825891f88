"""One versioned document wiring every pipeline stage's tunables.

The file format is JSON with a required `version` and one section per
stage; sections may be partial (missing keys take the stage defaults)
but unknown sections or keys are rejected outright, so a typo cannot
silently fall back to a default.  Artifacts emitted by a run embed the
sha256 hash of the fully resolved document.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import pathlib
from dataclasses import dataclass

from .align import AlignConfig
from .errors import ConfigError, DataFormatError, InvalidInputError
from .rerank import JUDGE_MODES, JudgeConfig, RewardTrainConfig
from .seqmodel import ModelConfig, TrainConfig
from .synthworld import WorldConfig

CONFIG_VERSION = 1

PREDICT_MODES = ("greedy", "beam", "pool")
SELECTORS = ("logprob", "reward", "similarity", "judge", "ideal")


@dataclass(frozen=True)
class PredictConfig:
    """Decoding mode and candidate selection for prediction runs."""

    mode: str = "pool"
    selector: str = "logprob"
    beam_width: int = 8
    pool_size: int = 30
    temperature: float = 0.7
    seed: int = 0
    workers: int = 1
    limit: int | None = None

    def __post_init__(self) -> None:
        if self.mode not in PREDICT_MODES:
            raise ConfigError(f"mode must be one of {PREDICT_MODES}, got {self.mode!r}")
        if self.selector not in SELECTORS:
            raise ConfigError(
                f"selector must be one of {SELECTORS}, got {self.selector!r}")
        if self.beam_width < 1 or self.pool_size < 1 or self.workers < 1:
            raise ConfigError("beam_width, pool_size, and workers must be >= 1")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.limit is not None and self.limit < 1:
            raise ConfigError("limit must be >= 1 when set")


@dataclass(frozen=True)
class SweepConfig:
    """Closest-in-pool grid: pool sizes crossed with temperatures."""

    ks: tuple = (5, 10, 15, 20, 30)
    temperatures: tuple = (0.2, 0.5, 0.7, 1.2)
    seed: int = 0
    workers: int = 1
    limit: int | None = 500

    def __post_init__(self) -> None:
        if not self.ks or any(int(k) < 1 for k in self.ks):
            raise ConfigError("ks must be a nonempty list of counts >= 1")
        if list(self.ks) != sorted(set(int(k) for k in self.ks)):
            raise ConfigError("ks must be strictly increasing")
        if not self.temperatures or any(t <= 0 for t in self.temperatures):
            raise ConfigError("temperatures must be positive")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.limit is not None and self.limit < 1:
            raise ConfigError("limit must be >= 1 when set")


_SECTIONS = (
    ("world", WorldConfig),
    ("align", AlignConfig),
    ("model", ModelConfig),
    ("train", TrainConfig),
    ("reward", RewardTrainConfig),
    ("judge", JudgeConfig),
    ("predict", PredictConfig),
    ("sweep", SweepConfig),
)

# per-section fields overridden by the --seed flag
_SEED_FIELDS = {"world": "seed", "align": "seed", "train": "seed",
                "reward": "seed", "predict": "seed", "sweep": "seed"}


def _section_from(name: str, cls, data) -> object:
    if not isinstance(data, dict):
        raise ConfigError(f"section {name!r} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"section {name!r} has unknown keys {unknown}")
    try:
        return cls(**data)
    except (TypeError, ValueError, InvalidInputError) as e:
        raise ConfigError(f"section {name!r}: {e}") from None
    except ConfigError as e:
        raise ConfigError(f"section {name!r}: {e}") from None


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved settings for every stage of a run."""

    world: WorldConfig
    align: AlignConfig
    model: ModelConfig
    train: TrainConfig
    reward: RewardTrainConfig
    judge: JudgeConfig
    predict: PredictConfig
    sweep: SweepConfig

    @classmethod
    def default(cls) -> "RunConfig":
        return cls(**{name: c() for name, c in _SECTIONS})

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("run config must be a JSON object")
        version = data.get("version")
        if version != CONFIG_VERSION:
            raise ConfigError(
                f"config version must be {CONFIG_VERSION}, got {version!r}")
        known = {"version"} | {name for name, _ in _SECTIONS}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config sections {unknown}")
        return cls(**{name: _section_from(name, c, data.get(name, {}))
                      for name, c in _SECTIONS})

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        path = pathlib.Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: not valid JSON ({e})") from None
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        out = {"version": CONFIG_VERSION}
        for name, _ in _SECTIONS:
            out[name] = dataclasses.asdict(getattr(self, name))
        return out

    def to_file(self, path) -> None:
        pathlib.Path(path).write_text(
            json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True,
                          separators=(",", ":")).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()

    def with_seed(self, seed: int) -> "RunConfig":
        """Copy with every stage's seed overridden, for --seed N."""
        updates = {}
        for name, field in _SEED_FIELDS.items():
            section = getattr(self, name)
            updates[name] = dataclasses.replace(section, **{field: seed})
        return dataclasses.replace(self, **updates)
