"""Experiment configuration: a flat ``key = value`` text format plus overrides.

Lines are ``key = value``; ``#`` starts a comment; lists are comma separated.
Every key has a default, so an empty file is a valid config. The digest
covers every key that can change a number in the outputs and nothing else,
so two runs with equal digests write identical CSVs.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .network import TrainConfig
from .norms import MarginSpec
from .sharpness import AscentConfig

KINDS = ("true_vs_random", "confusion", "hidden_sweep", "conditions", "pacbayes_sweep", "measure")
DATASETS = ("mnist", "blobs")

# keys that only say where things live
_PATH_KEYS = ("out", "data_dir")
# sweep lists: each row is computed independently of the other entries
SWEEP_KEYS = ("sizes", "confusion_sizes", "hidden_units", "seeds")


class ConfigError(ValueError):
    """Malformed config text or an invalid combination of values."""


def default_alphas() -> tuple[float, ...]:
    return tuple(float(a) for a in np.logspace(-4, -1, 12))


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str = "measure"
    dataset: str = "mnist"
    data_dir: str = "data/mnist"
    out: str = "runs"
    seed: int = 0
    # replicate seeds; each row is keyed by one of these
    seeds: tuple[int, ...] = ()
    test_size: int = 1000
    # training-set size for experiments that do not sweep it
    train_size: int = 2000
    sizes: tuple[int, ...] = (500, 1000, 2000, 4000)
    confusion_sizes: tuple[int, ...] = (0, 500, 1000, 2000)
    hidden_units: tuple[int, ...] = (32, 64, 128, 256, 512)
    # hidden widths of the architecture; input and output sizes come from the data
    hidden: tuple[int, ...] = (128,)
    batch_size: int = 64
    lr: float = 0.01
    momentum: float = 0.9
    loss_threshold: float = 1e-4
    max_epochs: int = 2000
    epsilon: float = 0.05
    ascent_alpha: float = 5e-4
    ascent_steps: int = 2000
    alphas: tuple[float, ...] = field(default_factory=default_alphas)
    replicates: int = 1000
    delta: float = 0.1
    condition_inputs: int = 200
    blob_classes: int = 10
    blob_per_class: int = 300
    blob_dim: int = 20
    blob_spread: float = 0.3

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset must be one of {DATASETS}, got {self.dataset!r}")
        for name in ("sizes", "confusion_sizes", "hidden_units", "alphas"):
            if len(getattr(self, name)) == 0:
                raise ConfigError(f"{name} must be a non-empty list")
        for name in ("sizes", "hidden_units", "hidden"):
            if any(v < 1 for v in getattr(self, name)):
                raise ConfigError(f"{name} entries must be positive")
        if any(v < 0 for v in self.confusion_sizes):
            raise ConfigError("confusion_sizes entries must be non-negative")
        if min(self.alphas) <= 0:
            raise ConfigError("alphas must be positive")
        for name in ("test_size", "train_size", "replicates", "condition_inputs", "blob_classes", "blob_per_class", "blob_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if not 0 < self.delta < 1:
            raise ConfigError("delta must lie in (0, 1)")
        # surface errors in the component configs at load time
        try:
            self.train_config(self.seed)
            self.margin_spec()
            self.ascent_config(self.seed)
        except ValueError as err:
            raise ConfigError(str(err)) from None

    @property
    def replicate_seeds(self) -> tuple[int, ...]:
        return self.seeds or (self.seed,)

    def train_config(self, seed: int, stop_at_zero_error: bool = False) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size,
            lr=self.lr,
            momentum=self.momentum,
            loss_threshold=self.loss_threshold,
            max_epochs=self.max_epochs,
            seed=seed,
            stop_at_zero_error=stop_at_zero_error,
        )

    def margin_spec(self) -> MarginSpec:
        return MarginSpec(self.epsilon)

    def ascent_config(self, seed: int) -> AscentConfig:
        return AscentConfig(alpha=self.ascent_alpha, steps=self.ascent_steps, lr=self.lr, momentum=self.momentum, batch_size=self.batch_size, seed=seed)

    def as_dict(self) -> dict:
        return {f.name: _plain(getattr(self, f.name)) for f in dataclasses.fields(self)}

    def numeric_dict(self) -> dict:
        d = self.as_dict()
        for k in _PATH_KEYS:
            d.pop(k)
        return d

    def digest(self) -> str:
        return _sha(self.numeric_dict())

    def resume_digest(self) -> str:
        """Digest of everything a single row depends on; equal values let a
        directory be extended with more sweep entries."""
        d = self.numeric_dict()
        for k in SWEEP_KEYS:
            d.pop(k)
        return _sha(d)

    def to_text(self) -> str:
        lines = []
        for k, v in self.as_dict().items():
            if isinstance(v, list):
                v = ",".join(repr(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"


def _sha(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _plain(v):
    return list(v) if isinstance(v, tuple) else v


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _convert(key: str, text: str):
    default = _FIELDS[key].default
    if default is dataclasses.MISSING:
        default = _FIELDS[key].default_factory()
    try:
        if isinstance(default, tuple):
            items = [t.strip() for t in text.split(",") if t.strip()]
            kind = float if key == "alphas" else int
            return tuple(kind(t) for t in items)
        if isinstance(default, bool):
            return text.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None
    return text


def parse_assignments(lines, source: str = "<config>") -> dict:
    values = {}
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {line!r}")
        key, _, text = line.partition("=")
        key = key.strip().replace("-", "_")
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = _convert(key, text.strip())
    return values


def load_config(path=None, overrides=(), **fixed) -> ExperimentConfig:
    """Defaults, then the file at ``path``, then ``key=value`` overrides, then ``fixed``."""
    values = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as err:
            raise ConfigError(f"cannot read config {path}: {err.strerror}") from None
        values.update(parse_assignments(text.splitlines(), str(path)))
    values.update(parse_assignments(overrides, "<override>"))
    values.update({k: v for k, v in fixed.items() if v is not None})
    return ExperimentConfig(**values)
