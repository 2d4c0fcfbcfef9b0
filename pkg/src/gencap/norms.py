"""Margins and margin-normalized norm measures of dense ReLU networks.

Constant factors that depend only on depth or width (``4^d``, ``2^d``,
``h_i``) are dropped, so values are comparable across runs of one
architecture but are not the capacity bounds themselves.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .data import ceil_count
from .network import Network, forward_batch

MEASURE_KEYS = ("l2_product", "l1_path", "l2_path_sq", "spectral_product", "l1inf_product")


@dataclass(frozen=True)
class MarginSpec:
    epsilon: float = 0.05

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError(f"epsilon must lie in (0, 1), got {self.epsilon}")


def margin_single(logits, label: int) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape[-1] < 2:
        raise ValueError("a margin needs at least two classes")
    others = np.delete(logits, label)
    return float(logits[label] - others.max())


def margins(net: Network, X, y) -> np.ndarray:
    """Per-sample margins, vectorized."""
    logits = forward_batch(net, X)
    if logits.shape[1] < 2:
        raise ValueError("a margin needs at least two classes")
    y = np.asarray(y, dtype=np.int64)
    rows = np.arange(len(y))
    correct = logits[rows, y].copy()
    logits[rows, y] = -np.inf
    return correct - logits.max(axis=1)


def margin_percentile(net: Network, data, spec: MarginSpec = MarginSpec()) -> float:
    """The ``ceil(eps * m)``-th smallest training margin (1-based)."""
    ms = margins(net, data.inputs, data.labels)
    if len(ms) == 0:
        raise ValueError("empty dataset")
    k = max(1, ceil_count(spec.epsilon, len(ms)))
    return float(np.partition(ms, k - 1)[k - 1])


def l2_norm_product(net: Network) -> float:
    return math.prod(float(np.sum(w * w)) for w in net.layers)


def _chain(net: Network, transform) -> float:
    v = np.ones(net.dims[0])
    for w in net.layers:
        v = transform(w) @ v
    return float(v.sum())


def l1_path_norm(net: Network) -> float:
    """Sum over input-output paths of the absolute weight product."""
    return _chain(net, np.abs)


def l2_path_norm_sq(net: Network) -> float:
    """Sum over input-output paths of the squared weight product."""
    return _chain(net, np.square)


class SpectralNorm(NamedTuple):
    value: float
    converged: bool
    iterations: int


def spectral_norm(a, max_iters: int = 1000, tol: float = 1e-10, seed: int = 0) -> SpectralNorm:
    """Largest singular value by power iteration on ``A^T A``."""
    a = np.asarray(a, dtype=np.float64)
    if a.size == 0:
        raise ValueError("empty matrix")
    if not np.any(a):
        return SpectralNorm(0.0, True, 0)
    v = np.random.default_rng(seed).normal(size=a.shape[1])
    v /= np.linalg.norm(v)
    est = 0.0
    for it in range(1, max_iters + 1):
        u = a @ v
        w = a.T @ u
        # Rayleigh quotient of A^T A at unit v
        new = math.sqrt(max(float(u @ u), 0.0))
        nw = np.linalg.norm(w)
        if nw == 0.0:
            # start vector in the null space; restart from a fresh direction
            v = np.random.default_rng([seed, it]).normal(size=a.shape[1])
            v /= np.linalg.norm(v)
            continue
        v = w / nw
        if abs(new - est) <= tol * new:
            return SpectralNorm(new, True, it)
        est = new
    return SpectralNorm(max(est, math.sqrt(float(np.linalg.norm(a @ v) ** 2))), False, max_iters)


def spectral_product(net: Network, max_iters: int = 1000, tol: float = 1e-10) -> float:
    return math.prod(spectral_norm(w, max_iters, tol).value ** 2 for w in net.layers)


def l1inf_norm(w: np.ndarray) -> float:
    """Max over units (rows) of the l1 norm of incoming weights."""
    return float(np.abs(w).sum(axis=1).max())


def l1inf_product(net: Network) -> float:
    return math.prod(l1inf_norm(w) ** 2 for w in net.layers)


def raw_measures(net: Network) -> dict[str, float]:
    return {
        "l2_product": l2_norm_product(net),
        "l1_path": l1_path_norm(net),
        "l2_path_sq": l2_path_norm_sq(net),
        "spectral_product": spectral_product(net),
        "l1inf_product": l1inf_product(net),
    }


def normalize(raw: dict[str, float], margin: float) -> dict[str, float] | None:
    """Divide every measure by margin squared; the l1 path norm is squared first."""
    if not margin > 0:
        return None
    out = {}
    for key, value in raw.items():
        out[key] = (value * value if key == "l1_path" else value) / (margin * margin)
    return out


@dataclass
class MeasureReport:
    margin: float
    raw: dict[str, float]
    normalized: dict[str, float] | None
    m: int
    metadata: dict = field(default_factory=dict)

    @property
    def normalization_defined(self) -> bool:
        return self.normalized is not None

    CSV_COLUMNS = (
        ("m", "margin")
        + tuple(f"raw_{k}" for k in MEASURE_KEYS)
        + tuple(f"norm_{k}" for k in MEASURE_KEYS)
    )

    def as_row(self) -> dict:
        row = {"m": self.m, "margin": self.margin}
        for k in MEASURE_KEYS:
            row[f"raw_{k}"] = self.raw[k]
            row[f"norm_{k}"] = self.normalized[k] if self.normalized else float("nan")
        return row

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=self.CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerow({k: _fmt(v) for k, v in self.as_row().items()})
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(
            {
                "margin": self.margin,
                "m": self.m,
                "raw": self.raw,
                "normalized": self.normalized,
                "normalization_defined": self.normalization_defined,
                "metadata": self.metadata,
            },
            indent=2,
            sort_keys=True,
        )


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def capacity_report(net: Network, data, spec: MarginSpec = MarginSpec(), metadata: dict | None = None) -> MeasureReport:
    margin = margin_percentile(net, data, spec)
    raw = raw_measures(net)
    return MeasureReport(margin, raw, normalize(raw, margin), len(data.labels), dict(metadata or {}))
