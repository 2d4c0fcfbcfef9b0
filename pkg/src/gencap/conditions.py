"""Non-degeneracy statistics of ReLU networks and the sharpness bound built on them.

``mu`` measures how strongly consecutive layer blocks interact, ``C2`` how many
units sit close to their activation threshold, and ``C3`` how spiky the
incoming-weight norms of a layer are. All three are evaluated per input on the
activation pattern of that input.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .network import ActivationTrace, Network, forward, forward_batch

DEFAULT_DELTAS = np.logspace(-4, 0, 25)

# values observed on a 10-layer, 1000-unit MNIST perceptron
REFERENCE_VALUES = {"mu_min": 0.25, "c2_max": 5.0, "c3_max": 3.0}


def unit_norm(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    norms = np.linalg.norm(X, axis=-1, keepdims=True)
    return np.divide(X, norms, out=np.zeros_like(X), where=norms > 0)


def _frobenius_table(net: Network, trace: ActivationTrace) -> np.ndarray:
    """``F[a, b] = ||D_b W_b ... D_a W_a||_F`` for ``0 <= a <= b <= d`` (NaN below the diagonal)."""
    d = net.depth
    dims = net.dims
    F = np.full((d + 1, d + 1), np.nan)
    for a in range(d + 1):
        prod = trace.x.reshape(-1, 1) if a == 0 else trace.mask(a, dims)[:, None] * net.layers[a - 1]
        F[a, a] = np.linalg.norm(prod)
        for b in range(a + 1, d + 1):
            prod = trace.mask(b, dims)[:, None] * (net.layers[b - 1] @ prod)
            F[a, b] = np.linalg.norm(prod)
    return F


class MuEstimate(NamedTuple):
    mu: float
    triples: int
    excluded: int


def estimate_mu(net: Network, x, trace: ActivationTrace | None = None) -> MuEstimate:
    """Largest ``mu`` satisfying the layer-interaction condition at ``x``.

    Minimum over ``0 <= a < c < b <= d`` of
    ``sqrt(h_c) ||P(a,b)||_F / (||P(c+1,b)||_F ||P(a,c)||_F)``. Triples with a
    zero denominator are skipped and counted; ``mu`` is NaN when all are.
    """
    if trace is None:
        _, trace = forward(net, x)
    d = net.depth
    dims = net.dims
    F = _frobenius_table(net, trace)
    best = math.inf
    total = excluded = 0
    for a in range(d + 1):
        for c in range(a + 1, d + 1):
            for b in range(c + 1, d + 1):
                total += 1
                denom = F[c + 1, b] * F[a, c]
                if denom == 0:
                    excluded += 1
                    continue
                best = min(best, math.sqrt(dims[c]) * F[a, b] / denom)
    return MuEstimate(best if math.isfinite(best) else float("nan"), total, excluded)


class C2Curve(NamedTuple):
    deltas: np.ndarray
    # ratios[k, j]: fraction of units of hidden layer k+1 with |pre-activation| <= deltas[j]
    ratios: np.ndarray
    c2: float


def c2_curve(net: Network, x, deltas=DEFAULT_DELTAS, trace: ActivationTrace | None = None) -> C2Curve:
    deltas = np.asarray(deltas, dtype=np.float64)
    if deltas.size == 0 or deltas.min() <= 0:
        raise ValueError("deltas must be a non-empty grid of positive reals")
    if trace is None:
        _, trace = forward(net, x)
    if not trace.pre:
        return C2Curve(deltas, np.zeros((0, len(deltas))), 0.0)
    ratios = np.array([np.mean(np.abs(z)[:, None] <= deltas[None, :], axis=0) for z in trace.pre])
    return C2Curve(deltas, ratios, float(np.max(ratios / deltas[None, :])))


class C3Estimate(NamedTuple):
    c3: float
    # one entry per layer 1..d, NaN for a fully dead layer
    per_layer: tuple[float, ...]


def estimate_c3(net: Network, trace: ActivationTrace) -> C3Estimate:
    """Max over layers of ``sqrt(h_i) ||W_i||_{2,inf} / ||D_i W_i||_F`` (``D_d = I``)."""
    dims = net.dims
    values = []
    for i, w in enumerate(net.layers, start=1):
        row_norms = np.linalg.norm(w, axis=1)
        active = np.linalg.norm(trace.mask(i, dims) * row_norms)
        values.append(math.sqrt(dims[i]) * row_norms.max() / active if active > 0 else float("nan"))
    finite = [v for v in values if math.isfinite(v)]
    c3 = max(finite) if len(finite) == len(values) else float("nan")
    return C3Estimate(c3, tuple(values))


# -- the bound --------------------------------------------------------------

@dataclass(frozen=True)
class TheoremInputs:
    sigmas: Sequence[float]
    delta: float
    m: int
    dims: Sequence[int]
    frobenius: Sequence[float]
    mu: float
    c2: float
    c3: float
    mean_output_norm: float
    lipschitz: float = 1.0

    def __post_init__(self):
        d = len(self.dims) - 1
        if len(self.sigmas) != d or len(self.frobenius) != d:
            raise ValueError("need one sigma and one Frobenius norm per layer")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if min(self.sigmas) < 0:
            raise ValueError("sigmas must be non-negative")
        for name in ("mu", "c2", "c3", "lipschitz"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if min(self.frobenius) <= 0 or min(self.dims) < 1 or self.mean_output_norm < 0:
            raise ValueError("network statistics must be positive")


class TheoremBound(NamedTuple):
    sharpness_term: float
    kl_term: float
    total: float
    gammas: tuple[float, ...]
    c_delta: float


def theorem1_bound(inp: TheoremInputs) -> TheoremBound:
    """Expected-sharpness plus norm bound, up to the suppressed O(.) constant (taken as 1).

    A zero sigma makes the norm term infinite; the result then carries ``inf``.
    """
    dims = list(inp.dims)
    d = len(dims) - 1
    h = max(dims[1:])
    c_delta = 2.0 * math.sqrt(math.log(d * h / inp.delta))
    gammas = tuple(
        s * math.sqrt(dims[i + 1]) * math.sqrt(dims[i]) / (inp.mu ** 2 * f)
        for i, (s, f) in enumerate(zip(inp.sigmas, inp.frobenius))
    )
    linear = math.prod(1 + g for g in gammas) - 1
    spiky = math.prod(1 + g * inp.c2 * inp.c3 for g in gammas)
    flips = math.prod(1 + g * c_delta * inp.c2 for g in gammas) - 1
    sharp = (linear + spiky * flips) * inp.lipschitz * inp.mean_output_norm
    if min(inp.sigmas) == 0:
        kl = math.inf
    else:
        kl = math.sqrt((sum(f * f / (s * s) for f, s in zip(inp.frobenius, inp.sigmas)) + math.log(2 * inp.m / inp.delta)) / inp.m)
    return TheoremBound(sharp, kl, sharp + kl, gammas, c_delta)


# -- Monte-Carlo checks of the supporting inequalities --------------------------

class LemmaCheck(NamedTuple):
    mc: float
    stderr: float
    bound: float
    passed: bool


def gauss_product_check(A, B, sigma: float, replicates: int = 1000, seed: int = 0) -> LemmaCheck:
    """``E ||A nu B||_F <= sigma ||A||_F ||B||_F`` for entrywise ``N(0, sigma^2)`` ``nu``.

    Passes when the MC mean stays within four standard errors of the bound.
    """
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    if replicates < 100:
        raise ValueError("use at least 100 replicates")
    rng = np.random.default_rng(seed)
    nu = sigma * rng.standard_normal((replicates, A.shape[1], B.shape[0]))
    vals = np.linalg.norm(A @ nu @ B, axis=(1, 2))
    mean = float(vals.mean())
    se = float(vals.std(ddof=1) / math.sqrt(replicates))
    bound = sigma * float(np.linalg.norm(A)) * float(np.linalg.norm(B))
    return LemmaCheck(mean, se, bound, mean <= bound + 4 * se)


def _masked_output(layers, masks, x):
    h = x
    for w, mask in zip(layers[:-1], masks):
        h = mask * (w @ h)
    return layers[-1] @ h


def lemma_linear_check(net: Network, x, sigmas: Sequence[float], mu: float, replicates: int = 1000, seed: int = 0) -> LemmaCheck:
    """Perturbation error of the network with activation masks frozen at ``x``.

    Compares ``E ||f_{w+nu}(x) - f_w(x)||`` (masks of the unperturbed net) with
    ``(prod_i (1 + sigma_i sqrt(h_i h_{i-1}) / (mu^2 ||D_i W_i||_F)) - 1) ||f_w(x)||``.
    """
    x = np.asarray(x, dtype=np.float64)
    out, trace = forward(net, x)
    dims = net.dims
    masks = [a.astype(np.float64) for a in trace.active]
    if len(sigmas) != net.depth:
        raise ValueError("need one sigma per layer")
    rhs_factor = 1.0
    for i, (w, s) in enumerate(zip(net.layers, sigmas), start=1):
        dw = np.linalg.norm(trace.mask(i, dims)[:, None] * w)
        if s > 0:
            rhs_factor *= 1 + s * math.sqrt(dims[i] * dims[i - 1]) / (mu ** 2 * dw)
    rhs = (rhs_factor - 1) * float(np.linalg.norm(out))
    vals = np.empty(replicates)
    for r in range(replicates):
        rng = np.random.default_rng([seed, r])
        layers = [w + s * rng.standard_normal(w.shape) for w, s in zip(net.layers, sigmas)]
        vals[r] = np.linalg.norm(_masked_output(layers, masks, x) - out)
    mean = float(vals.mean())
    se = float(vals.std(ddof=1) / math.sqrt(replicates)) if replicates > 1 else 0.0
    return LemmaCheck(mean, se, rhs, mean <= rhs + 4 * se)


def activation_flips(net: Network, x, sigmas: Sequence[float], replicates: int = 100, seed: int = 0) -> np.ndarray:
    """Mean number of hidden units per layer whose activation flips under perturbation."""
    x = np.asarray(x, dtype=np.float64)
    _, trace = forward(net, x)
    counts = np.zeros(net.depth - 1)
    for r in range(replicates):
        rng = np.random.default_rng([seed, r])
        layers = [w + s * rng.standard_normal(w.shape) for w, s in zip(net.layers, sigmas)]
        _, pert = forward(Network(tuple(layers)), x)
        counts += [np.sum(p != q) for p, q in zip(pert.active, trace.active)]
    return counts / replicates


# -- aggregation ------------------------------------------------------------

def _summary(values: np.ndarray) -> dict:
    values = values[np.isfinite(values)]
    if values.size == 0:
        return {"count": 0, "min": None, "p5": None, "p50": None, "p95": None, "max": None}
    p5, p50, p95 = np.percentile(values, [5, 50, 95])
    return {
        "count": int(values.size),
        "min": float(values.min()),
        "p5": float(p5),
        "p50": float(p50),
        "p95": float(p95),
        "max": float(values.max()),
    }


@dataclass
class ConditionStats:
    mu: float
    c2: float
    c3: float
    mu_per_input: np.ndarray
    c2_per_input: np.ndarray
    c3_per_input: np.ndarray
    deltas: np.ndarray
    # mean over inputs of the per-layer activation-ratio curves, shape (hidden layers, deltas)
    c2_ratios: np.ndarray
    c3_per_layer: np.ndarray
    excluded_triples: int
    total_triples: int
    label: str = ""
    metadata: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.mu_per_input)

    @property
    def finite_fraction(self) -> float:
        ok = np.isfinite(self.mu_per_input) & np.isfinite(self.c2_per_input) & np.isfinite(self.c3_per_input)
        return float(np.mean(ok)) if self.n else 0.0

    def summary(self) -> dict:
        return {
            "label": self.label,
            "inputs": self.n,
            "finite_fraction": self.finite_fraction,
            "mu": self.mu,
            "c2": self.c2,
            "c3": self.c3,
            "mu_distribution": _summary(self.mu_per_input),
            "c2_distribution": _summary(self.c2_per_input),
            "c3_distribution": _summary(self.c3_per_input),
            "excluded_triples": self.excluded_triples,
            "total_triples": self.total_triples,
            "excluded_inputs": int(np.sum(~np.isfinite(self.mu_per_input))),
            "reference": REFERENCE_VALUES,
            "metadata": self.metadata,
        }

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True, default=_json_default)

    def c2_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["layer", "delta", "ratio"])
        for k, row in enumerate(self.c2_ratios, start=1):
            for delta, ratio in zip(self.deltas, row):
                writer.writerow([k, repr(float(delta)), repr(float(ratio))])
        return buf.getvalue()


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def _nan_max(values: np.ndarray) -> float:
    values = values[np.isfinite(values)]
    return float(values.max()) if values.size else float("nan")


def condition_histograms(net: Network, inputs, deltas=DEFAULT_DELTAS, rescale: bool = True, label: str = "") -> ConditionStats:
    """Per-input mu, C2, C3 over a sample, with distribution summaries.

    Inputs are rescaled to unit Euclidean norm first unless ``rescale`` is off.
    """
    X = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    if len(X) == 0:
        raise ValueError("empty input sample")
    if rescale:
        X = unit_norm(X)
    deltas = np.asarray(deltas, dtype=np.float64)
    mus, c2s, c3s, layers3, curves = [], [], [], [], []
    excluded = total = 0
    for x in X:
        _, trace = forward(net, x)
        mu = estimate_mu(net, x, trace)
        curve = c2_curve(net, x, deltas, trace)
        c3 = estimate_c3(net, trace)
        mus.append(mu.mu)
        excluded += mu.excluded
        total += mu.triples
        c2s.append(curve.c2)
        curves.append(curve.ratios)
        c3s.append(c3.c3)
        layers3.append(c3.per_layer)
    mus, c2s, c3s = np.array(mus), np.array(c2s), np.array(c3s)
    finite_mu = mus[np.isfinite(mus)]
    return ConditionStats(
        mu=float(finite_mu.min()) if finite_mu.size else float("nan"),
        c2=_nan_max(c2s),
        c3=_nan_max(c3s),
        mu_per_input=mus,
        c2_per_input=c2s,
        c3_per_input=c3s,
        deltas=deltas,
        c2_ratios=np.mean(curves, axis=0),
        c3_per_layer=np.array(layers3),
        excluded_triples=excluded,
        total_triples=total,
        label=label,
    )


def theorem_inputs_for(
    net: Network,
    inputs,
    stats: ConditionStats,
    sigmas: Sequence[float],
    m: int,
    delta: float = 0.1,
    lipschitz: float = 1.0,
    rescale: bool = True,
) -> TheoremInputs:
    X = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    if rescale:
        X = unit_norm(X)
    outputs = forward_batch(net, X)
    return TheoremInputs(
        sigmas=tuple(float(s) for s in sigmas),
        delta=delta,
        m=m,
        dims=tuple(net.dims),
        frobenius=tuple(float(np.linalg.norm(w)) for w in net.layers),
        mu=stats.mu,
        c2=stats.c2,
        c3=stats.c3,
        mean_output_norm=float(np.mean(np.linalg.norm(outputs, axis=1))),
        lipschitz=lipschitz,
    )
