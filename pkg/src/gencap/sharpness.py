"""Sharpness of trained weights and PAC-Bayes bounds built on Gaussian perturbations.

Perturbations are lists of arrays with the same shapes as the network layers.
Random streams are derived from ``(seed, replicate)`` so any replicate can be
recomputed in isolation and serial/parallel runs agree bit for bit.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .network import Network, backprop, log_softmax, relu

LOSSES = ("cross_entropy", "squared", "zero_one")


# -- losses -----------------------------------------------------------------

def _targets(labels: np.ndarray, n_out: int) -> np.ndarray:
    """Regression targets for the squared loss: the label itself for a single
    output, one-hot codes otherwise."""
    if n_out == 1:
        return labels.astype(np.float64).reshape(-1, 1)
    return np.eye(n_out)[labels]


def batch_loss(logits: np.ndarray, labels: np.ndarray, loss: str = "cross_entropy") -> float:
    if loss == "cross_entropy":
        return float(-np.mean(log_softmax(logits)[np.arange(len(labels)), labels]))
    if loss == "squared":
        diff = logits - _targets(labels, logits.shape[1])
        return float(np.mean(np.sum(diff * diff, axis=1)))
    if loss == "zero_one":
        return float(np.mean(np.argmax(logits, axis=1) != labels))
    raise ValueError(f"unknown loss {loss!r}; choose from {LOSSES}")


def _dlogits(labels: np.ndarray, loss: str):
    n = len(labels)
    if loss == "cross_entropy":
        def grad(logits):
            p = np.exp(log_softmax(logits))
            p[np.arange(n), labels] -= 1.0
            return p / n
    elif loss == "squared":
        def grad(logits):
            return 2.0 * (logits - _targets(labels, logits.shape[1])) / n
    else:
        raise ValueError(f"loss {loss!r} has no useful gradient")
    return grad


def _logits(layers: Sequence[np.ndarray], X: np.ndarray) -> np.ndarray:
    h = X
    for w in layers[:-1]:
        h = relu(h @ w.T)
    return h @ layers[-1].T


def empirical_loss(layers: Sequence[np.ndarray], X, y, loss: str = "cross_entropy") -> float:
    return batch_loss(_logits(layers, np.asarray(X, dtype=np.float64)), np.asarray(y), loss)


def _perturbed(net: Network, nu: Sequence[np.ndarray]) -> list[np.ndarray]:
    return [w + n for w, n in zip(net.layers, nu)]


# -- worst-case sharpness -----------------------------------------------------

@dataclass(frozen=True)
class AscentConfig:
    alpha: float = 5e-4
    steps: int = 2000
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64
    seed: int = 0
    # initial perturbation, as a fraction of each coordinate's box radius
    start_fraction: float = 0.01

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def box_radii(net: Network, alpha: float) -> list[np.ndarray]:
    """Per-coordinate bounds ``alpha * (|w| + 1)``."""
    return [alpha * (np.abs(w) + 1.0) for w in net.layers]


def ascend_perturbation(net: Network, data, cfg: AscentConfig = AscentConfig(), loss: str = "cross_entropy") -> list[np.ndarray]:
    """Projected stochastic gradient ascent on the training loss over the box.

    Starts from a small seeded point inside the box (the gradient vanishes at an
    exact minimum) and clips every coordinate back into the box after each step.
    """
    radii = box_radii(net, cfg.alpha)
    if cfg.steps == 0 or cfg.alpha == 0:
        return [np.zeros_like(w) for w in net.layers]
    X = np.asarray(data.inputs, dtype=np.float64)
    y = np.asarray(data.labels, dtype=np.int64)
    m = len(y)
    rng = np.random.default_rng(cfg.seed)
    nu = [cfg.start_fraction * r * rng.uniform(-1.0, 1.0, size=r.shape) for r in radii]
    vel = [np.zeros_like(r) for r in radii]
    order = rng.permutation(m)
    pos = 0
    for _ in range(cfg.steps):
        if pos >= m:
            order = rng.permutation(m)
            pos = 0
        idx = order[pos:pos + cfg.batch_size]
        pos += cfg.batch_size
        grads = backprop(_perturbed(net, nu), X[idx], _dlogits(y[idx], loss))
        for n, v, g, r in zip(nu, vel, grads, radii):
            v *= cfg.momentum
            v += g
            n += cfg.lr * v
            np.clip(n, -r, r, out=n)
    return nu


def sharpness_of(net: Network, data, nu: Sequence[np.ndarray], loss: str = "cross_entropy") -> float:
    """Full-dataset loss increase caused by ``nu``."""
    base = empirical_loss(net.layers, data.inputs, data.labels, loss)
    return empirical_loss(_perturbed(net, nu), data.inputs, data.labels, loss) - base


def max_sharpness(net: Network, data, cfg: AscentConfig = AscentConfig(), loss: str = "cross_entropy") -> float:
    """Loss increase at the ascent's final perturbation; the denominator ``1 + L`` is dropped.

    Divide by ``1 + empirical_loss(...)`` to recover the un-simplified ratio.
    """
    nu = ascend_perturbation(net, data, cfg, loss)
    return max(0.0, sharpness_of(net, data, nu, loss))


# -- Gaussian perturbations ------------------------------------------------

@dataclass(frozen=True)
class PerturbationSpec:
    """Per-parameter Gaussian standard deviations.

    ``spherical``: every sigma equals ``sigma``.
    ``magnitude``: ``sigma_i = alpha * (a * |w_i| + b)``.
    """

    rule: str
    sigma: float = 0.0
    alpha: float = 0.0
    a: float = 10.0
    b: float = 1.0

    def __post_init__(self):
        if self.rule not in ("spherical", "magnitude"):
            raise ValueError(f"unknown perturbation rule {self.rule!r}")
        if min(self.sigma, self.alpha, self.a, self.b) < 0:
            raise ValueError("perturbation parameters must be non-negative")

    @classmethod
    def spherical(cls, sigma: float) -> "PerturbationSpec":
        return cls("spherical", sigma=sigma)

    @classmethod
    def magnitude(cls, alpha: float, a: float = 10.0, b: float = 1.0) -> "PerturbationSpec":
        return cls("magnitude", alpha=alpha, a=a, b=b)

    def with_alpha(self, alpha: float) -> "PerturbationSpec":
        return PerturbationSpec.magnitude(alpha, self.a, self.b)

    def sigmas(self, net: Network) -> list[np.ndarray]:
        if self.rule == "spherical":
            return [np.full(w.shape, float(self.sigma)) for w in net.layers]
        return [self.alpha * (self.a * np.abs(w) + self.b) for w in net.layers]


def sample_perturbation(sigmas: Sequence[np.ndarray], rng: np.random.Generator) -> list[np.ndarray]:
    return [s * rng.standard_normal(s.shape) for s in sigmas]


class MonteCarlo(NamedTuple):
    mean: float
    stderr: float


def _mc(values: np.ndarray) -> MonteCarlo:
    n = len(values)
    se = float(np.std(values, ddof=1) / math.sqrt(n)) if n > 1 else float("nan")
    return MonteCarlo(float(np.mean(values)), se)


def expected_sharpness(
    net: Network,
    data,
    spec: PerturbationSpec,
    replicates: int = 1000,
    seed: int = 0,
    batch_size: int = 64,
    loss: str = "cross_entropy",
) -> MonteCarlo:
    """Monte-Carlo estimate of ``E_nu[L(w + nu)] - L(w)``.

    Replicate ``r`` draws its own perturbation and a minibatch (without
    replacement, capped at the dataset size) from the stream ``(seed, r)``; both
    losses in a replicate are measured on that minibatch.
    """
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    X = np.asarray(data.inputs, dtype=np.float64)
    y = np.asarray(data.labels, dtype=np.int64)
    m = len(y)
    sigmas = spec.sigmas(net)
    k = min(batch_size, m)
    diffs = np.empty(replicates)
    for r in range(replicates):
        rng = np.random.default_rng([seed, r])
        idx = rng.choice(m, size=k, replace=False) if k < m else np.arange(m)
        nu = sample_perturbation(sigmas, rng)
        base = batch_loss(_logits(net.layers, X[idx]), y[idx], loss)
        diffs[r] = batch_loss(_logits(_perturbed(net, nu), X[idx]), y[idx], loss) - base
    return _mc(diffs)


def expected_perturbed_loss(net: Network, X, y, spec: PerturbationSpec, replicates: int, seed: int, loss: str = "zero_one") -> MonteCarlo:
    """``E_nu[L_S(w + nu)]`` with every replicate evaluated on all of ``(X, y)``."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    sigmas = spec.sigmas(net)
    vals = np.empty(replicates)
    for r in range(replicates):
        nu = sample_perturbation(sigmas, np.random.default_rng([seed, r]))
        vals[r] = batch_loss(_logits(_perturbed(net, nu), X), y, loss)
    return _mc(vals)


class KL(NamedTuple):
    kl_half: float
    kl_appendix: float


def kl_term(net: Network, spec: PerturbationSpec) -> KL:
    """KL between the posterior ``N(w, diag sigma^2)`` and the prior ``N(0, diag sigma^2)``.

    ``kl_half`` is ``sum w^2 / (2 sigma^2)``. ``kl_appendix`` drops the 1/2,
    written for the magnitude rule as ``alpha^-2 * sum (w / (a|w| + b))^2``.
    """
    w = net.flat()
    if spec.rule == "spherical":
        if spec.sigma <= 0:
            raise ValueError("sigma must be positive for a finite KL")
        sq = float(w @ w) / spec.sigma ** 2
        return KL(sq / 2.0, sq)
    if spec.alpha <= 0 or spec.b <= 0:
        raise ValueError("alpha and b must be positive for a finite KL")
    ratio = w / (spec.a * np.abs(w) + spec.b)
    # two divisions by alpha skip the rounding of alpha**2
    appendix = float(ratio @ ratio) / spec.alpha / spec.alpha
    sig = np.concatenate([s.ravel() for s in spec.sigmas(net)])
    return KL(float(np.sum(w * w / (2.0 * sig * sig))), appendix)


# -- PAC-Bayes bounds -------------------------------------------------------

@dataclass
class PacBayesPoint:
    alpha: float
    expected_sharpness: float
    expected_sharpness_se: float
    kl_half: float
    kl_appendix: float
    perturbed_loss: float
    train_loss: float
    m: int
    delta: float
    K: float
    bound_eq4: float
    bound_eq5: float
    # same total as eq5, written as train loss + expected sharpness + complexity
    bound_eq6: float
    complexity: float

    CSV_COLUMNS = ("alpha", "exp_sharpness", "exp_sharpness_se", "kl_half", "kl_appendix", "bound_eq4", "bound_eq5", "m", "delta")

    def csv_row(self) -> dict:
        return {
            "alpha": self.alpha,
            "exp_sharpness": self.expected_sharpness,
            "exp_sharpness_se": self.expected_sharpness_se,
            "kl_half": self.kl_half,
            "kl_appendix": self.kl_appendix,
            "bound_eq4": self.bound_eq4,
            "bound_eq5": self.bound_eq5,
            "m": self.m,
            "delta": self.delta,
        }


def pac_bayes_bounds(
    perturbed_loss: float,
    train_loss: float,
    kl: float,
    m: int,
    delta: float = 0.1,
    alpha: float = float("nan"),
    stderr: float = float("nan"),
    kl_appendix: float = float("nan"),
) -> PacBayesPoint:
    if m < 2:
        raise ValueError("m must be >= 2")
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    if kl < 0 or perturbed_loss < 0:
        raise ValueError("kl and the perturbed loss must be non-negative")
    log_term = math.log(2.0 * m / delta)
    K = 2.0 * (kl + log_term) / (m - 1)
    eq4 = perturbed_loss + math.sqrt(perturbed_loss * K) + K
    complexity = 4.0 * math.sqrt((kl + log_term) / m)
    sharp = perturbed_loss - train_loss
    return PacBayesPoint(
        alpha=alpha,
        expected_sharpness=sharp,
        expected_sharpness_se=stderr,
        kl_half=kl,
        kl_appendix=kl_appendix,
        perturbed_loss=perturbed_loss,
        train_loss=train_loss,
        m=m,
        delta=delta,
        K=K,
        bound_eq4=eq4,
        bound_eq5=perturbed_loss + complexity,
        bound_eq6=train_loss + sharp + complexity,
        complexity=complexity,
    )


def bicriteria_sweep(
    net: Network,
    data,
    alphas: Sequence[float],
    template: PerturbationSpec = PerturbationSpec.magnitude(1.0),
    replicates: int = 1000,
    seed: int = 0,
    delta: float = 0.1,
    batch_size: int = 64,
    loss: str = "cross_entropy",
) -> list[PacBayesPoint]:
    """Expected sharpness against KL as the perturbation scale ``alpha`` varies.

    Each alpha reuses the same base seed, so points differ only through sigma.
    """
    if len(alphas) == 0 or min(alphas) <= 0:
        raise ValueError("alphas must be a non-empty list of positive reals")
    train = empirical_loss(net.layers, data.inputs, data.labels, loss)
    m = len(data.labels)
    points = []
    for alpha in sorted(alphas):
        spec = template.with_alpha(alpha)
        es = expected_sharpness(net, data, spec, replicates, seed, batch_size, loss)
        kl = kl_term(net, spec)
        points.append(
            pac_bayes_bounds(
                max(0.0, train + es.mean), train, kl.kl_half, m, delta,
                alpha=alpha, stderr=es.stderr, kl_appendix=kl.kl_appendix,
            )
        )
        # the sharpness entry keeps the raw (possibly negative) MC mean
        points[-1].expected_sharpness = es.mean
    return points


def sweep_to_csv(points: Sequence[PacBayesPoint]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=PacBayesPoint.CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for p in points:
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in p.csv_row().items()})
    return buf.getvalue()
