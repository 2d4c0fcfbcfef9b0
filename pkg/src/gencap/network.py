"""Bias-free dense ReLU networks: forward/backward passes, SGD training, persistence.

A network is an ordered tuple of weight matrices ``W_1..W_d`` where ``W_i`` has
shape ``(h_i, h_{i-1})``; row ``r`` holds the incoming weights of unit ``r``.
The output layer is linear, every other layer is followed by a ReLU.
"""
from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

MAGIC = b"GCAP"
FORMAT_VERSION = 1


class ShapeError(ValueError):
    """Input or weight dimensions do not chain."""


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"non-finite training loss {loss!r} at epoch {epoch}")
        self.epoch = epoch
        self.loss = loss


class ModelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Network:
    layers: tuple[np.ndarray, ...]

    def __post_init__(self):
        layers = tuple(np.array(w, dtype=np.float64) for w in self.layers)
        if not layers:
            raise ShapeError("a network needs at least one layer")
        for i, w in enumerate(layers):
            if w.ndim != 2 or w.size == 0:
                raise ShapeError(f"layer {i + 1} must be a non-empty matrix, got shape {w.shape}")
            if i and w.shape[1] != layers[i - 1].shape[0]:
                raise ShapeError(
                    f"layer {i + 1} expects {w.shape[1]} inputs but layer {i} has {layers[i - 1].shape[0]} units"
                )
            if not np.all(np.isfinite(w)):
                raise ValueError(f"layer {i + 1} has non-finite entries")
            w.setflags(write=False)
        object.__setattr__(self, "layers", layers)

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def dims(self) -> list[int]:
        return [self.layers[0].shape[1]] + [w.shape[0] for w in self.layers]

    @property
    def num_params(self) -> int:
        return sum(w.size for w in self.layers)

    def flat(self) -> np.ndarray:
        return np.concatenate([w.ravel() for w in self.layers])

    def with_layers(self, layers: Sequence[np.ndarray]) -> "Network":
        return Network(tuple(layers))

    def scaled(self, c: float) -> "Network":
        return Network(tuple(c * w for w in self.layers))

    def __eq__(self, other):
        if not isinstance(other, Network) or self.dims != other.dims:
            return NotImplemented if not isinstance(other, Network) else False
        return all(np.array_equal(a, b) for a, b in zip(self.layers, other.layers))

    __hash__ = None


@dataclass(frozen=True)
class ActivationTrace:
    """Activation pattern of one input; ``active[i]`` is the diagonal of ``D_{i+1}``."""

    x: np.ndarray
    pre: tuple[np.ndarray, ...] = field(default=())
    active: tuple[np.ndarray, ...] = field(default=())

    def mask(self, layer: int, dims: Sequence[int]) -> np.ndarray:
        """Diagonal of ``D_layer``; identity for the input and output layers."""
        if 1 <= layer <= len(self.active):
            return self.active[layer - 1].astype(np.float64)
        return np.ones(dims[layer])


def relu(z: np.ndarray) -> np.ndarray:
    return np.where(z > 0, z, 0.0)


def init_network(dims: Sequence[int], seed: int = 0) -> Network:
    """He-style Gaussian init, std ``sqrt(2 / fan_in)`` per layer."""
    if len(dims) < 2 or any(h < 1 for h in dims):
        raise ShapeError(f"invalid dims {list(dims)}")
    rng = np.random.default_rng(seed)
    return Network(
        tuple(rng.normal(0.0, math.sqrt(2.0 / dims[i]), size=(dims[i + 1], dims[i])) for i in range(len(dims) - 1))
    )


def forward(net: Network, x) -> tuple[np.ndarray, ActivationTrace]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (net.dims[0],):
        raise ShapeError(f"input has shape {x.shape}, network expects ({net.dims[0]},)")
    pre, active = [], []
    h = x
    for w in net.layers[:-1]:
        z = w @ h
        on = z > 0
        pre.append(z)
        active.append(on)
        h = np.where(on, z, 0.0)
    logits = net.layers[-1] @ h
    return logits, ActivationTrace(x=x, pre=tuple(pre), active=tuple(active))


def forward_batch(net: Network, X) -> np.ndarray:
    """Logits for a batch of inputs, shape ``(n, h_d)``."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != net.dims[0]:
        raise ShapeError(f"batch has shape {X.shape}, network expects (n, {net.dims[0]})")
    h = X
    for w in net.layers[:-1]:
        h = relu(h @ w.T)
    return h @ net.layers[-1].T


def partial_product(net: Network, trace: ActivationTrace, a: int, b: int) -> np.ndarray:
    """``D_b W_b ... D_a W_a`` under the trace's activation pattern.

    With ``a = 0`` the chain starts from ``x`` as a column vector (``W_0 = x``,
    ``D_0 = I``), so the result has one column. ``D_d`` is the identity.
    """
    d = net.depth
    if a > b:
        raise ValueError(f"empty range: a={a} > b={b}")
    if not 0 <= a <= b <= d:
        raise ValueError(f"layer range [{a}, {b}] outside [0, {d}]")
    dims = net.dims
    if a == 0:
        prod = trace.x.reshape(-1, 1).copy()
    else:
        prod = trace.mask(a, dims)[:, None] * net.layers[a - 1]
    for i in range(max(a, 0) + 1, b + 1):
        prod = trace.mask(i, dims)[:, None] * (net.layers[i - 1] @ prod)
    return prod


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def cross_entropy(logits, label: int) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < logits.shape[-1]:
        raise ValueError(f"label {label} outside [0, {logits.shape[-1]})")
    return float(-log_softmax(logits)[label])


def mean_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(-np.mean(log_softmax(logits)[np.arange(len(labels)), labels]))


def backprop(layers: Sequence[np.ndarray], X: np.ndarray, dlogits_fn) -> list[np.ndarray]:
    """Weight gradients of a batch loss.

    ``dlogits_fn(logits)`` returns the loss gradient w.r.t. the logits, already
    averaged over the batch.
    """
    hs = [X]
    with np.errstate(over="ignore", invalid="ignore"):
        for w in layers[:-1]:
            hs.append(relu(hs[-1] @ w.T))
        delta = dlogits_fn(hs[-1] @ layers[-1].T)
    grads = [None] * len(layers)
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(len(layers) - 1, -1, -1):
            grads[i] = delta.T @ hs[i]
            if i:
                # subgradient 0 at a zero pre-activation
                delta = (delta @ layers[i]) * (hs[i] > 0)
    return grads


def cross_entropy_dlogits(y: np.ndarray):
    def dlogits(logits):
        with np.errstate(over="ignore", invalid="ignore"):
            p = np.exp(log_softmax(logits))
        p[np.arange(len(y)), y] -= 1.0
        return p / len(y)

    return dlogits


def _loss_and_grads(ws: Sequence[np.ndarray], X: np.ndarray, y: np.ndarray) -> tuple[float, list[np.ndarray]]:
    seen = []

    def dlogits(logits):
        with np.errstate(over="ignore", invalid="ignore"):
            logp = log_softmax(logits)
        seen.append(-np.mean(logp[np.arange(len(y)), y]))
        p = np.exp(logp)
        p[np.arange(len(y)), y] -= 1.0
        return p / len(y)

    grads = backprop(ws, X, dlogits)
    return float(seen[0]), grads


def gradient(net: Network, X, y) -> list[np.ndarray]:
    """Mean cross-entropy gradient over the batch, one matrix per layer."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if len(y) == 0:
        raise ValueError("empty batch")
    if X.shape != (len(y), net.dims[0]):
        raise ShapeError(f"batch has shape {X.shape}, expected ({len(y)}, {net.dims[0]})")
    return backprop(net.layers, X, cross_entropy_dlogits(y))


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    lr: float = 0.01
    momentum: float = 0.9
    loss_threshold: float = 1e-4
    max_epochs: int = 2000
    seed: int = 0
    # also stop once every training point is classified correctly
    stop_at_zero_error: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")


@dataclass
class TrainResult:
    network: Network
    epochs: int
    loss: float
    converged: bool


def fit(net: Network, data, cfg: TrainConfig = TrainConfig()) -> TrainResult:
    """Minibatch SGD with heavy-ball momentum until the mean loss drops below threshold.

    ``data`` is any object with ``inputs`` and ``labels`` arrays.
    """
    X = np.asarray(data.inputs, dtype=np.float64)
    y = np.asarray(data.labels, dtype=np.int64)
    m = len(y)
    if m == 0:
        raise ValueError("cannot train on an empty dataset")
    ws = [w.copy() for w in net.layers]
    vs = [np.zeros_like(w) for w in ws]
    loss = _full_loss(ws, X, y)
    epoch = 0
    done = loss < cfg.loss_threshold or (cfg.stop_at_zero_error and _fits(ws, X, y))
    while epoch < cfg.max_epochs and not done:
        order = np.random.default_rng([cfg.seed, epoch]).permutation(m)
        total = 0.0
        for start in range(0, m, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch_loss, grads = _loss_and_grads(ws, X[idx], y[idx])
            total += batch_loss * len(idx)
            for w, v, g in zip(ws, vs, grads):
                v *= cfg.momentum
                v += g
                w -= cfg.lr * v
        epoch += 1
        # the running minibatch mean is stale by up to one epoch; confirm exactly before stopping
        loss = total / m
        if not math.isfinite(loss):
            raise DivergenceError(epoch, loss)
        if loss < cfg.loss_threshold or epoch == cfg.max_epochs:
            loss = _full_loss(ws, X, y)
        done = loss < cfg.loss_threshold or (cfg.stop_at_zero_error and _fits(ws, X, y))
        if done and loss >= cfg.loss_threshold:
            loss = _full_loss(ws, X, y)
        if epoch % 100 == 0:
            log.debug("epoch %d loss %.3e", epoch, loss)
    if not math.isfinite(loss):
        raise DivergenceError(epoch, loss)
    return TrainResult(Network(tuple(ws)), epoch, loss, bool(done))


def sgd_train(net: Network, data, cfg: TrainConfig = TrainConfig()) -> Network:
    return fit(net, data, cfg).network


def _fits(ws: list[np.ndarray], X: np.ndarray, y: np.ndarray) -> bool:
    h = X
    for w in ws[:-1]:
        h = relu(h @ w.T)
    return bool(np.all(np.argmax(h @ ws[-1].T, axis=1) == y))


def _full_loss(ws: list[np.ndarray], X: np.ndarray, y: np.ndarray) -> float:
    h = X
    with np.errstate(over="ignore", invalid="ignore"):
        for w in ws[:-1]:
            h = relu(h @ w.T)
        return mean_cross_entropy(h @ ws[-1].T, y)


def save_network(net: Network, path) -> None:
    dims = net.dims
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, net.depth))
        f.write(struct.pack(f"<{len(dims)}I", *dims))
        for w in net.layers:
            f.write(np.ascontiguousarray(w, dtype="<f8").tobytes())


def load_network(path) -> Network:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ModelFormatError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 12:
        raise ModelFormatError(f"{path}: truncated header")
    version, d = struct.unpack_from("<II", raw, 4)
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"{path}: unsupported version {version}")
    off = 12
    if len(raw) < off + 4 * (d + 1):
        raise ModelFormatError(f"{path}: truncated dims at offset {off}")
    dims = struct.unpack_from(f"<{d + 1}I", raw, off)
    off += 4 * (d + 1)
    layers = []
    for i in range(d):
        n = dims[i + 1] * dims[i]
        if len(raw) < off + 8 * n:
            raise ModelFormatError(f"{path}: truncated layer {i + 1} at offset {off}")
        layers.append(np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(dims[i + 1], dims[i]))
        off += 8 * n
    if off != len(raw):
        raise ModelFormatError(f"{path}: {len(raw) - off} trailing bytes at offset {off}")
    return Network(tuple(layers))
