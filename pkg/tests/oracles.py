"""Reference computations written without the package's code paths.

Everything here is deliberately naive: explicit loops over paths, triples and
coordinates, plain Python arithmetic where it matters.
"""
import itertools
import math

import mpmath
import numpy as np


def straight_line_forward(layers, x):
    """Loop-level evaluation of W_d relu(... relu(W_1 x))."""
    h = [float(v) for v in x]
    for depth, w in enumerate(layers):
        out = []
        for row in w:
            s = 0.0
            for wij, hj in zip(row, h):
                s += float(wij) * hj
            out.append(s)
        if depth < len(layers) - 1:
            out = [v if v > 0 else 0.0 for v in out]
        h = out
    return np.array(h)


def enumerate_paths(layers, power):
    """Sum over every input-output path of |prod of weights| ** power."""
    dims = [layers[0].shape[1]] + [w.shape[0] for w in layers]
    total = 0.0
    for path in itertools.product(*(range(h) for h in dims)):
        prod = 1.0
        for i, w in enumerate(layers):
            prod *= w[path[i + 1], path[i]]
        total += abs(prod) ** power
    return total


def jacobi_singular_max(a, sweeps=100):
    """Largest singular value via cyclic two-sided Jacobi rotations on A^T A."""
    a = np.asarray(a, dtype=np.float64)
    m = (a.T @ a).copy()
    n = m.shape[0]
    for _ in range(sweeps):
        off = math.sqrt(sum(m[p, q] ** 2 for p in range(n) for q in range(n) if p != q))
        if off < 1e-15 * max(1.0, np.abs(m).max()):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if m[p, q] == 0.0:
                    continue
                theta = (m[q, q] - m[p, p]) / (2.0 * m[p, q])
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                rot = np.eye(n)
                rot[p, p] = rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                m = rot.T @ m @ rot
    return math.sqrt(max(np.diag(m).max(), 0.0))


def mp_cross_entropy(logits, label, dps=50):
    with mpmath.workdps(dps):
        vals = [mpmath.mpf(float(v)) for v in logits]
        return float(mpmath.log(mpmath.fsum(mpmath.exp(v) for v in vals)) - vals[label])


def finite_difference_grad(layers, X, y, step=1e-5):
    """Central differences of mean cross-entropy w.r.t. every weight."""
    def loss(ls):
        total = 0.0
        for x, label in zip(X, y):
            total += mp_cross_entropy(straight_line_forward(ls, x), int(label), dps=30)
        return total / len(y)

    grads = []
    for li, w in enumerate(layers):
        g = np.zeros_like(w)
        for idx in np.ndindex(w.shape):
            plus = [l.copy() for l in layers]
            minus = [l.copy() for l in layers]
            plus[li][idx] += step
            minus[li][idx] -= step
            g[idx] = (loss(plus) - loss(minus)) / (2 * step)
        grads.append(g)
    return grads


def chain_product(layers, masks, x, a, b):
    """D_b W_b ... D_a W_a by explicit loop; masks[i] is D_i as a full diagonal matrix."""
    if a == 0:
        prod = np.asarray(x, dtype=np.float64).reshape(-1, 1)
    else:
        prod = masks[a] @ layers[a - 1]
    for i in range(a + 1, b + 1):
        prod = masks[i] @ layers[i - 1] @ prod
    return prod


def brute_force_mu(layers, x):
    """Enumerate every triple with full matrices; masks recomputed from scratch."""
    d = len(layers)
    dims = [layers[0].shape[1]] + [w.shape[0] for w in layers]
    masks = {0: np.eye(dims[0]), d: np.eye(dims[d])}
    h = np.asarray(x, dtype=np.float64)
    for i in range(1, d):
        z = layers[i - 1] @ h
        masks[i] = np.diag((z > 0).astype(float))
        h = masks[i] @ z
    best = math.inf
    for a in range(d + 1):
        for c in range(a + 1, d + 1):
            for b in range(c + 1, d + 1):
                num = np.linalg.norm(chain_product(layers, masks, x, a, b))
                den = np.linalg.norm(chain_product(layers, masks, x, c + 1, b)) * np.linalg.norm(
                    chain_product(layers, masks, x, a, c)
                )
                if den > 0:
                    best = min(best, math.sqrt(dims[c]) * num / den)
    return best


def random_layers(rng, dims, scale=1.0):
    return [scale * rng.normal(size=(dims[i + 1], dims[i])) for i in range(len(dims) - 1)]
