"""Dense numeric primitives shared by every other module.

All matrices are float64 numpy arrays. Reductions run in a fixed order so
that two runs with the same inputs produce bit-identical results.

Random streams
--------------
Every consumer of randomness asks :func:`make_rng` for a generator keyed by
``(seed, purpose)``. The generator is a Philox counter-based bit generator
seeded from ``SeedSequence(seed, spawn_key=(PURPOSES[purpose],))``, so the
stream for one purpose never shifts when another purpose draws more or
fewer numbers. An optional integer ``index`` (epoch, sub-run, ...) extends
the spawn key.
"""
import math

import numpy as np

PURPOSES = {
    "data": 1,
    "init": 2,
    "shuffle": 3,
    "eval_pairs": 4,
    "mining": 5,
    "head": 6,
    "augment": 7,
}

DEGENERATE_NORM = 1e-12


class DegenerateEmbeddingError(ValueError):
    pass


def make_rng(seed, purpose, index=None):
    """Return a ``numpy.random.Generator`` for one named purpose."""
    if purpose not in PURPOSES:
        raise KeyError(f"unknown rng purpose {purpose!r}")
    key = (PURPOSES[purpose],) if index is None else (PURPOSES[purpose], int(index))
    ss = np.random.SeedSequence(int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))


def matmul(a, b):
    """Matrix product with a fixed summation order.

    ``out[i, j]`` accumulates ``a[i, k] * b[k, j]`` for ``k = 0, 1, ...``
    starting from 0.0, which is exactly what a naive triple loop does.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects 2-d arrays")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"dimension mismatch: {a.shape} x {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]))
    tmp = np.empty_like(out)
    for k in range(a.shape[1]):
        np.multiply(a[:, k, None], b[None, k, :], out=tmp)
        out += tmp
    return out


def row_l2_normalize(m):
    """Scale rows to unit L2 norm; return ``(normalized, norms)``."""
    m = np.asarray(m, dtype=np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", m, m))
    bad = np.flatnonzero(norms < DEGENERATE_NORM)
    if bad.size:
        raise DegenerateEmbeddingError(f"degenerate embedding in row {int(bad[0])}")
    return m / norms[:, None], norms


def stable_sigmoid(x):
    """Logistic function that neither overflows nor returns NaN.

    Accepts scalars or arrays; scalars come back as Python floats.
    """
    arr = np.asarray(x, dtype=np.float64)
    out = np.empty_like(arr)
    pos = arr >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-arr[pos]))
    ez = np.exp(arr[~pos])
    out[~pos] = ez / (1.0 + ez)
    if out.ndim == 0:
        return float(out)
    return out


def _quantile_index(m, top_fraction):
    pos = m * (1.0 - top_fraction)
    # guard against 10 * (1 - 0.2) landing a hair above 8
    if abs(pos - round(pos)) < 1e-9:
        pos = round(pos)
    idx = math.ceil(pos) - 1
    return min(max(idx, 0), m - 1)


def sorted_quantile_threshold(values, top_fraction):
    """Threshold leaving at most ``top_fraction`` of values strictly above it.

    Returns the ascending-sorted value at index ``ceil(M * (1 - f)) - 1``,
    clamped to ``[0, M - 1]``.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValueError("sorted_quantile_threshold needs at least one value")
    if not 0.0 < top_fraction <= 1.0:
        raise ValueError(f"top_fraction must be in (0, 1], got {top_fraction}")
    idx = _quantile_index(values.size, top_fraction)
    return float(np.partition(values, idx)[idx])


def sorted_quantile_thresholds(values, top_fractions):
    """Vectorised :func:`sorted_quantile_threshold` over several fractions."""
    values = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if values.size == 0:
        raise ValueError("sorted_quantile_threshold needs at least one value")
    out = []
    for f in top_fractions:
        if not 0.0 < f <= 1.0:
            raise ValueError(f"top_fraction must be in (0, 1], got {f}")
        out.append(values[_quantile_index(values.size, f)])
    return np.array(out, dtype=np.float64)
