"""Small numerical kernels shared by every model in the package.

All arrays are float64.  Randomness goes through :class:`numpy.random.Generator`
backed by the Philox4x64-10 counter-based bit generator, so a seed fixes the
draw sequence on every platform numpy supports.
"""
from __future__ import annotations

import zlib
from typing import Callable

import numpy as np

Rng = np.random.Generator


def make_rng(seed: int) -> Rng:
    """Philox-backed generator for a 64-bit unsigned seed."""
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must fit in 64 unsigned bits, got {seed}")
    return np.random.Generator(np.random.Philox(seed))


def derive_rng(seed: int, component: str) -> Rng:
    """Independent stream for a named component under one master seed.

    The stream key is ``(seed, crc32(component))`` fed through a SeedSequence,
    so adding a component never perturbs the others.
    """
    ss = np.random.SeedSequence([seed, zlib.crc32(component.encode("utf-8"))])
    return np.random.Generator(np.random.Philox(ss))


def _as_vector(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"expected a 1-d vector, got shape {v.shape}")
    if v.size == 0:
        raise ValueError("empty vector")
    return v


def softmax(v) -> np.ndarray:
    v = _as_vector(v)
    if not np.all(np.isfinite(v)):
        raise ValueError("softmax input has non-finite entries")
    z = np.exp(v - v.max())
    return z / z.sum()


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax over the last axis (no validation, hot path)."""
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def log_softmax_rows(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=-1, keepdims=True))


def log_sum_exp(v, axis=None):
    """Stable ``log(sum(exp(v)))``; reduces over ``axis`` for arrays."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("log_sum_exp of an empty array")
    if axis is None:
        v = v.ravel()
        m = v.max()
        if not np.isfinite(m):
            return float(m)
        return float(m + np.log(np.exp(v - m).sum()))
    m = v.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = m + np.log(np.exp(v - m).sum(axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64).ravel()
    grad = np.empty_like(x)
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + h
        fp = f(x.copy())
        x[i] = orig - h
        fm = f(x.copy())
        x[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"non-finite function value at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad


def _check_probs(p: np.ndarray, tol: float = 1e-9) -> None:
    if np.any(p < 0):
        raise ValueError("probability vector has negative entries")
    s = p.sum(axis=-1)
    if np.any(np.abs(s - 1.0) > tol):
        raise ValueError(f"probabilities sum to {s}, not 1")


def _invert_cdf(p: np.ndarray, u: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(p, axis=-1)
    idx = (cdf <= u[..., None]).sum(axis=-1)
    # rounding can leave cdf[-1] < u; fall back to the last index with mass
    last = p.shape[-1] - 1 - np.argmax(p[..., ::-1] > 0, axis=-1)
    return np.minimum(idx, last)


def categorical_sample(p, rng: Rng) -> int:
    """Inverse-CDF draw from ``p`` using exactly one uniform from ``rng``."""
    p = _as_vector(p)
    _check_probs(p)
    return int(_invert_cdf(p, np.asarray(rng.random()))[()])


def categorical_sample_rows(p: np.ndarray, rng: Rng) -> np.ndarray:
    """One draw per row of ``p``; consumes ``len(p)`` uniforms in row order.

    Produces the same indices as calling :func:`categorical_sample` row by row
    with the same generator.
    """
    p = np.asarray(p, dtype=np.float64)
    _check_probs(p)
    return _invert_cdf(p, rng.random(p.shape[0]))
