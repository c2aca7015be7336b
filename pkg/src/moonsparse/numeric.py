"""Dense float64 kernels shared by the network, detectors and theory code.

Arrays are plain ``numpy.ndarray`` in float64. Vector functions also accept
a batch (leading axis) and apply row-wise.
"""

from __future__ import annotations

import numpy as np

from .rng import SeededRng


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


def as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def matmul(a, b) -> np.ndarray:
    a, b = as_f64(a), as_f64(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def relu_forward(x) -> np.ndarray:
    x = as_f64(x)
    return np.maximum(x, 0.0)  # propagates NaN so divergence is not masked


def relu_backward(x, upstream) -> np.ndarray:
    """Pass ``upstream`` where ``x > 0``; the derivative at exactly 0 is taken as 0."""
    x, upstream = as_f64(x), as_f64(upstream)
    if x.shape != upstream.shape:
        raise DimensionError(f"shape mismatch {x.shape} vs {upstream.shape}")
    return np.where(x > 0.0, upstream, 0.0)


def logsumexp(z, axis=-1) -> np.ndarray:
    z = as_f64(z)
    m = np.max(z, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(z - m), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def softmax(logits, temperature: float = 1.0) -> np.ndarray:
    z = as_f64(logits) / temperature
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    z = as_f64(logits)
    return z - logsumexp(z, axis=-1)[..., None]


def check_cholesky_factor(chol) -> np.ndarray:
    """Validate a lower-triangular factor; an all-zero factor (point mass) is allowed."""
    chol = as_f64(chol)
    if chol.ndim != 2 or chol.shape[0] != chol.shape[1]:
        raise DimensionError(f"covariance factor must be square, got {chol.shape}")
    if np.any(np.triu(chol, k=1) != 0.0):
        raise ValueError("covariance factor must be lower-triangular")
    diag = np.diag(chol)
    if not (np.all(diag > 0.0) or not np.any(chol)):
        raise ValueError("covariance factor needs a positive diagonal")
    return chol


def gaussian_sample(rng: SeededRng, mean, chol_cov, n: int | None = None) -> np.ndarray:
    """Draw ``mean + chol_cov @ z`` for standard-normal ``z``.

    Returns shape ``(d,)`` when ``n`` is None, else ``(n, d)``.
    """
    mean = as_f64(mean)
    chol = check_cholesky_factor(chol_cov)
    d = mean.shape[0]
    if chol.shape[0] != d:
        raise DimensionError(f"mean has {d} dims but factor is {chol.shape}")
    count = 1 if n is None else int(n)
    z = rng.standard_normal(count * d).reshape(count, d)
    x = mean + z @ chol.T
    return x[0] if n is None else x


def gaussian_log_density(x, mean, chol_cov) -> np.ndarray:
    """Log of N(x; mean, L L^T) for rows of ``x``."""
    from scipy.linalg import solve_triangular

    x = np.atleast_2d(as_f64(x))
    chol = check_cholesky_factor(chol_cov)
    d = chol.shape[0]
    sol = solve_triangular(chol, (x - as_f64(mean)).T, lower=True)
    maha = np.sum(sol * sol, axis=0)
    log_det = 2.0 * np.sum(np.log(np.diag(chol)))
    return -0.5 * (d * np.log(2.0 * np.pi) + log_det + maha)
