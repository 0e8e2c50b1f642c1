"""Dense float32 tensor helpers: matmul, Cholesky, Gaussian sampling.

Tensors are plain numpy float32 arrays (row-major). Reductions accumulate
in float64 and round back to float32 so storage stays small without the
usual single-precision drift in long sums.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, FactorizationError
from .rng import Rng


def as_tensor(a, shape=None) -> np.ndarray:
    """Checked tensor constructor: float32, finite, optional shape check."""
    t = np.asarray(a, dtype=np.float32)
    if not np.all(np.isfinite(t)):
        raise ValueError("tensor contains non-finite values")
    if shape is not None and t.shape != tuple(shape):
        raise DimensionError(f"expected shape {tuple(shape)}, got {t.shape}")
    return t


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with float64 accumulation, rounded to float32."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return (a.astype(np.float64) @ b.astype(np.float64)).astype(np.float32)


def default_jitter(sigma: np.ndarray) -> float:
    """Default diagonal jitter: 1e-6 * trace / d."""
    d = sigma.shape[0]
    return float(1e-6 * np.trace(sigma.astype(np.float64)) / d)


def cholesky(sigma: np.ndarray, jitter: float = 0.0, class_index=None) -> np.ndarray:
    """Lower Cholesky factor of sigma + jitter*I.

    Retries with jitter*10 up to 3 times when the matrix is not positive
    definite; `class_index` only labels the error message.
    """
    s = np.asarray(sigma, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise DimensionError(f"cholesky expects a square matrix, got {s.shape}")
    if np.max(np.abs(s - s.T)) > 1e-5:
        raise DimensionError("matrix not symmetric within 1e-5")
    d = s.shape[0]
    eps = float(jitter)
    for attempt in range(4):
        try:
            L = np.linalg.cholesky(s + eps * np.eye(d))
            return L.astype(np.float32)
        except np.linalg.LinAlgError:
            eps = eps * 10.0 if eps > 0.0 else max(default_jitter(s), 1e-12)
    label = "" if class_index is None else f" (class {class_index})"
    raise FactorizationError(
        f"matrix not positive definite after jitter retries{label}", class_index
    )


def sample_gaussian(mu: np.ndarray, chol: np.ndarray, n: int, rng: Rng) -> np.ndarray:
    """n draws from N(mu, L L^T): rows are mu + L eps, eps ~ N(0, I)."""
    mu = np.asarray(mu, dtype=np.float32).reshape(-1)
    chol_ = np.asarray(chol, dtype=np.float32)
    d = mu.shape[0]
    if chol_.shape != (d, d):
        raise DimensionError(f"chol shape {chol_.shape} does not match mu dim {d}")
    if n < 1:
        raise ValueError("n must be >= 1")
    eps = rng.normal((n, d))
    out = mu.astype(np.float64) + eps @ chol_.astype(np.float64).T
    return out.astype(np.float32)


def sample_unit_sphere(dim: int, n: int, rng: Rng) -> np.ndarray:
    """n uniform directions on the unit sphere in R^dim."""
    if dim < 1 or n < 1:
        raise ValueError("dim and n must be >= 1")
    g = rng.normal((n, dim))
    norms = np.linalg.norm(g, axis=1)
    # Zero-norm rows have probability ~0 but are redrawn for safety.
    while np.any(norms == 0.0):
        bad = norms == 0.0
        g[bad] = rng.normal((int(bad.sum()), dim))
        norms = np.linalg.norm(g, axis=1)
    return (g / norms[:, None]).astype(np.float32)
