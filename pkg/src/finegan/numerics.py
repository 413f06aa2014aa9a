"""Dense float64 kernels used across the package.

Tensors are plain ``numpy.ndarray`` objects of dtype float64; the helpers here
add the shape checks and finiteness guarantees the rest of the code relies on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateVectorError,
    DimensionError,
    InsufficientSamplesError,
    NotPSDError,
    NumericError,
    PreconditionError,
)

EPS_NORM = 1e-12
SYM_TOL = 1e-9
PSD_FAIL = 1e-6


def make_rng(seed) -> np.random.Generator:
    """Seeded PCG64 generator; the same seed gives the same stream everywhere."""
    return np.random.Generator(np.random.PCG64(seed))


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def check_finite(x, name="tensor"):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {name}", component=name)
    return x


def matmul(a, b):
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def softmax(logits, axis=-1):
    """Numerically stable softmax along ``axis`` (max-subtracted)."""
    z = as_tensor(logits)
    if z.size == 0:
        raise DimensionError("softmax of an empty tensor")
    check_finite(z, "logits")
    z = z - z.max(axis=axis, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=axis, keepdims=True)


def l2_normalize(v, axis=-1):
    """Scale ``v`` (or each row of it) to unit L2 norm.

    Raises DegenerateVectorError if any norm is at or below 1e-12.
    """
    v = as_tensor(v)
    norms = np.sqrt(np.sum(v * v, axis=axis, keepdims=True))
    if np.any(norms <= EPS_NORM):
        raise DegenerateVectorError("cannot normalize a (near) zero vector")
    return v / norms


def cosine_sim_matrix(a, b):
    """Pairwise dot products of unit rows: entry (i, j) = <a_i, b_j>."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"row dimensions differ: {a.shape} vs {b.shape}")
    return a @ b.T


def sym_eig(s):
    """Eigen-decomposition of a symmetric matrix, eigenvalues ascending."""
    s = as_tensor(s)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise DimensionError(f"expected a square matrix, got {s.shape}")
    check_finite(s, "matrix")
    if np.max(np.abs(s - s.T), initial=0.0) > SYM_TOL:
        raise PreconditionError("matrix is not symmetric")
    try:
        w, v = np.linalg.eigh(0.5 * (s + s.T))
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"eigendecomposition did not converge: {exc}") from exc
    return w, v


def sqrtm_psd(s):
    """Symmetric PSD square root via eigendecomposition.

    Small negative eigenvalues (rounding noise) are clamped to zero; anything
    below -1e-6 is rejected.
    """
    w, v = sym_eig(s)
    if w.size and w[0] < -PSD_FAIL:
        raise NotPSDError(f"matrix has eigenvalue {w[0]:.3e} < -{PSD_FAIL}")
    w = np.clip(w, 0.0, None)
    r = (v * np.sqrt(w)) @ v.T
    return 0.5 * (r + r.T)


@dataclass(frozen=True)
class GaussianStats:
    mu: np.ndarray
    sigma: np.ndarray

    @property
    def dim(self):
        return self.mu.shape[0]


def fit_gaussian(x) -> GaussianStats:
    """Column means and unbiased (n-1) covariance of the rows of ``x``."""
    x = as_tensor(x)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    if n < 2:
        raise InsufficientSamplesError(f"need at least 2 samples, got {n}")
    check_finite(x, "samples")
    mu = x.mean(axis=0)
    xc = x - mu
    sigma = xc.T @ xc / (n - 1)
    return GaussianStats(mu, 0.5 * (sigma + sigma.T))
