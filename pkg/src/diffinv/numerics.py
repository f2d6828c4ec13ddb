"""Dense linear algebra helpers and reproducible random streams."""

from __future__ import annotations

import numpy as np

from .errors import DomainError, NotPSDError, SymmetryError

SYM_TOL = 1e-12
PSD_CLAMP = 1e-10


def check_symmetric(S, tol=SYM_TOL):
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise SymmetryError(f"expected a square matrix, got shape {S.shape}")
    scale = max(np.max(np.abs(S)), 1e-300)
    err = np.max(np.abs(S - S.T)) if S.size else 0.0
    if err > tol * scale:
        raise SymmetryError(f"matrix not symmetric: max|S-S^T| = {err:.3e}")
    return S


def sym_eig(S):
    """Eigen-decomposition of a symmetric matrix, eigenvalues descending.

    Returns ``(lam, V)`` with ``S = V diag(lam) V^T`` and orthonormal ``V``.
    """
    S = check_symmetric(S)
    lam, V = np.linalg.eigh(0.5 * (S + S.T))
    order = np.argsort(lam)[::-1]
    return lam[order], V[:, order]


def matrix_sqrt_psd(S):
    """Symmetric PSD square root; tiny negative eigenvalues are clamped to 0."""
    lam, V = sym_eig(S)
    if lam.size == 0:
        return np.zeros_like(np.asarray(S, dtype=float))
    lam_max = max(lam[0], 0.0)
    if lam[-1] < -PSD_CLAMP * lam_max:
        raise NotPSDError(f"eigenvalue {lam[-1]:.3e} below clamp threshold")
    root = np.sqrt(np.clip(lam, 0.0, None))
    R = (V * root) @ V.T
    return 0.5 * (R + R.T)


class RngStream:
    """Numpy PCG64 generator keyed by ``(seed, stream)``.

    Streams with different ids are derived through ``SeedSequence`` spawn
    keys, so they are statistically independent and never share state.
    """

    def __init__(self, seed: int, stream: int = 0, _key: tuple | None = None):
        self.seed = int(seed)
        self.stream = int(stream)
        self.key = tuple(_key) if _key is not None else (self.stream,)
        ss = np.random.SeedSequence(self.seed & (2**64 - 1), spawn_key=self.key)
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def split(self, stream: int) -> "RngStream":
        """A child stream; keys compose hierarchically (parent key + id)."""
        return RngStream(self.seed, stream, _key=self.key + (int(stream),))

    def normal(self, size):
        return self.generator.standard_normal(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream={self.stream})"


def gaussian_draw(rng: RngStream, n: int) -> np.ndarray:
    """``n`` i.i.d. standard normal draws from ``rng``."""
    if n < 1:
        raise DomainError(f"n must be >= 1, got {n}")
    return rng.normal(int(n))


def empirical_moments(X):
    """Mean and unbiased covariance of the rows of ``X``."""
    X = np.asarray(X, dtype=float)
    if X.shape[0] < 2:
        raise DomainError("need at least two samples for a covariance")
    m = X.mean(axis=0)
    D = X - m
    C = D.T @ D / (X.shape[0] - 1)
    return m, 0.5 * (C + C.T)
