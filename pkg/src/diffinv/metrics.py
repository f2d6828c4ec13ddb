"""Sample-set distances and posterior summaries."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist, squareform

from .errors import DomainError, ShapeError
from .numerics import empirical_moments, matrix_sqrt_psd

SHRINK = 1e-8


def _fields(S):
    X = np.asarray(getattr(S, "fields", S), dtype=float)
    return X.reshape(X.shape[0], -1) if X.ndim > 1 else X[:, None]


def fid(A, B) -> float:
    """Frechet distance between Gaussian moment matches of two sample sets."""
    XA, XB = _fields(A), _fields(B)
    if XA.shape[1] != XB.shape[1]:
        raise ShapeError("sample sets live on different grids")
    if XA.shape[0] < 2 or XB.shape[0] < 2:
        raise DomainError("FID needs at least two samples per set")
    mA, CA = empirical_moments(XA)
    mB, CB = empirical_moments(XB)
    eye = SHRINK * np.eye(CA.shape[0])
    CA, CB = CA + eye, CB + eye
    # tr (CA CB)^{1/2} = tr (CA^{1/2} CB CA^{1/2})^{1/2}, both factors symmetric
    RA = matrix_sqrt_psd(CA)
    M = RA @ CB @ RA
    cross = np.trace(matrix_sqrt_psd(0.5 * (M + M.T)))
    d2 = float(np.sum((mA - mB) ** 2) + np.trace(CA) + np.trace(CB) - 2.0 * cross)
    return max(d2, 0.0)


def block_iou(a, b, threshold) -> float:
    ma = np.asarray(a, dtype=float) > threshold
    mb = np.asarray(b, dtype=float) > threshold
    if ma.shape != mb.shape:
        raise ShapeError("fields differ in shape")
    union = np.logical_or(ma, mb).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(ma, mb).sum() / union)


@dataclass
class PosteriorSummary:
    mlaps: np.ndarray
    ctm: np.ndarray
    map_point: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    covariance: np.ndarray
    d_neighbor: float
    indices: dict
    misfits: np.ndarray

    def rows(self):
        names = ("mlaps", "ctm", "map_point", "mean", "std")
        return [(n, getattr(self, n)) for n in names]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            dim = self.mean.size
            w.writerow(["summary", "sample_index"] + [f"x{k}" for k in range(dim)])
            for name, vec in self.rows():
                w.writerow([name, self.indices.get(name, "")] + [f"{v:.10e}" for v in vec])


def summarize(samples, fwd, y, d_neighbor=None) -> PosteriorSummary:
    """MLAPS, closest-to-mean and neighbour-count MAP points plus moments.

    ``d_neighbor`` defaults to half the median pairwise distance.
    """
    X = _fields(samples)
    if X.shape[0] == 0:
        raise DomainError("empty sample set")
    y = np.asarray(getattr(y, "y", y), dtype=float)
    misfit = np.sum((y - fwd.apply(X)) ** 2, axis=1)
    i_mlaps = int(np.argmin(misfit))
    mean = X.mean(axis=0)
    i_ctm = int(np.argmin(np.sum((X - mean) ** 2, axis=1)))
    if X.shape[0] > 1:
        D = squareform(pdist(X))
        if d_neighbor is None:
            d_neighbor = 0.5 * float(np.median(pdist(X)))
        if d_neighbor <= 0:
            raise DomainError("d_neighbor must be positive")
        counts = np.sum(D <= d_neighbor, axis=1) - 1
        i_map = int(np.argmax(counts))  # first maximum: lowest index wins ties
        cov = np.cov(X.T, ddof=1).reshape(X.shape[1], X.shape[1])
    else:
        d_neighbor = 1.0 if d_neighbor is None else d_neighbor
        i_map = 0
        cov = np.zeros((X.shape[1], X.shape[1]))
    std = np.sqrt(np.diag(cov))
    return PosteriorSummary(X[i_mlaps], X[i_ctm], X[i_map], mean, std, cov, float(d_neighbor),
                            {"mlaps": i_mlaps, "ctm": i_ctm, "map_point": i_map}, misfit)
