"""Ensemble Kalman inversion with Tikhonov state augmentation."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .errors import ConfigError, DivergenceError, ShapeError
from .numerics import matrix_sqrt_psd
from .sampler import SampleSet

log = logging.getLogger(__name__)


@dataclass
class EnkiConfig:
    prior_mean: np.ndarray
    prior_cov: np.ndarray
    sigma_eps: float
    J: int = 1024
    iterations: int = 100
    alpha: float = 0.0
    sigma_floor: float = 1e-8
    check_ensemble_size: bool = True

    def __post_init__(self):
        self.prior_mean = np.asarray(self.prior_mean, dtype=float).reshape(-1)
        self.prior_cov = np.atleast_2d(np.asarray(self.prior_cov, dtype=float))
        d = self.prior_mean.size
        if self.prior_cov.shape != (d, d):
            raise ShapeError("prior covariance does not match the prior mean")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.J < 2:
            raise ConfigError("ensemble needs at least two members")
        if self.check_ensemble_size and self.J <= d:
            raise ConfigError(f"ensemble size J={self.J} must exceed the parameter dimension {d}")
        if self.alpha < 0:
            raise ConfigError("Tikhonov weight must be non-negative")


@dataclass
class EnkiResult:
    ensemble: SampleSet
    misfit: np.ndarray  # |y - G(mean)| after each iteration (index 0: initial)
    history_mean: np.ndarray

    @property
    def mean(self):
        return self.ensemble.fields.mean(axis=0)

    def write_misfit_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "misfit"])
            for i, m in enumerate(self.misfit):
                w.writerow([i, f"{m:.10e}"])


def enki_run(fwd, y, cfg: EnkiConfig, rng, grid_shape=None) -> EnkiResult:
    """Perturbed-observation EnKI on the augmented system ``(G(mu), sqrt(alpha)(mu - m0)) ~ (y, 0)``."""
    y = np.asarray(getattr(y, "y", y), dtype=float).reshape(-1)
    d = cfg.prior_mean.size
    sigma = max(cfg.sigma_eps, cfg.sigma_floor)
    root = matrix_sqrt_psd(cfg.prior_cov)
    U = cfg.prior_mean + rng.split(0).normal((cfg.J, d)) @ root
    aug = cfg.alpha > 0
    target = np.concatenate([y, np.zeros(d)]) if aug else y
    n_ext = target.size
    noise = rng.split(1)

    def augmented(U):
        G = fwd.apply(U)
        if not np.all(np.isfinite(G)):
            raise DivergenceError("forward model returned non-finite values inside EnKI")
        return np.hstack([G, np.sqrt(cfg.alpha) * (U - cfg.prior_mean)]) if aug else G

    def misfit(U):
        return float(np.linalg.norm(y - fwd.apply(U.mean(axis=0))))

    misfits = [misfit(U)]
    means = [U.mean(axis=0)]
    for it in range(cfg.iterations):
        Gx = augmented(U)
        dU = U - U.mean(axis=0)
        dG = Gx - Gx.mean(axis=0)
        C_ug = dU.T @ dG / (cfg.J - 1)
        C_gg = dG.T @ dG / (cfg.J - 1)
        S = C_gg + sigma ** 2 * np.eye(n_ext)
        try:
            cho = sla.cho_factor(S)
        except np.linalg.LinAlgError as exc:
            raise DivergenceError("innovation covariance is singular", iteration=it) from exc
        eps = sigma * noise.split(it).normal((cfg.J, n_ext))
        innov = target + eps - Gx
        U = U + sla.cho_solve(cho, innov.T).T @ C_ug.T
        misfits.append(misfit(U))
        means.append(U.mean(axis=0))
        log.debug("enki iteration %d misfit %.4g", it + 1, misfits[-1])
    ens = SampleSet(U, grid_shape, {"enki": {"J": cfg.J, "iterations": cfg.iterations, "alpha": cfg.alpha,
                                            "sigma_eps": cfg.sigma_eps}})
    return EnkiResult(ens, np.array(misfits), np.array(means))
