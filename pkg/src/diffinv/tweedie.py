"""Tweedie posterior-mean proxies and the likelihood schedules rho(t), eta(t)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import sde as sde_mod
from .errors import ConfigError, DomainError, ShapeError

RHO_CONSTANT = "constant"
RHO_DECREASING = "time-decreasing"
ETA_OFF = "off"
ETA_EXP = "exp-decay"


@dataclass(frozen=True)
class ScheduleConfig:
    """Likelihood weighting.

    ``sigma_model`` is an optional per-observation std of a surrogate's
    prediction error; it is added to the observation noise in variance.
    """

    rho_mode: str = RHO_DECREASING
    eta_mode: str = ETA_OFF
    sigma_eps: float = 0.1
    dt: float = 5e-4
    T: float = 1.0
    sigma_model: object = None

    def __post_init__(self):
        if self.rho_mode not in (RHO_CONSTANT, RHO_DECREASING):
            raise ConfigError(f"unknown rho_mode {self.rho_mode!r}")
        if self.eta_mode not in (ETA_OFF, ETA_EXP):
            raise ConfigError(f"unknown eta_mode {self.eta_mode!r}")
        if not self.sigma_eps > 0:
            raise ConfigError("sigma_eps must be positive")
        if not self.dt > 0:
            raise ConfigError("dt must be positive")

    @property
    def noise_var(self):
        var = self.sigma_eps ** 2
        if self.sigma_model is not None:
            var = var + np.asarray(self.sigma_model, dtype=float) ** 2
        return var


def rho(t, cfg: ScheduleConfig):
    """Likelihood weight; a vector when ``sigma_model`` is per-coordinate."""
    inv = 1.0 / cfg.noise_var
    if cfg.rho_mode == RHO_CONSTANT:
        return inv
    if t < cfg.dt * (1 - 1e-9):
        raise DomainError(f"rho undefined below the first grid time dt={cfg.dt}: t={t}")
    return (cfg.dt / t) * inv


def eta(t, spec: sde_mod.SdeSpec, cfg: ScheduleConfig):
    if cfg.eta_mode == ETA_OFF:
        return 1.0
    if not spec.is_vp:
        raise ConfigError("the exp-decay eta correction only applies to the VP family")
    return float(np.exp(-0.25 * spec.beta_slope * t * t))


def jacobian_scale(spec, t, cfg: ScheduleConfig):
    """``d mu0_bar / d mu_n`` under the frozen-score convention (a multiple of I)."""
    if spec.is_ve:
        return 1.0
    return eta(t, spec, cfg) / float(sde_mod.kernel_params(spec, t).mean_scale)


def posterior_mean(spec, mu_n, t, score_value, cfg: ScheduleConfig):
    mu_n = np.asarray(mu_n, dtype=float)
    score_value = np.asarray(score_value, dtype=float)
    if score_value.shape != mu_n.shape:
        raise ShapeError(f"score shape {score_value.shape} != state shape {mu_n.shape}")
    s = float(sde_mod.kernel_params(spec, t).std)
    return jacobian_scale(spec, t, cfg) * (mu_n + s * s * score_value)
