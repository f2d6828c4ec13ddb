"""Noising SDE families, Euler-Maruyama steps and closed-form kernels.

Three families are supported:

``ve_general``
    zero drift, ``g(t) = sqrt(d sigma^2 / dt)`` for a user supplied
    increasing ``sigma(t)``.
``ve_geometric``
    the SMLD choice ``g(t) = sigma_hat ** t``.
``vp_linear``
    the DDPM choice ``f = -beta(t) mu / 2``, ``g = sqrt(beta(t))`` with
    ``beta(t) = beta_slope * t``.

All step functions broadcast over leading batch dimensions; the last axis
is the field dimension.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, DomainError, ShapeError

VE_GENERAL = "ve_general"
VE_GEOMETRIC = "ve_geometric"
VP_LINEAR = "vp_linear"

_ALIASES = {
    "ve": VE_GEOMETRIC,
    "smld": VE_GEOMETRIC,
    "ve-geometric": VE_GEOMETRIC,
    VE_GEOMETRIC: VE_GEOMETRIC,
    "ve-general": VE_GENERAL,
    VE_GENERAL: VE_GENERAL,
    "vp": VP_LINEAR,
    "ddpm": VP_LINEAR,
    "vp-linear": VP_LINEAR,
    VP_LINEAR: VP_LINEAR,
}

_T_EPS = 1e-12


@dataclass(frozen=True)
class SdeSpec:
    kind: str = VE_GEOMETRIC
    sigma_hat: float = 25.0
    beta_slope: float = 32.0
    T: float = 1.0
    sigma_fn: Optional[Callable[[np.ndarray], np.ndarray]] = field(default=None, compare=False)

    def __post_init__(self):
        kind = _ALIASES.get(str(self.kind).lower())
        if kind is None:
            raise ConfigError(f"unknown SDE family {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        if self.T <= 0:
            raise ConfigError("terminal time T must be positive")
        if kind == VE_GEOMETRIC and not self.sigma_hat > 1:
            raise ConfigError("VE-geometric requires sigma_hat > 1")
        if kind == VP_LINEAR and not self.beta_slope > 0:
            raise ConfigError("VP-linear requires beta_slope > 0")
        if kind == VE_GENERAL:
            if self.sigma_fn is None:
                raise ConfigError("VE-general requires sigma_fn")
            ts = np.linspace(0.0, self.T, 65)
            if np.any(np.diff(np.asarray(self.sigma_fn(ts), dtype=float)) <= 0):
                raise ConfigError("sigma_fn must be strictly increasing on [0, T]")

    @property
    def is_ve(self) -> bool:
        return self.kind in (VE_GENERAL, VE_GEOMETRIC)

    @property
    def is_vp(self) -> bool:
        return self.kind == VP_LINEAR

    def to_dict(self) -> dict:
        if self.kind == VE_GENERAL:
            raise ConfigError("VE-general specs hold a callable and are not serialisable")
        return {"kind": self.kind, "sigma_hat": self.sigma_hat,
                "beta_slope": self.beta_slope, "T": self.T}

    @classmethod
    def from_dict(cls, d: dict) -> "SdeSpec":
        return cls(kind=d["kind"], sigma_hat=float(d.get("sigma_hat", 25.0)),
                   beta_slope=float(d.get("beta_slope", 32.0)), T=float(d.get("T", 1.0)))


@dataclass(frozen=True)
class TimeGrid:
    n_steps: int
    T: float = 1.0

    def __post_init__(self):
        if int(self.n_steps) < 1:
            raise ConfigError("time grid needs at least one step")

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    def t(self, n):
        return n * self.dt

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.n_steps + 1)


@dataclass(frozen=True)
class KernelParams:
    mean_scale: np.ndarray | float
    std: np.ndarray | float


def _check_t(spec: SdeSpec, t):
    t = np.asarray(t, dtype=float)
    if np.any(t < -_T_EPS) or np.any(t > spec.T * (1 + 1e-12) + _T_EPS):
        raise DomainError(f"time outside [0, {spec.T}]: {t}")
    return np.clip(t, 0.0, spec.T)


def _scalar(x):
    return float(x) if np.ndim(x) == 0 else x


def beta(spec: SdeSpec, t):
    return spec.beta_slope * np.asarray(t, dtype=float)


def sigma_sq_general(spec: SdeSpec, t):
    s = np.asarray(spec.sigma_fn(np.asarray(t, dtype=float)), dtype=float)
    return s * s


def drift(spec: SdeSpec, mu, t):
    t = _check_t(spec, t)
    mu = np.asarray(mu, dtype=float)
    if spec.is_ve:
        return np.zeros_like(mu)
    return -0.5 * beta(spec, t) * mu


def diffusion(spec: SdeSpec, t):
    t = _check_t(spec, t)
    if spec.kind == VE_GEOMETRIC:
        return _scalar(spec.sigma_hat ** t)
    if spec.kind == VP_LINEAR:
        return _scalar(np.sqrt(beta(spec, t)))
    # d sigma^2/dt by central differences, one-sided at the ends
    h = 1e-6 * spec.T
    lo = np.clip(t - h, 0.0, spec.T)
    hi = np.clip(t + h, 0.0, spec.T)
    rate = (sigma_sq_general(spec, hi) - sigma_sq_general(spec, lo)) / (hi - lo)
    return _scalar(np.sqrt(np.maximum(rate, 0.0)))


def kernel_params(spec: SdeSpec, t) -> KernelParams:
    """Mean scale ``m(t)`` and std ``s(t)`` of ``p_0t(mu_t | mu_0)``."""
    t = _check_t(spec, t)
    if spec.kind == VE_GEOMETRIC:
        var = (spec.sigma_hat ** (2 * t) - 1.0) / (2.0 * math.log(spec.sigma_hat))
        m = np.ones_like(t)
    elif spec.kind == VE_GENERAL:
        var = sigma_sq_general(spec, t) - sigma_sq_general(spec, 0.0)
        m = np.ones_like(t)
    else:
        m = np.exp(-0.25 * spec.beta_slope * t * t)
        var = -np.expm1(-0.5 * spec.beta_slope * t * t)
    return KernelParams(_scalar(m), _scalar(np.sqrt(np.maximum(var, 0.0))))


def terminal_std(spec: SdeSpec) -> float:
    """Std of the tractable terminal distribution ``p_T``."""
    if spec.is_vp:
        return 1.0
    return float(kernel_params(spec, spec.T).std)


def _noise(shape, rng, z):
    if z is not None:
        z = np.asarray(z, dtype=float)
        if z.shape != tuple(shape):
            raise ShapeError(f"noise shape {z.shape} does not match state {tuple(shape)}")
        return z
    if rng is None:
        raise ValueError("either rng or z must be supplied")
    return rng.normal(shape)


def _check_index(n, grid: TimeGrid):
    if not 1 <= n <= grid.n_steps:
        raise DomainError(f"step index {n} outside 1..{grid.n_steps}")


def vp_beta_step(spec: SdeSpec, n: int, grid: TimeGrid) -> float:
    """Discrete ``beta_n = beta(t_n) * dt``."""
    b = spec.beta_slope * grid.t(n) * grid.dt
    if b >= 1.0:
        raise DomainError(f"beta_{n} = {b:.4f} >= 1; refine the time grid")
    return b


def forward_em_step(spec: SdeSpec, mu_prev, n: int, grid: TimeGrid, rng=None, z=None):
    """One noising step ``mu_{n-1} -> mu_n``."""
    _check_index(n, grid)
    mu_prev = np.asarray(mu_prev, dtype=float)
    z = _noise(mu_prev.shape, rng, z)
    t_prev = grid.t(n - 1)
    if spec.kind == VE_GEOMETRIC:
        inc = float(kernel_params(spec, grid.t(n)).std ** 2 - kernel_params(spec, t_prev).std ** 2)
        return mu_prev + math.sqrt(max(inc, 0.0)) * z
    if spec.kind == VE_GENERAL:
        inc = float(sigma_sq_general(spec, grid.t(n)) - sigma_sq_general(spec, t_prev))
        return mu_prev + math.sqrt(max(inc, 0.0)) * z
    b = vp_beta_step(spec, n - 1, grid)
    return math.sqrt(1.0 - b) * mu_prev + math.sqrt(b) * z


def reverse_em_step(spec: SdeSpec, mu_n, n: int, grid: TimeGrid, score_value, rng=None, z=None):
    """One denoising step ``mu_n -> mu_{n-1}`` driven by ``score_value``."""
    _check_index(n, grid)
    mu_n = np.asarray(mu_n, dtype=float)
    score_value = np.asarray(score_value, dtype=float)
    if score_value.shape != mu_n.shape:
        raise ShapeError(f"score shape {score_value.shape} != state shape {mu_n.shape}")
    z = _noise(mu_n.shape, rng, z)
    t_n = grid.t(n)
    if spec.kind == VE_GEOMETRIC:
        g2 = spec.sigma_hat ** (2 * t_n)
        return mu_n + g2 * grid.dt * score_value + math.sqrt(g2 * grid.dt) * z
    if spec.kind == VE_GENERAL:
        inc = float(sigma_sq_general(spec, t_n) - sigma_sq_general(spec, grid.t(n - 1)))
        inc = max(inc, 0.0)
        return mu_n + inc * score_value + math.sqrt(inc) * z
    b = vp_beta_step(spec, n, grid)
    return mu_n / math.sqrt(1.0 - b) + b * score_value + math.sqrt(b) * z


def perturb(spec: SdeSpec, mu0, t, rng=None, z=None):
    """Draw ``mu_t ~ p_0t(. | mu0)``.

    ``t`` may be a scalar or one time per row of ``mu0``.  Returns
    ``(mu_t, z, sigma_0t)`` so the caller can assemble the DSM target.
    """
    mu0 = np.asarray(mu0, dtype=float)
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr <= 0):
        raise DomainError("perturbation kernel is degenerate at t = 0")
    kp = kernel_params(spec, t_arr)
    m = np.asarray(kp.mean_scale, dtype=float)
    s = np.asarray(kp.std, dtype=float)
    if m.ndim:
        extra = mu0.ndim - m.ndim
        m = m.reshape(m.shape + (1,) * extra)
        s = s.reshape(s.shape + (1,) * extra)
    z = _noise(mu0.shape, rng, z)
    return m * mu0 + s * z, z, _scalar(np.asarray(kp.std))
