"""Predictor-corrector samplers: unconditional and likelihood-guided.

Every chain owns a random stream derived from ``(seed, chain index)``, so a
run is reproducible bit for bit and chains never share randomness.  States
are advanced together as a batch for speed; no step couples chains.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import sde as sde_mod
from .container import config_hash, read_container, write_container
from .errors import ConfigError, DivergenceError, ShapeError, ZeroScoreError
from .numerics import RngStream
from .tweedie import ScheduleConfig, jacobian_scale, posterior_mean, rho

log = logging.getLogger(__name__)


@dataclass
class SampleSet:
    fields: np.ndarray
    grid_shape: tuple | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.fields = np.asarray(self.fields, dtype=float)
        if self.fields.ndim == 1:
            self.fields = self.fields[:, None]
        self.fields = self.fields.reshape(self.fields.shape[0], -1)
        if self.grid_shape is not None:
            self.grid_shape = tuple(int(g) for g in self.grid_shape)
            if int(np.prod(self.grid_shape)) != self.fields.shape[1]:
                raise ShapeError(f"fields of size {self.fields.shape[1]} do not fit grid {self.grid_shape}")

    def __len__(self):
        return self.fields.shape[0]

    def images(self):
        if self.grid_shape is None:
            raise ShapeError("sample set has no grid shape")
        return self.fields.reshape((-1,) + self.grid_shape)

    def save(self, path, extra_header=None):
        header = {"kind": "sampleset", "grid_shape": list(self.grid_shape) if self.grid_shape else None,
                  "meta": self.meta}
        if extra_header:
            header.update(extra_header)
        return write_container(path, header, [("fields", self.fields)])

    @classmethod
    def load(cls, path):
        header, arrays = read_container(path)
        if header.get("kind") != "sampleset":
            raise ConfigError(f"{path} does not hold a sample set")
        gs = header.get("grid_shape")
        return cls(arrays["fields"], tuple(gs) if gs else None, header.get("meta", {}))


STEP_CHAIN = "chain"
STEP_ENSEMBLE = "ensemble"


@dataclass(frozen=True)
class SamplerConfig:
    n_samples: int = 64
    n_steps: int = 2000
    K: int = 1
    r: float = 0.1
    schedule: ScheduleConfig | None = None
    seed: int = 0
    field_range: float | None = None
    divergence_factor: float = 10.0
    step_norm: str = STEP_ENSEMBLE

    def __post_init__(self):
        if self.n_samples < 1 or self.n_steps < 1 or self.K < 0:
            raise ConfigError("need n_samples >= 1, n_steps >= 1, K >= 0")
        if not self.r > 0:
            raise ConfigError("signal-to-noise ratio r must be positive")
        if self.step_norm not in (STEP_CHAIN, STEP_ENSEMBLE):
            raise ConfigError(f"unknown step_norm {self.step_norm!r}")

    def to_dict(self):
        d = {k: getattr(self, k) for k in ("n_samples", "n_steps", "K", "r", "seed",
                                          "field_range", "divergence_factor", "step_norm")}
        if self.schedule is not None:
            s = self.schedule
            d["schedule"] = {"rho_mode": s.rho_mode, "eta_mode": s.eta_mode, "sigma_eps": s.sigma_eps,
                             "dt": s.dt, "T": s.T}
        return d


def langevin_eps(r, z, s):
    """Corrector step size ``2 (r |z| / |s|)^2``."""
    ns = float(np.linalg.norm(s))
    if ns == 0.0:
        raise ZeroScoreError("score vanished; corrector step undefined")
    return 2.0 * (r * float(np.linalg.norm(z)) / ns) ** 2


class _Chains:
    """Per-chain noise streams and batched draws."""

    def __init__(self, seed, n, dim):
        root = RngStream(seed)
        self.gens = [root.split(i).generator for i in range(n)]
        self.dim = dim

    def normal(self):
        return np.stack([g.standard_normal(self.dim) for g in self.gens])


def _corrector(x, score_fn, t, r, z, step_norm=STEP_ENSEMBLE):
    """One Langevin move per chain; chains with a vanishing score stay put.

    ``step_norm="chain"`` uses each chain's own ``|z|`` and ``|s|``;
    ``"ensemble"`` uses their averages over all chains, so every chain takes
    the same step.
    """
    s = score_fn(x, t)
    ns = np.linalg.norm(s, axis=1)
    nz = np.linalg.norm(z, axis=1)
    if step_norm == STEP_ENSEMBLE:
        ok = np.isfinite(ns)  # a broken chain must not poison everyone's step
        ns = np.full_like(ns, ns[ok].mean() if ok.any() else np.nan)
        nz = np.full_like(nz, nz.mean())
    zero = ns == 0.0
    if np.any(zero):
        log.warning("zero score on %d chain(s) at t=%.4g; corrector skipped", int(zero.sum()), t)
    eps = np.where(zero, 0.0, 2.0 * (r * nz / np.where(zero, 1.0, ns)) ** 2)
    return x + eps[:, None] * s + np.sqrt(2.0 * eps)[:, None] * z


class _Monitor:
    def __init__(self, spec, cfg: SamplerConfig):
        self.spec, self.cfg = spec, cfg
        self.max_abs = 0.0

    def check(self, x, n, t):
        bad = ~np.all(np.isfinite(x), axis=1)
        amax = np.max(np.abs(np.where(np.isfinite(x), x, 0.0)), axis=1)
        if np.any(bad):
            chain = int(np.flatnonzero(bad)[0])
            raise DivergenceError("non-finite sampler state", chain=chain, step=n, t=round(t, 6),
                                  max_abs=float(amax.max()))
        self.max_abs = max(self.max_abs, float(amax.max()))
        if self.cfg.field_range is not None:
            kp = sde_mod.kernel_params(self.spec, t)
            limit = self.cfg.divergence_factor * (float(kp.mean_scale) * self.cfg.field_range + float(kp.std))
            over = amax > limit
            if np.any(over):
                chain = int(np.flatnonzero(over)[0])
                raise DivergenceError("sampler state left the stability envelope", chain=chain, step=n,
                                      t=round(t, 6), max_abs=float(amax[chain]), limit=limit)


def _initial(spec, chains):
    return sde_mod.terminal_std(spec) * chains.normal()


def _finish(x, score, cfg, spec, grid_shape, extra):
    fields = score.offset + score.scale * x
    meta = {"config": cfg.to_dict(), "sde": spec.to_dict() if spec.kind != sde_mod.VE_GENERAL else spec.kind,
            "seed": cfg.seed}
    meta["config_hash"] = config_hash(meta["config"])
    meta.update(extra)
    return SampleSet(fields, grid_shape, meta)


def sample_unconditional(score, spec, cfg: SamplerConfig, dim=None, grid_shape=None, callback=None):
    """Reverse-SDE predictor with ``K`` Langevin corrector moves per step."""
    dim = dim or getattr(score, "dim", None) or (int(np.prod(grid_shape)) if grid_shape else None)
    if dim is None:
        raise ConfigError("state dimension unknown; pass dim or grid_shape")
    grid = sde_mod.TimeGrid(cfg.n_steps, spec.T)
    chains = _Chains(cfg.seed, cfg.n_samples, dim)
    mon = _Monitor(spec, cfg)
    x = _initial(spec, chains)
    mon.check(x, cfg.n_steps, spec.T)
    for n in range(cfg.n_steps, 0, -1):
        t_n = grid.t(n)
        x = sde_mod.reverse_em_step(spec, x, n, grid, score.eval(x, t_n, spec), z=chains.normal())
        t_c = max(grid.t(n - 1), grid.dt)
        for _ in range(cfg.K):
            x = _corrector(x, lambda v, t: score.eval(v, t, spec), t_c, cfg.r, chains.normal(), cfg.step_norm)
        mon.check(x, n - 1, grid.t(n - 1))
        if callback is not None:
            callback(n - 1, x)
    return _finish(x, score, cfg, spec, grid_shape, {"max_abs": mon.max_abs, "mode": "unconditional"})


class _ScaledForward:
    """Forward model seen from the normalised diffusion space."""

    def __init__(self, fwd, offset, scale):
        self.fwd, self.offset, self.scale = fwd, offset, scale

    def apply(self, x):
        return self.fwd.apply(self.offset + self.scale * x)

    def vjp(self, x, r):
        return self.scale * self.fwd.vjp(self.offset + self.scale * x, r)

    def pullback(self, x):
        pred, back = _pullback(self.fwd, self.offset + self.scale * x)
        return pred, lambda r: self.scale * back(r)


def _pullback(fwd, x):
    if hasattr(fwd, "pullback"):
        return fwd.pullback(x)
    return fwd.apply(x), lambda r: fwd.vjp(x, r)


def posterior_score(score, spec, fwd, y, mu_n, t, sched: ScheduleConfig, prior_score=None):
    """Prior score plus ``rho(t) J^T (y - G(mu0_bar))`` with a frozen Tweedie Jacobian.

    ``y`` is the observation vector (or an object with a ``y`` attribute).
    ``prior_score`` may be supplied to reuse an already computed score.
    """
    y = np.asarray(getattr(y, "y", y), dtype=float)
    s = score.eval(mu_n, t, spec) if prior_score is None else prior_score
    w = rho(t, sched)
    if np.isscalar(w) and w == 0:
        return s
    mu0 = posterior_mean(spec, mu_n, t, s, sched)
    pred, back = _pullback(fwd, mu0)
    if not np.all(np.isfinite(pred)):
        raise DivergenceError("forward model returned non-finite values", t=t)
    like = jacobian_scale(spec, t, sched) * back(w * (y - pred))
    return s + like


def sample_posterior(score, spec, fwd, y, cfg: SamplerConfig, dim=None, grid_shape=None, callback=None):
    """Likelihood-guided predictor-corrector sampling.

    The forward model acts on physical fields; if the score model works in
    a normalised space (``offset``/``scale``) the sampler maps between the
    two.  Returned fields are physical.
    """
    if cfg.schedule is None:
        raise ConfigError("posterior sampling needs a likelihood schedule")
    sched = cfg.schedule
    dim = dim or getattr(score, "dim", None) or fwd.n_in
    grid = sde_mod.TimeGrid(cfg.n_steps, spec.T)
    if abs(grid.dt - sched.dt) > 1e-12 * max(grid.dt, 1.0):
        raise ConfigError(f"schedule dt={sched.dt} does not match the sampler grid dt={grid.dt}")
    g = _ScaledForward(fwd, score.offset, score.scale) if (score.offset, score.scale) != (0.0, 1.0) else fwd
    chains = _Chains(cfg.seed, cfg.n_samples, dim)
    mon = _Monitor(spec, cfg)
    x = _initial(spec, chains)
    mon.check(x, cfg.n_steps, spec.T)

    def post(v, t):
        return posterior_score(score, spec, g, y, v, t, sched)

    for n in range(cfg.n_steps, 0, -1):
        t_n = grid.t(n)
        x = sde_mod.reverse_em_step(spec, x, n, grid, post(x, t_n), z=chains.normal())
        t_c = max(grid.t(n - 1), grid.dt)
        for _ in range(cfg.K):
            x = _corrector(x, post, t_c, cfg.r, chains.normal(), cfg.step_norm)
        mon.check(x, n - 1, grid.t(n - 1))
        if callback is not None:
            callback(n - 1, x)
    return _finish(x, score, cfg, spec, grid_shape, {"max_abs": mon.max_abs, "mode": "posterior",
                                                     "sigma_eps": sched.sigma_eps})


def diverges(run, *args, **kwargs):
    """Run a sampler and return ``(SampleSet or None, DivergenceError or None)``."""
    try:
        return run(*args, **kwargs), None
    except DivergenceError as exc:
        return None, exc
