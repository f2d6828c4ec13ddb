"""Score models: closed-form Gaussian and Gaussian-mixture oracles and a
network trained by denoising score matching (DSM).

All models expose ``eval(mu, t)`` on row-stacked states ``(batch, dim)``.
``t`` may be a scalar or one time per row.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import sde as sde_mod
from .errors import ConfigError, DivergenceError, DomainError, ShapeError
from .neural import AdamState, Network, adam_step, load_network, save_network
from .numerics import check_symmetric, sym_eig

log = logging.getLogger(__name__)


def _rows(mu):
    mu = np.asarray(mu, dtype=float)
    return (mu[None, :], True) if mu.ndim == 1 else (mu, False)


def _col(x, n):
    """Broadcast a scalar or per-row value to shape ``(n, 1)``."""
    x = np.asarray(x, dtype=float)
    return np.broadcast_to(x.reshape(-1, 1) if x.ndim else x, (n, 1))


class ScoreModel:
    """Common interface.  ``transform`` maps diffusion space to physical space."""

    offset: float = 0.0
    scale: float = 1.0

    def eval(self, mu, t, spec):
        raise NotImplementedError


@dataclass
class AnalyticGaussian(ScoreModel):
    """Exact score of the noised Gaussian prior ``N(m0, C0)``."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float).reshape(-1)
        self.cov = check_symmetric(np.atleast_2d(self.cov))
        if self.cov.shape[0] != self.mean.size:
            raise ShapeError("mean and covariance sizes differ")
        lam, V = sym_eig(self.cov)
        if lam[-1] < -1e-10 * max(lam[0], 1.0):
            raise ConfigError("prior covariance is not PSD")
        self._lam, self._V = np.clip(lam, 0.0, None), V

    @property
    def dim(self):
        return self.mean.size

    def _noised_inv(self, m, s):
        # (m^2 C0 + s^2 I)^{-1} via the cached eigenbasis
        d = m * m * self._lam + s * s
        if np.any(d <= 0):
            raise DomainError("noised prior covariance is singular")
        return (self._V / d) @ self._V.T

    def eval(self, mu, t, spec):
        X, single = _rows(mu)
        if X.shape[1] != self.dim:
            raise ShapeError(f"state dimension {X.shape[1]} != prior dimension {self.dim}")
        ts = np.asarray(t, dtype=float)
        if ts.ndim == 0:
            kp = sde_mod.kernel_params(spec, ts)
            out = -(X - kp.mean_scale * self.mean) @ self._noised_inv(kp.mean_scale, kp.std)
        else:
            out = np.empty_like(X)
            for i, ti in enumerate(np.broadcast_to(ts, (X.shape[0],))):
                kp = sde_mod.kernel_params(spec, ti)
                out[i] = -self._noised_inv(kp.mean_scale, kp.std) @ (X[i] - kp.mean_scale * self.mean)
        return out[0] if single else out

    def log_density(self, mu, t, spec):
        kp = sde_mod.kernel_params(spec, t)
        m, s = kp.mean_scale, kp.std
        X, single = _rows(mu)
        d = m * m * self._lam + s * s
        proj = (X - m * self.mean) @ self._V
        val = -0.5 * np.sum(proj * proj / d, axis=1) - 0.5 * np.sum(np.log(2 * np.pi * d))
        return val[0] if single else val


@dataclass
class AnalyticGMM(ScoreModel):
    """Mixture of isotropic Gaussians ``sum_i w_i N(m_i, c_i^2 I)``."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        self.variances = np.asarray(self.variances, dtype=float).reshape(-1)
        k = self.weights.size
        if self.means.shape[0] != k or self.variances.size != k:
            raise ShapeError("weights, means and variances must agree in length")
        if np.any(self.weights <= 0) or abs(self.weights.sum() - 1.0) > 1e-10:
            raise ConfigError("mixture weights must be positive and sum to 1")
        if np.any(self.variances < 0):
            raise ConfigError("mixture variances must be non-negative")

    @property
    def dim(self):
        return self.means.shape[1]

    def _parts(self, X, t, spec):
        n = X.shape[0]
        kp = sde_mod.kernel_params(spec, t)
        m = _col(kp.mean_scale, n)[:, :, None]  # (n,1,1)
        s = _col(kp.std, n)[:, :, None]
        v = m * m * self.variances[None, :, None] + s * s  # (n,K,1)
        diff = X[:, None, :] - m * self.means[None, :, :]  # (n,K,d)
        logp = (np.log(self.weights)[None, :]
                - 0.5 * np.sum(diff * diff, axis=2) / v[:, :, 0]
                - 0.5 * self.dim * np.log(2 * np.pi * v[:, :, 0]))
        return diff, v, logp

    def eval(self, mu, t, spec):
        X, single = _rows(mu)
        diff, v, logp = self._parts(X, t, spec)
        r = np.exp(logp - logp.max(axis=1, keepdims=True))
        r /= r.sum(axis=1, keepdims=True)
        out = -np.sum(r[:, :, None] * diff / v, axis=1)
        return out[0] if single else out

    def log_density(self, mu, t, spec):
        X, single = _rows(mu)
        _, _, logp = self._parts(X, t, spec)
        mx = logp.max(axis=1)
        val = mx + np.log(np.exp(logp - mx[:, None]).sum(axis=1))
        return val[0] if single else val


@dataclass
class Learned(ScoreModel):
    """DSM-trained network with a Gaussian skip path.

    With ``x_c = x - m(t) data_mean`` and ``c_in = 1 / sqrt(m^2 sigma_data^2 + s^2)``
    the noise prediction is

        -z_hat = -s c_in^2 x_c + m sigma_data c_in * net(c_in x_c, t)

    and the score is ``-z_hat / s``.  The first term is exact for Gaussian
    data with the training set's scalar mean and spread, so the network
    only learns a unit-scale correction.  States live in the normalised
    space ``x = (mu - offset) / scale``.
    """

    net: Network
    spec: sde_mod.SdeSpec
    grid_shape: tuple | None = None
    sigma_data: float = 0.5
    data_mean: float = 0.0
    offset: float = 0.0
    scale: float = 1.0
    t_min: float = 1e-3
    meta: dict = field(default_factory=dict)

    def _shape_in(self, X):
        if self.grid_shape is None:
            return X
        H, W = self.grid_shape
        return X.reshape(X.shape[0], H, W, 1)

    def noise_prediction(self, X, t, tape=None):
        """Return ``(-z_hat, s, c_out, raw_shape)`` for row states; records on ``tape`` if given."""
        n = X.shape[0]
        t_arr = np.maximum(np.broadcast_to(np.asarray(t, dtype=float).reshape(-1), (n,)), self.t_min)
        kp = sde_mod.kernel_params(self.spec, t_arr)
        m, s = np.asarray(kp.mean_scale)[:, None], np.asarray(kp.std)[:, None]
        c_in = 1.0 / np.sqrt(m * m * self.sigma_data ** 2 + s * s)
        c_out = m * self.sigma_data * c_in
        xc = X - m * self.data_mean
        raw = self.net.forward(self._shape_in(xc * c_in), t_arr, tape=tape)
        out = -s * c_in * c_in * xc + c_out * raw.reshape(n, -1).astype(float)
        return out, s, c_out, raw.shape

    def eval(self, mu, t, spec=None):
        if spec is not None and spec.kind != self.spec.kind:
            raise ConfigError(f"score trained for {self.spec.kind}, evaluated under {spec.kind}")
        X, single = _rows(mu)
        if np.any(np.asarray(t) < self.t_min):
            log.debug("learned score evaluated below t_min=%g; clamped", self.t_min)
        out, s, _, _ = self.noise_prediction(X, t)
        out /= s
        return out[0] if single else out

    def header(self):
        return {"score": {"sde": self.spec.to_dict(), "grid_shape": list(self.grid_shape) if self.grid_shape else None,
                          "sigma_data": self.sigma_data,
                          "data_mean": self.data_mean, "offset": self.offset, "scale": self.scale,
                          "t_min": self.t_min}}

    def save(self, path, adam=None):
        meta = dict(self.meta)
        meta.update(self.header())
        return save_network(path, self.net, meta=meta, adam=adam)

    @classmethod
    def load(cls, path, dtype=np.float32):
        net, meta, adam = load_network(path, dtype=dtype)
        info = meta.get("score")
        if info is None:
            raise ConfigError(f"{path} is not a score checkpoint")
        model = cls(net=net, spec=sde_mod.SdeSpec.from_dict(info["sde"]),
                    grid_shape=tuple(info["grid_shape"]) if info["grid_shape"] else None,
                    sigma_data=info["sigma_data"], data_mean=info.get("data_mean", 0.0), offset=info["offset"], scale=info["scale"],
                    t_min=info["t_min"], meta={k: v for k, v in meta.items() if k != "score"})
        return model, adam


def eval_score(model: ScoreModel, mu, t, spec):
    return model.eval(mu, t, spec)


def dsm_loss(model: ScoreModel, spec, mu0, t, z):
    """Per-sample ``sigma^2 || s(mu_t, t) + z / sigma ||^2`` for given draws."""
    mu_t, _, _ = sde_mod.perturb(spec, mu0, t, z=z)
    kp = sde_mod.kernel_params(spec, t)
    s = np.asarray(kp.std, dtype=float).reshape(-1, 1)
    resid = s * model.eval(mu_t, t, spec) + z
    return np.sum(resid * resid, axis=1)


def dsm_train(data, spec, net: Network, epochs: int, rng, *, batch_size=64, lr=2e-4, t_eps=1e-3,
              grid_shape=None, sigma_data=None, data_mean=None, offset=0.0, scale=1.0, adam: AdamState | None = None,
              start_epoch=0, max_steps=None, checkpoint=None, log_every=0):
    """Fit ``net`` by lambda-weighted DSM and return ``(Learned, history)``.

    ``data`` holds clean samples as rows, already in the normalised space.
    Epoch ``e`` draws from ``rng.split(e)`` so training resumed from a
    checkpoint at epoch ``e`` continues the same random sequence.
    ``checkpoint`` (optional) is called as ``checkpoint(model, adam, epoch)``
    after each epoch.
    """
    if epochs < 1:
        raise DomainError("epochs must be >= 1")
    X = np.asarray(getattr(data, "fields", data), dtype=float)
    X = X.reshape(X.shape[0], -1)
    if X.shape[0] == 0:
        raise DomainError("training data is empty")
    if sigma_data is None:
        sigma_data = float(np.std(X))
    if data_mean is None:
        data_mean = float(np.mean(X))
    model = Learned(net=net, spec=spec, grid_shape=tuple(grid_shape) if grid_shape else None,
                    sigma_data=sigma_data, data_mean=data_mean, offset=offset, scale=scale, t_min=t_eps)
    adam = adam or AdamState.for_network(net, lr=lr)
    history = []
    step = 0
    n = X.shape[0]
    for epoch in range(start_epoch, start_epoch + epochs):
        erng = rng.split(epoch)
        order = erng.generator.permutation(n)
        epoch_loss = 0.0
        for b0 in range(0, n, batch_size):
            idx = order[b0:b0 + batch_size]
            mu0 = X[idx]
            B = mu0.shape[0]
            t = erng.uniform(t_eps, spec.T, B)
            z = erng.normal(mu0.shape)
            mu_t, _, _ = sde_mod.perturb(spec, mu0, t, z=z)
            tape = []
            out, _, c_out, raw_shape = model.noise_prediction(mu_t, t, tape=tape)
            resid = out + z
            loss = float(np.mean(resid ** 2))
            if not math.isfinite(loss):
                raise DivergenceError("non-finite DSM loss", epoch=epoch, step=step)
            cot = (2.0 / resid.size) * c_out * resid
            net.backward(tape, cot.reshape(raw_shape).astype(net.dtype), input_grad=False)
            adam_step(net, adam, lr=lr)
            epoch_loss += loss * B
            step += 1
            if max_steps is not None and step >= max_steps:
                break
        history.append(epoch_loss / n)
        if log_every and (epoch + 1) % log_every == 0:
            log.info("dsm epoch %d loss %.5f", epoch + 1, history[-1])
        if checkpoint is not None:
            checkpoint(model, adam, epoch + 1)
        if max_steps is not None and step >= max_steps:
            break
    model.meta["epochs"] = start_epoch + len(history)
    return model, history, adam
