"""Forward models ``y = H(A(mu))``.

The grid has ``n_y`` rows of ``n_x`` nodes; node ``k = i * n_x + j`` sits
at ``x = j h``, ``y = i h`` (row 0 is the top edge, ``y`` grows downward).
The top edge is clamped, a uniform traction acts on the bottom edge, and
the remaining boundary is observed.

Fields are discretised with bilinear quadrilaterals integrated by 2x2 Gauss
quadrature.  ``G`` maps nodal values to gradients at the quadrature points,
stacked as ``[d/dx; d/dy]``; ``P`` interpolates nodal values to the same
points and ``i_vec`` holds the quadrature weights.  Energies take the form
``i_vec . f_a(G u, P mu) + f_vec . u``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConfigError, DivergenceError, InadmissibleError, ShapeError, SolverError
from .neural import AdamState, Network, adam_step

DIRICHLET = "dirichlet"
HYPERELASTIC = "hyperelastic"
KINDS = (DIRICHLET, HYPERELASTIC)
NU_DEFAULT = 0.3


@dataclass
class GridOperators:
    n_x: int
    n_y: int
    h: float
    Gx: sp.csr_matrix
    Gy: sp.csr_matrix
    P: sp.csr_matrix
    i_vec: np.ndarray
    load: np.ndarray  # lumped bottom-edge weights (integrates to the edge length)
    traction: float = 1.0

    @property
    def n_nodes(self):
        return self.n_x * self.n_y

    @property
    def n_quad(self):
        return self.i_vec.size

    @property
    def G(self):
        return sp.vstack([self.Gx, self.Gy]).tocsr()

    @property
    def area(self):
        return (self.n_x - 1) * (self.n_y - 1) * self.h ** 2

    @property
    def f_vec(self):
        """Scalar load vector; the energy term ``f . u`` rewards displacement along the load."""
        return -self.traction * self.load

    @property
    def fixed_nodes(self):
        return np.arange(self.n_x)

    @property
    def free_nodes(self):
        return np.arange(self.n_x, self.n_nodes)

    def node_xy(self):
        i, j = np.divmod(np.arange(self.n_nodes), self.n_x)
        return j * self.h, i * self.h


def assemble_operators(n_x, n_y, h=None, traction=1.0) -> GridOperators:
    n_x, n_y = int(n_x), int(n_y)
    if n_x < 3 or n_y < 3:
        raise ConfigError(f"grid must have at least 3x3 nodes, got {n_x}x{n_y}")
    h = 1.0 / (max(n_x, n_y) - 1) if h is None else float(h)
    if not h > 0:
        raise ConfigError("grid spacing must be positive")
    g = 0.5 / math.sqrt(3.0)
    pts = (0.5 - g, 0.5 + g)
    ex, ey = np.meshgrid(np.arange(n_x - 1), np.arange(n_y - 1))
    ex, ey = ex.ravel(), ey.ravel()
    n_el = ex.size
    # element corners: TL, TR, BL, BR
    corners = np.stack([ey * n_x + ex, ey * n_x + ex + 1, (ey + 1) * n_x + ex, (ey + 1) * n_x + ex + 1], axis=1)
    rows, cols, vx, vy, vp = [], [], [], [], []
    q = 0
    for b in pts:
        for a in pts:
            shape = np.array([(1 - a) * (1 - b), a * (1 - b), (1 - a) * b, a * b])
            dA = np.array([-(1 - b), 1 - b, -b, b]) / h
            dB = np.array([-(1 - a), -a, 1 - a, a]) / h
            qidx = q * n_el + np.arange(n_el)
            for c in range(4):
                rows.append(qidx)
                cols.append(corners[:, c])
                vx.append(np.full(n_el, dA[c]))
                vy.append(np.full(n_el, dB[c]))
                vp.append(np.full(n_el, shape[c]))
            q += 1
    rows, cols = np.concatenate(rows), np.concatenate(cols)
    shape = (4 * n_el, n_x * n_y)
    Gx = sp.csr_matrix((np.concatenate(vx), (rows, cols)), shape=shape)
    Gy = sp.csr_matrix((np.concatenate(vy), (rows, cols)), shape=shape)
    P = sp.csr_matrix((np.concatenate(vp), (rows, cols)), shape=shape)
    i_vec = np.full(4 * n_el, h * h / 4.0)
    load = np.zeros(n_x * n_y)
    bottom = (n_y - 1) * n_x + np.arange(n_x)
    load[bottom] = h
    load[bottom[[0, -1]]] = h / 2
    return GridOperators(n_x, n_y, h, Gx, Gy, P, i_vec, load, float(traction))


# -- energies -----------------------------------------------------------------


def _check_kind(kind):
    if kind not in KINDS:
        raise ConfigError(f"unknown energy kind {kind!r}")


def _check_param(mu, ops):
    mu = np.asarray(mu, dtype=float).reshape(-1)
    if mu.size != ops.n_nodes:
        raise ShapeError(f"parameter field has {mu.size} entries, grid has {ops.n_nodes}")
    if not np.all(mu > 0):
        raise InadmissibleError("parameter field must be strictly positive")
    return mu


def _he_consts(nu):
    return 1.0 / (4 * (1 + nu)), 1.0 / (2 * (1 + nu)), nu / (2 * (1 + nu) * (1 - 2 * nu))


def deformation_gradient(u, ops):
    """``(F11, F12, F21, F22)`` at every quadrature point, shape ``(4, n_q)``."""
    N = ops.n_nodes
    ux, uy = u[:N], u[N:]
    return np.stack([1.0 + ops.Gx @ ux, ops.Gy @ ux, ops.Gx @ uy, 1.0 + ops.Gy @ uy])


def _he_parts(F, E, nu, order=1):
    c1, c2, c3 = _he_consts(nu)
    J = F[0] * F[3] - F[1] * F[2]
    if np.any(J <= 0):
        raise InadmissibleError("deformation gradient with det F <= 0")
    lnJ = np.log(J)
    fa = E * (c1 * (np.sum(F * F, axis=0) - 2.0) - c2 * lnJ + c3 * lnJ ** 2)
    if order == 0:
        return fa
    cof = np.stack([F[3], -F[2], -F[1], F[0]])
    coef = -c2 + 2 * c3 * lnJ
    dfa = E * (2 * c1 * F + coef * cof / J)
    if order == 1:
        return fa, dfa
    cj = cof / J
    H = np.einsum("aq,bq->abq", cj, cj) * (2 * c3 - coef)
    H += 2 * c1 * np.eye(4)[:, :, None]
    A = np.zeros((4, 4))
    A[0, 3] = A[3, 0] = 1.0
    A[1, 2] = A[2, 1] = -1.0
    H += coef * A[:, :, None] / J
    return fa, dfa, H * E


def _state_size(ops, kind):
    return ops.n_nodes * (2 if kind == HYPERELASTIC else 1)


def _load(ops, kind):
    if kind == DIRICHLET:
        return ops.f_vec
    return np.concatenate([np.zeros(ops.n_nodes), ops.f_vec])


def energy(u, mu, ops: GridOperators, kind=DIRICHLET, nu=NU_DEFAULT):
    _check_kind(kind)
    mu = _check_param(mu, ops)
    u = np.asarray(u, dtype=float).reshape(-1)
    if u.size != _state_size(ops, kind):
        raise ShapeError(f"state has {u.size} entries, expected {_state_size(ops, kind)}")
    kq = ops.P @ mu
    if kind == DIRICHLET:
        gx, gy = ops.Gx @ u, ops.Gy @ u
        fa = 0.5 * kq * (gx * gx + gy * gy)
    else:
        fa = _he_parts(deformation_gradient(u, ops), kq, nu, order=0)
    return float(ops.i_vec @ fa + _load(ops, kind) @ u)


def _he_channel_ops(ops):
    Z = sp.csr_matrix(ops.Gx.shape)
    return [sp.hstack([ops.Gx, Z]).tocsr(), sp.hstack([ops.Gy, Z]).tocsr(),
            sp.hstack([Z, ops.Gx]).tocsr(), sp.hstack([Z, ops.Gy]).tocsr()]


def energy_grad(u, mu, ops: GridOperators, kind=DIRICHLET, nu=NU_DEFAULT):
    """Gradient of :func:`energy` with respect to every state entry."""
    _check_kind(kind)
    mu = _check_param(mu, ops)
    u = np.asarray(u, dtype=float).reshape(-1)
    kq = ops.P @ mu
    if kind == DIRICHLET:
        w = ops.i_vec * kq
        return ops.Gx.T @ (w * (ops.Gx @ u)) + ops.Gy.T @ (w * (ops.Gy @ u)) + ops.f_vec
    _, dfa = _he_parts(deformation_gradient(u, ops), kq, nu)
    B = _he_channel_ops(ops)
    return sum(B[a].T @ (ops.i_vec * dfa[a]) for a in range(4)) + _load(ops, kind)


def energy_hessian(u, mu, ops: GridOperators, kind=DIRICHLET, nu=NU_DEFAULT):
    _check_kind(kind)
    mu = _check_param(mu, ops)
    kq = ops.P @ mu
    if kind == DIRICHLET:
        D = sp.diags(ops.i_vec * kq)
        return (ops.Gx.T @ D @ ops.Gx + ops.Gy.T @ D @ ops.Gy).tocsr()
    _, _, H = _he_parts(deformation_gradient(np.asarray(u, float).reshape(-1), ops), kq, nu, order=2)
    B = _he_channel_ops(ops)
    K = None
    for a in range(4):
        for b in range(4):
            term = B[a].T @ sp.diags(ops.i_vec * H[a, b]) @ B[b]
            K = term if K is None else K + term
    return K.tocsr()


def _free_dofs(ops, kind):
    free = ops.free_nodes
    if kind == HYPERELASTIC:
        free = np.concatenate([free, free + ops.n_nodes])
    return free


def _cg(K, b):
    diag = K.diagonal()
    M = sp.diags(1.0 / diag)
    x, info = spla.cg(K, b, rtol=1e-10, atol=0.0, maxiter=20 * K.shape[0], M=M)
    if info != 0:
        raise SolverError(f"conjugate gradients did not converge (info={info})")
    return x


def _linear_solve(K, b, method):
    if method == "cg":
        return _cg(K, b)
    if method == "direct":
        return spla.spsolve(K.tocsc(), b)
    raise ConfigError(f"unknown linear solver {method!r}")


def solve_pde(mu, ops: GridOperators, kind=DIRICHLET, nu=NU_DEFAULT, method="cg", max_newton=50, gtol=1e-8):
    """Minimise the energy over states that vanish on the clamped edge."""
    _check_kind(kind)
    mu = _check_param(mu, ops)
    free = _free_dofs(ops, kind)
    u = np.zeros(_state_size(ops, kind))
    if kind == DIRICHLET:
        K = energy_hessian(u, mu, ops, kind)[free][:, free]
        u[free] = _linear_solve(K, -ops.f_vec[free], method)
        return u
    E0 = energy(u, mu, ops, kind, nu)
    for _ in range(max_newton):
        g = energy_grad(u, mu, ops, kind, nu)[free]
        if np.linalg.norm(g) <= gtol:
            return u
        K = energy_hessian(u, mu, ops, kind, nu)[free][:, free]
        step = spla.spsolve(K.tocsc(), -g)
        slope = float(g @ step)
        alpha = 1.0
        while True:
            trial = u.copy()
            trial[free] += alpha * step
            try:
                E1 = energy(trial, mu, ops, kind, nu)
            except InadmissibleError:
                E1 = np.inf
            if E1 <= E0 + 1e-4 * alpha * slope or alpha < 1e-10:
                break
            alpha *= 0.5
        if not np.isfinite(E1):
            raise SolverError("line search could not find an admissible step")
        u, E0 = trial, E1
    if np.linalg.norm(energy_grad(u, mu, ops, kind, nu)[free]) <= gtol:
        return u
    raise SolverError(f"Newton did not converge in {max_newton} iterations")


# -- observations -------------------------------------------------------------


def observed_nodes(ops: GridOperators):
    """Boundary nodes minus the clamped top edge, in increasing index order."""
    i, j = np.divmod(np.arange(ops.n_nodes), ops.n_x)
    on_boundary = (i == ops.n_y - 1) | (j == 0) | (j == ops.n_x - 1)
    return np.flatnonzero(on_boundary & (i > 0))


def observation_indices(ops, kind=DIRICHLET):
    nodes = observed_nodes(ops)
    if kind == HYPERELASTIC:
        return np.concatenate([nodes, nodes + ops.n_nodes])
    return nodes


def observe(u, indices):
    u = np.asarray(u, dtype=float)
    indices = np.asarray(indices)
    if indices.size and (indices.min() < 0 or indices.max() >= u.shape[-1]):
        raise ShapeError("observation index out of range")
    return u[..., indices]


@dataclass
class Observation:
    y: np.ndarray
    indices: np.ndarray
    sigma_eps: float
    sigma_model: np.ndarray | None = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float).reshape(-1)
        self.indices = np.asarray(self.indices)
        if self.y.size != self.indices.size:
            raise ShapeError("observation vector and index list differ in length")
        if np.unique(self.indices).size != self.indices.size:
            raise ShapeError("observation indices must be unique")
        if not self.sigma_eps > 0:
            raise ConfigError("sigma_eps must be positive")


# -- forward models -----------------------------------------------------------


def _batch(mu, dim):
    mu = np.asarray(mu, dtype=float)
    single = mu.ndim == 1
    mu = mu.reshape(1, -1) if single else mu.reshape(mu.shape[0], -1)
    if mu.shape[1] != dim:
        raise ShapeError(f"expected fields of size {dim}, got {mu.shape[1]}")
    return mu, single


class ForwardModel:
    """``apply(mu) -> y`` and ``vjp(mu, r) = J(mu)^T r`` on row batches."""

    n_in: int
    n_obs: int

    def apply(self, mu):
        raise NotImplementedError

    def vjp(self, mu, residual):
        raise NotImplementedError

    def pullback(self, mu):
        """``(G(mu), r -> J(mu)^T r)``; subclasses may share work between the two."""
        return self.apply(mu), lambda r: self.vjp(mu, r)


class LinearOracle(ForwardModel):
    def __init__(self, H):
        self.H = np.atleast_2d(np.asarray(H, dtype=float))
        self.n_obs, self.n_in = self.H.shape

    def apply(self, mu):
        X, single = _batch(mu, self.n_in)
        out = X @ self.H.T
        return out[0] if single else out

    def vjp(self, mu, residual):
        r = np.asarray(residual, dtype=float)
        if r.shape[-1] != self.n_obs:
            raise ShapeError(f"residual has {r.shape[-1]} entries, expected {self.n_obs}")
        return r @ self.H


class EllipticTrue(ForwardModel):
    """Finite-element solve followed by boundary observation; adjoint gradients."""

    def __init__(self, ops: GridOperators, kind=DIRICHLET, nu=NU_DEFAULT, method="cg"):
        _check_kind(kind)
        self.ops, self.kind, self.nu, self.method = ops, kind, nu, method
        self.indices = observation_indices(ops, kind)
        self.n_in = ops.n_nodes
        self.n_obs = self.indices.size

    def solve(self, mu):
        return solve_pde(mu, self.ops, self.kind, self.nu, self.method)

    def apply(self, mu):
        X, single = _batch(mu, self.n_in)
        out = np.stack([self.solve(x)[self.indices] for x in X])
        return out[0] if single else out

    def _vjp_one(self, mu, r):
        ops = self.ops
        u = self.solve(mu)
        free = _free_dofs(ops, self.kind)
        K = energy_hessian(u, mu, ops, self.kind, self.nu)[free][:, free]
        rhs = np.zeros(u.size)
        rhs[self.indices] = r
        lam = np.zeros(u.size)
        lam[free] = _linear_solve(K, rhs[free], self.method if self.kind == DIRICHLET else "direct")
        if self.kind == DIRICHLET:
            contr = (ops.Gx @ lam) * (ops.Gx @ u) + (ops.Gy @ lam) * (ops.Gy @ u)
        else:
            _, dfa = _he_parts(deformation_gradient(u, ops), np.ones(ops.n_quad), self.nu)
            B = _he_channel_ops(ops)
            contr = sum((B[a] @ lam) * dfa[a] for a in range(4))
        return -(ops.P.T @ (ops.i_vec * contr))

    def vjp(self, mu, residual):
        X, single = _batch(mu, self.n_in)
        R = np.asarray(residual, dtype=float).reshape(X.shape[0], -1)
        if R.shape[1] != self.n_obs:
            raise ShapeError(f"residual has {R.shape[1]} entries, expected {self.n_obs}")
        out = np.stack([self._vjp_one(x, r) for x, r in zip(X, R)])
        return out[0] if single else out


@dataclass
class SurrogateModel(ForwardModel):
    """Network emulator of the scalar (Dirichlet-energy) state map.

    ``u = out_scale * mask * net((mu - in_offset) / in_scale)``; the mask
    pins the clamped edge to zero.
    """

    net: Network
    ops: GridOperators
    in_offset: float = 1.0
    in_scale: float = 4.0
    out_scale: float = 1.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.indices = observed_nodes(self.ops)
        self.n_in = self.ops.n_nodes
        self.n_obs = self.indices.size
        mask = np.ones(self.ops.n_nodes)
        mask[self.ops.fixed_nodes] = 0.0
        self.mask = mask

    def _input(self, X):
        return ((X - self.in_offset) / self.in_scale).reshape(X.shape[0], self.ops.n_y, self.ops.n_x, 1)

    def full_field(self, mu, tape=None):
        X, single = _batch(mu, self.n_in)
        raw = self.net.forward(self._input(X), None, tape=tape)
        u = raw.reshape(X.shape[0], -1).astype(float) * (self.out_scale * self.mask)
        return u[0] if single else u

    def apply(self, mu):
        return self.full_field(mu)[..., self.indices]

    def vjp(self, mu, residual):
        return self.pullback(mu)[1](residual)

    def pullback(self, mu):
        X, single = _batch(mu, self.n_in)
        tape = []
        raw = self.net.forward(self._input(X), None, tape=tape)
        scale = self.out_scale * self.mask
        pred = (raw.reshape(X.shape[0], -1).astype(float) * scale)[:, self.indices]

        def back(residual):
            R = np.asarray(residual, dtype=float).reshape(X.shape[0], -1)
            cot = np.zeros((X.shape[0], self.n_in))
            cot[:, self.indices] = R
            cot = (cot * scale).astype(self.net.dtype)
            dx = self.net.backward(tape, cot.reshape(X.shape[0], self.ops.n_y, self.ops.n_x, 1), param_grads=False)
            out = dx.reshape(X.shape[0], -1).astype(float) / self.in_scale
            return out[0] if single else out

        return (pred[0] if single else pred), back

    def header(self):
        return {"surrogate": {"n_x": self.ops.n_x, "n_y": self.ops.n_y, "h": self.ops.h,
                              "traction": self.ops.traction, "in_offset": self.in_offset,
                              "in_scale": self.in_scale, "out_scale": self.out_scale}}

    def save(self, path):
        from .neural import save_network

        meta = dict(self.meta)
        meta.update(self.header())
        return save_network(path, self.net, meta=meta)

    @classmethod
    def load(cls, path, dtype=np.float32):
        from .neural import load_network

        net, meta, _ = load_network(path, dtype=dtype)
        info = meta.get("surrogate")
        if info is None:
            raise ConfigError(f"{path} is not a surrogate checkpoint")
        ops = assemble_operators(info["n_x"], info["n_y"], info["h"], info["traction"])
        return cls(net, ops, info["in_offset"], info["in_scale"], info["out_scale"],
                   meta={k: v for k, v in meta.items() if k != "surrogate"})


def dirichlet_energy_batch(U, K_mu, ops: GridOperators):
    """Energies and their state gradients for row batches ``U`` with parameters ``K_mu``."""
    kq = (ops.P @ K_mu.T)  # (n_q, B)
    gx, gy = ops.Gx @ U.T, ops.Gy @ U.T
    w = ops.i_vec[:, None] * kq
    E = 0.5 * np.sum(w * (gx * gx + gy * gy), axis=0) + U @ ops.f_vec
    grad = (ops.Gx.T @ (w * gx) + ops.Gy.T @ (w * gy)).T + ops.f_vec
    return E, grad


def surrogate_train(xi_sl_mu, xi_sl_u, xi_ul_mu, net: Network, ops: GridOperators, n_pt: int, n_st: int, rng,
                    *, kind=DIRICHLET, physics=True, batch_size=32, lr=1e-3, w_ul=1.0,
                    in_offset=None, in_scale=None, out_scale=None):
    """Two-phase surrogate training; returns ``(SurrogateModel, history)``.

    Phase one runs ``n_pt`` supervised epochs over the paired set.  Phase two
    runs ``n_st`` epochs over the unpaired set; each mini-batch is paired
    with the next paired mini-batch (cycling) and minimises the supervised
    loss plus the mean Dirichlet energy of the predicted states.  With
    ``physics=False`` phase two keeps the identical step schedule but drops
    the energy term, which gives a supervised baseline of equal budget.
    """
    if kind != DIRICHLET:
        raise ConfigError("surrogate training implements the Dirichlet energy only")
    Xs = np.asarray(xi_sl_mu, dtype=float).reshape(len(xi_sl_mu), -1)
    Us = np.asarray(xi_sl_u, dtype=float).reshape(len(xi_sl_u), -1)
    Xu = np.asarray(xi_ul_mu, dtype=float).reshape(len(xi_ul_mu), -1) if xi_ul_mu is not None else None
    if Xs.shape[0] == 0:
        raise ConfigError("paired training set is empty")
    if n_pt < 0 or n_st < 0:
        raise ConfigError("epoch counts must be non-negative")
    if n_st > 0 and (Xu is None or Xu.shape[0] == 0):
        raise ConfigError("semi-supervised phase needs unpaired samples")
    allX = Xs if Xu is None else np.vstack([Xs, Xu])
    in_offset = float(allX.mean()) if in_offset is None else in_offset
    in_scale = (float(allX.std()) or 1.0) if in_scale is None else in_scale
    out_scale = float(np.sqrt(np.mean(Us[:, ops.free_nodes] ** 2))) if out_scale is None else out_scale
    model = SurrogateModel(net, ops, in_offset, in_scale, out_scale)
    N = ops.n_nodes
    adam = AdamState.for_network(net, lr=lr)
    hist = {"sl": [], "ul": []}

    def step(xb, ub, xphys):
        B = xb.shape[0]
        tape = []
        raw = net.forward(model._input(xb), None, tape=tape)
        pred = raw.reshape(B, -1).astype(float) * model.mask
        diff = pred - ub / out_scale
        loss_sl = float(np.mean(diff ** 2))
        cot = 2.0 * diff / diff.size
        loss_ul = 0.0
        if xphys is not None:
            Bp = xphys.shape[0]
            tape_p = []
            raw_p = net.forward(model._input(xphys), None, tape=tape_p)
            up = raw_p.reshape(Bp, -1).astype(float) * (out_scale * model.mask)
            E, gE = dirichlet_energy_batch(up, xphys, ops)
            norm = 2.0 / (N * out_scale ** 2)
            loss_ul = w_ul * norm * float(np.mean(E))
            cot_p = (w_ul * norm / Bp) * gE * (out_scale * model.mask)
            net.backward(tape_p, cot_p.reshape(raw_p.shape), input_grad=False)
        if not (math.isfinite(loss_sl) and math.isfinite(loss_ul)):
            raise DivergenceError("non-finite surrogate loss")
        net.backward(tape, (cot * model.mask).reshape(raw.shape), input_grad=False)
        adam_step(net, adam)
        return loss_sl, loss_ul

    n_sl = Xs.shape[0]
    for epoch in range(n_pt):
        erng = rng.split(epoch)
        order = erng.generator.permutation(n_sl)
        acc = 0.0
        for b0 in range(0, n_sl, batch_size):
            idx = order[b0:b0 + batch_size]
            acc += step(Xs[idx], Us[idx], None)[0] * idx.size
        hist["sl"].append(acc / n_sl)
    for epoch in range(n_st):
        erng = rng.split(n_pt + epoch)
        order_u = erng.generator.permutation(Xu.shape[0])
        order_s = erng.generator.permutation(n_sl)
        pos = 0
        acc_sl = acc_ul = 0.0
        n_steps = 0
        for b0 in range(0, Xu.shape[0], batch_size):
            iu = order_u[b0:b0 + batch_size]
            i_s = order_s[np.arange(pos, pos + batch_size) % n_sl]
            pos += batch_size
            l_sl, l_ul = step(Xs[i_s], Us[i_s], Xu[iu] if physics else None)
            acc_sl += l_sl
            acc_ul += l_ul
            n_steps += 1
        hist["sl"].append(acc_sl / n_steps)
        hist["ul"].append(acc_ul / n_steps)
    model.meta.update({"n_pt": n_pt, "n_st": n_st, "physics": bool(physics)})
    return model, hist


def surrogate_error(model: ForwardModel, mu, y_true):
    """Per-coordinate RMS prediction error and the overall relative error."""
    pred = model.apply(mu)
    err = pred - np.asarray(y_true, dtype=float)
    sigma = np.sqrt(np.mean(err ** 2, axis=0))
    rel = float(np.linalg.norm(err) / np.linalg.norm(y_true))
    return sigma, rel
