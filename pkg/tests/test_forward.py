import numpy as np
import pytest

from diffinv import forward as fw
from diffinv.errors import ConfigError, InadmissibleError, ShapeError
from diffinv.neural import surrogate_backbone
from diffinv.numerics import RngStream


@pytest.fixture(scope="module")
def ops16():
    return fw.assemble_operators(16, 16)


@pytest.fixture(scope="module")
def ops6():
    return fw.assemble_operators(6, 5)


def test_grid_rejects_degenerate():
    with pytest.raises(ConfigError):
        fw.assemble_operators(2, 5)


def test_gradient_annihilates_constants(ops16):
    assert np.abs(ops16.G @ np.full(ops16.n_nodes, 3.7)).max() < 1e-12


def test_gradient_exact_on_ramps(ops16):
    x, y = ops16.node_xy()
    np.testing.assert_allclose(ops16.Gx @ x, 1.0, atol=1e-10)
    np.testing.assert_allclose(ops16.Gy @ x, 0.0, atol=1e-10)
    np.testing.assert_allclose(ops16.Gy @ (2 * y), 2.0, atol=1e-10)


def test_weights_integrate_area(ops6):
    assert np.all(ops6.i_vec > 0)
    assert ops6.i_vec.sum() == pytest.approx(ops6.area, abs=1e-10)
    assert ops6.area == pytest.approx(5 * 4 * ops6.h ** 2)


def test_zero_state_energies(ops6):
    mu = np.ones(ops6.n_nodes)
    assert fw.energy(np.zeros(2 * ops6.n_nodes), mu, ops6, fw.HYPERELASTIC) == 0.0
    no_load = fw.assemble_operators(6, 5, traction=0.0)
    assert fw.energy(np.zeros(no_load.n_nodes), mu, no_load) == 0.0


def test_dirichlet_energy_of_ramp():
    ops = fw.assemble_operators(9, 9)
    x, _ = ops.node_xy()
    expected = 0.5 * ops.area + ops.f_vec @ x
    assert fw.energy(x, np.ones(ops.n_nodes), ops) == pytest.approx(expected, rel=1e-12)


def test_inadmissible_deformation(ops6):
    u = np.zeros(2 * ops6.n_nodes)
    x, _ = ops6.node_xy()
    u[: ops6.n_nodes] = -2.0 * x  # F11 = -1
    with pytest.raises(InadmissibleError):
        fw.energy(u, np.ones(ops6.n_nodes), ops6, fw.HYPERELASTIC)


@pytest.mark.parametrize("kind", fw.KINDS)
def test_energy_gradient_matches_finite_differences(ops6, kind, nprng):
    n = ops6.n_nodes * (2 if kind == fw.HYPERELASTIC else 1)
    u = 0.02 * nprng.normal(size=n)
    mu = nprng.uniform(1, 5, ops6.n_nodes)
    g = fw.energy_grad(u, mu, ops6, kind)
    h = 1e-6
    fd = np.array([(fw.energy(u + h * e, mu, ops6, kind) - fw.energy(u - h * e, mu, ops6, kind)) / (2 * h)
                   for e in np.eye(n)])
    np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-8)


def test_hyperelastic_hessian_matches_gradient_differences(ops6, nprng):
    n = 2 * ops6.n_nodes
    u = 0.02 * nprng.normal(size=n)
    mu = nprng.uniform(1, 5, ops6.n_nodes)
    K = fw.energy_hessian(u, mu, ops6, fw.HYPERELASTIC).toarray()
    h = 1e-6
    cols = [(fw.energy_grad(u + h * e, mu, ops6, fw.HYPERELASTIC)
             - fw.energy_grad(u - h * e, mu, ops6, fw.HYPERELASTIC)) / (2 * h) for e in np.eye(n)]
    np.testing.assert_allclose(K, np.array(cols).T, rtol=1e-5, atol=1e-7)


def test_zero_load_gives_zero_state():
    ops = fw.assemble_operators(8, 8, traction=0.0)
    np.testing.assert_array_equal(fw.solve_pde(np.ones(ops.n_nodes), ops), 0.0)


def test_strip_matches_bar_solution():
    ops = fw.assemble_operators(3, 33)
    u = fw.solve_pde(np.ones(ops.n_nodes), ops)
    length, width = 32 * ops.h, 2 * ops.h
    tip = u[(ops.n_y - 1) * ops.n_x:].mean()
    assert tip == pytest.approx(ops.traction * width * length / width, rel=0.02)


def test_state_halves_when_parameter_doubles(ops16, nprng):
    mu = nprng.uniform(1, 5, ops16.n_nodes)
    u1 = fw.solve_pde(mu, ops16, method="direct")
    u2 = fw.solve_pde(2 * mu, ops16, method="direct")
    np.testing.assert_allclose(u2, 0.5 * u1, rtol=1e-12, atol=1e-14)


def test_cg_matches_direct(ops16, nprng):
    mu = nprng.uniform(1, 5, ops16.n_nodes)
    np.testing.assert_allclose(fw.solve_pde(mu, ops16), fw.solve_pde(mu, ops16, method="direct"),
                               rtol=1e-8, atol=1e-10)


def test_rejects_non_positive_parameter(ops6):
    mu = np.ones(ops6.n_nodes)
    mu[3] = 0.0
    with pytest.raises(InadmissibleError):
        fw.solve_pde(mu, ops6)


def test_hyperelastic_solve_reaches_tolerance(ops6):
    mu = np.ones(ops6.n_nodes)
    ops = fw.assemble_operators(6, 5, traction=0.05)
    u = fw.solve_pde(mu, ops, fw.HYPERELASTIC)
    g = fw.energy_grad(u, mu, ops, fw.HYPERELASTIC)[np.concatenate([ops.free_nodes, ops.free_nodes + ops.n_nodes])]
    assert np.linalg.norm(g) <= 1e-8
    assert np.abs(u).max() > 0


def test_observation_layout(ops16):
    idx = fw.observed_nodes(ops16)
    assert idx.size == 44
    assert not np.isin(idx, ops16.fixed_nodes).any()
    ramp = np.arange(ops16.n_nodes, dtype=float)
    np.testing.assert_array_equal(fw.observe(ramp, idx), idx.astype(float))
    np.testing.assert_array_equal(fw.observe(np.zeros(ops16.n_nodes), idx), 0.0)
    with pytest.raises(ShapeError):
        fw.observe(np.zeros(10), idx)


def test_linear_oracle_identity_vjp(nprng):
    r = nprng.normal(size=5)
    np.testing.assert_array_equal(fw.LinearOracle(np.eye(5)).vjp(np.zeros(5), r), r)


@pytest.mark.parametrize("kind", fw.KINDS)
def test_adjoint_matches_finite_differences(kind, nprng):
    ops = fw.assemble_operators(8, 8, traction=1.0 if kind == fw.DIRICHLET else 0.05)
    model = fw.EllipticTrue(ops, kind)
    mu = nprng.uniform(1, 5, ops.n_nodes)
    r = nprng.normal(size=model.n_obs)
    g = model.vjp(mu, r)
    h = 1e-6 * 5
    for k in nprng.choice(np.arange(ops.n_x, ops.n_nodes), 20, replace=False):
        e = np.zeros(ops.n_nodes)
        e[k] = h
        fd = (r @ model.apply(mu + e) - r @ model.apply(mu - e)) / (2 * h)
        assert g[k] == pytest.approx(fd, rel=1e-4, abs=1e-9 * np.abs(g).max())
    np.testing.assert_array_equal(model.vjp(mu, np.zeros(model.n_obs)), 0.0)


def test_surrogate_vjp_matches_finite_differences(ops6, nprng):
    net = surrogate_backbone((5, 6), channels=4, rng=RngStream(0), dtype=np.float64)
    model = fw.SurrogateModel(net, ops6, 1.0, 2.0, 0.3)
    mu = nprng.uniform(1, 5, ops6.n_nodes)
    r = nprng.normal(size=model.n_obs)
    g = model.vjp(mu, r)
    h = 1e-6
    fd = np.array([(r @ model.apply(mu + h * e) - r @ model.apply(mu - h * e)) / (2 * h) for e in np.eye(ops6.n_nodes)])
    np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-8)


def test_surrogate_clamped_edge_is_zero(ops6, nprng):
    net = surrogate_backbone((5, 6), channels=4, rng=RngStream(0))
    u = fw.SurrogateModel(net, ops6).full_field(nprng.uniform(1, 5, (3, ops6.n_nodes)))
    np.testing.assert_array_equal(u[:, ops6.fixed_nodes], 0.0)


def test_batch_energy_matches_scalar(ops6, nprng):
    U = nprng.normal(size=(3, ops6.n_nodes))
    M = nprng.uniform(1, 5, (3, ops6.n_nodes))
    E, grad = fw.dirichlet_energy_batch(U, M, ops6)
    for k in range(3):
        assert E[k] == pytest.approx(fw.energy(U[k], M[k], ops6), rel=1e-12)
        np.testing.assert_allclose(grad[k], fw.energy_grad(U[k], M[k], ops6), rtol=1e-12, atol=1e-14)


def test_surrogate_training_schedule_and_errors(ops6, nprng):
    mu = nprng.uniform(1, 5, (12, ops6.n_nodes))
    U = np.stack([fw.solve_pde(m, ops6) for m in mu])
    net = surrogate_backbone((5, 6), channels=4, rng=RngStream(1))
    with pytest.raises(ConfigError):
        fw.surrogate_train(mu, U, None, net, ops6, 1, 1, RngStream(2))
    model, hist = fw.surrogate_train(mu, U, mu, net, ops6, 2, 1, RngStream(2), batch_size=4)
    assert len(hist["sl"]) == 3 and len(hist["ul"]) == 1
    assert np.all(np.isfinite(hist["sl"]))
    sigma, rel = fw.surrogate_error(model, mu, U[:, model.indices])
    assert sigma.shape == (model.n_obs,) and rel > 0


def test_surrogate_round_trip(tmp_path, ops6, nprng):
    net = surrogate_backbone((5, 6), channels=4, rng=RngStream(0), dtype=np.float64)
    model = fw.SurrogateModel(net, ops6, 1.0, 2.0, 0.3)
    model.save(tmp_path / "sur.bin")
    back = fw.SurrogateModel.load(tmp_path / "sur.bin", dtype=np.float64)
    mu = nprng.uniform(1, 5, ops6.n_nodes)
    np.testing.assert_array_equal(back.apply(mu), model.apply(mu))
