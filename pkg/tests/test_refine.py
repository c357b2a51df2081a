import numpy as np
import pytest

from parabolic.refine import (DomainError, ManufacturedSystem, SolverConfig, apply_L0, invariance_residual,
                              operator_F, operator_S0, orbit_grid, poincare_map, product_bound_check,
                              ring_seeds, run_manufactured, scale_y, verify_invariance)


@pytest.fixture(scope="module")
def small():
    ms = ManufacturedSystem()
    sysm = ms.system(4)
    seeds = ring_seeds(sysm.R, np.array([[1.0]]), 0.1, 3)
    return ms, sysm, orbit_grid(sysm.R, seeds, 40, 10, sysm.weight_K, 1)


def test_scale_y_identity_and_conjugacy():
    ms = ManufacturedSystem()
    sysm = ms.system(4)
    z = np.array([[0.03, 0.02], [0.01, -0.05]])
    Fs, Ps, Ks = scale_y(sysm.F, sysm.P, sysm.K_le, 1, 1.0)
    assert np.array_equal(Fs(z), sysm.F(z))
    assert np.allclose(Ps.evaluate(z), sysm.P.evaluate(z), rtol=0, atol=1e-15)
    delta = 0.25
    Fs, Ps, Ks = scale_y(sysm.F, sysm.P, sysm.K_le, 1, delta)
    S = np.array([1.0, delta])
    assert np.allclose(Fs(z), sysm.F(z * S) / S, rtol=1e-14)
    assert np.allclose(Ps.evaluate(z), sysm.P.evaluate(z * S) / S, rtol=1e-12)
    x = z[:, :1]
    assert np.allclose(Ks.evaluate(x), sysm.K_le.evaluate(x) / S)
    with pytest.raises(ValueError):
        scale_y(sysm.F, sysm.P, sysm.K_le, 1, 0.0)


def test_manufactured_pair_is_exact():
    ms = ManufacturedSystem()
    R = ms.system(4).R
    x = np.linspace(1e-3, 0.05, 20)[:, None]
    out = verify_invariance(ms.F_points, ms.K_exact, R.evaluate, x)
    assert out["max"] <= 1e-16


def test_taylor_jet_matches_map():
    ms = ManufacturedSystem()
    P = ms.taylor(12)
    z = np.array([[0.01, 0.02], [-0.02, 0.01]])
    assert np.max(np.abs(P.evaluate(z) - ms.F_points(z))) <= 1e-16


def test_defect_starts_at_weight(small):
    _, sysm, _ = small
    assert sysm.weight_T == sysm.K_le.max_degree + sysm.N
    sysm.defect_jet()
    assert sysm.defect_cleaned <= 1e-14


def test_S0_matches_brute_force(small):
    _, sysm, grid = small
    rng = np.random.default_rng(0)
    T = rng.normal(size=grid.values.shape) * np.linalg.norm(grid.points, axis=-1)[..., None] ** sysm.weight_T
    K = operator_S0(sysm, grid, T).values
    pts = grid.points.reshape(-1, 1)
    S, L = grid.points.shape[:2]
    A = sysm.DP(sysm.K_le.evaluate(pts)).reshape(S, L, 2, 2)
    s, i = 1, 5
    ref = np.zeros(2)
    prod = np.eye(2)
    for k in range(i, L):
        prod = prod @ np.linalg.inv(A[s, k])
        ref += prod @ T[s, k]
    assert np.allclose(K[s, i], ref, rtol=1e-12, atol=0)
    # S0 is a right inverse of L0 away from the truncation point
    L0 = apply_L0(sysm, grid, K)
    assert np.allclose(L0[:, :-1], T[:, :-1], rtol=1e-10, atol=1e-30)


def test_exact_correction_has_tiny_residual(small):
    ms, sysm, grid = small
    pts = grid.points.reshape(-1, 1)
    exact = ms.K_jet(40).truncate(40, lowest=5).evaluate(pts).reshape(grid.values.shape)
    res = invariance_residual(sysm, grid, exact)
    r = np.linalg.norm(grid.points, axis=-1)
    w = np.linalg.norm(res[:, :-1], axis=-1) / r[:, :-1] ** sysm.weight_T
    assert np.max(w) <= 1e-10
    zero = invariance_residual(sysm, grid, np.zeros_like(exact))
    assert np.max(np.linalg.norm(zero[:, :-1], axis=-1) / r[:, :-1] ** sysm.weight_T) > 1e-3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_operator_F_rejects_nonfinite(small):
    _, sysm, grid = small
    bad = grid.values.copy()
    bad[0, 0, 0] = np.inf
    with pytest.raises(DomainError):
        operator_F(sysm, grid, bad)


def test_solver_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(delta=0.0)
    with pytest.raises(ValueError):
        SolverConfig(tol=0.0)


def test_poincare_map_oracles():
    F = poincare_map(lambda t, z: np.zeros_like(z), 2.0)
    z = np.array([[0.1, -0.2]])
    assert np.array_equal(F(z), z)
    T = 3.0
    F = poincare_map(lambda t, z: np.array([-z[0] ** 2, 0.0]), T)
    x = np.array([[0.2, 0.5], [0.05, 1.0]])
    ref = np.stack([x[:, 0] / (1 + T * x[:, 0]), x[:, 1]], axis=1)
    assert np.max(np.abs(F(x) - ref)) <= 1e-12


def test_manufactured_refinement(manufactured_run):
    rep = manufactured_run.report
    assert rep.converged
    assert rep.weighted_residual <= 1e-9
    assert manufactured_run.exact_error <= 1e-8
    assert rep.contraction < 0.5


def test_restart_from_perturbed_initial(manufactured_run):
    g = manufactured_run.grid
    r = np.linalg.norm(g.points, axis=-1)[..., None]
    init = 1e-3 * np.random.default_rng(3).uniform(-1, 1, g.values.shape) * r ** g.weight_exponent
    again = run_manufactured(rho=0.05, initial=init)
    m = manufactured_run.K.active & again.K.active
    diff = np.linalg.norm(again.K.values - manufactured_run.K.values, axis=-1)[m] / r[..., 0][m] ** g.weight_exponent
    assert np.max(diff) <= 1e-8


def test_refined_graph_is_regular(manufactured_run):
    K = manufactured_run.K
    x = K.points[..., 0].ravel()
    order = np.argsort(x)
    kx = manufactured_run.system.K_le.evaluate(x[:, None])[:, 0] + K.values[..., 0].ravel()
    # D K_x > 0 on the domain: the x-component is strictly increasing
    assert np.all(np.diff(kx[order]) > 0)


def test_product_bound(manufactured_run):
    s, g = manufactured_run.system, manufactured_run.grid
    assert product_bound_check(s, g, kappa_a=1.0, B_hat=2.2, u=20.0)["passed"]
    assert not product_bound_check(s, g, kappa_a=1.0, B_hat=0.5, u=20.0)["passed"]
