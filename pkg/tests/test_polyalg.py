import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from parabolic.homological import split_mean
from parabolic.polyalg import (GradedMapJet, HomogeneousComponent, JetError, PeriodicGradedJet, Series,
                               compose_truncated, differentiate, evaluate, fit_polynomial, flatten, grade,
                               homogeneity_defect, monomials, n_monomials)
from parabolic.threebody import leading_terms


def random_component(rng, degree, n_in, n_out):
    return HomogeneousComponent(degree, n_in, n_out, rng.normal(size=(n_monomials(n_in, degree), n_out)))


def test_identity_evaluation():
    assert np.allclose(evaluate(GradedMapJet.identity(2), [2.0, 3.0]), [2.0, 3.0])


def test_threebody_leading_p_by_hand():
    p, _ = leading_terms()
    # (u, Theta_h) = (1, 1), y = 0
    assert np.allclose(evaluate(p, [1.0, 1.0, 0, 0, 0, 0]), [-0.25, -0.25])
    # with v = 1 the prefactor (u+v)^2 (u-v) kills the Theta_h row
    assert np.allclose(evaluate(p, [1.0, 1.0, 1.0, 0, 0, 0]), [-2.0, 0.0])


def test_exponents_sum_to_degree():
    for n in (1, 2, 3, 6):
        for d in range(6):
            ex = monomials(n, d)
            assert len(ex) == n_monomials(n, d)
            assert np.all(ex.sum(axis=1) == d)
            assert len({tuple(r) for r in ex}) == len(ex)


def test_homogeneity_degree3():
    rng = np.random.default_rng(1)
    h = random_component(rng, 3, 3, 2)
    x = rng.normal(size=(100, 3))
    assert np.allclose(h.evaluate(2 * x), 8 * h.evaluate(x), rtol=1e-13, atol=0)


def test_sampled_homogeneity():
    rule = lambda w: np.stack([np.abs(w[:, 0]) ** 0.5 * np.ones(len(w))], axis=1)
    h = HomogeneousComponent(3, 2, 1, rule=rule, basis="sampled")
    rng = np.random.default_rng(2)
    x = rng.normal(size=(50, 2))
    lam = rng.uniform(0.01, 1, 50)
    assert np.max(homogeneity_defect(h, x, lam)) <= 1e-12


def test_derivative_1d():
    p = grade({(2,): [-1.0]}, 1, 1)
    Dp = differentiate(p)
    x = np.linspace(-1, 1, 7)[:, None]
    assert np.allclose(Dp.evaluate(x)[:, 0], -2 * x[:, 0])


def test_threebody_Dyp_at_y0():
    p, _ = leading_terms()
    rng = np.random.default_rng(3)
    for u, th in rng.uniform(0.1, 1, size=(5, 2)):
        J = p.jacobian(np.array([u, th, 0, 0, 0, 0])).reshape(2, 6)
        assert np.allclose(J[:, 2:], [[-0.75 * u ** 3, 0, 0, 0], [-0.25 * u ** 2 * th, 0, 0, 0]], atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), degree=st.integers(1, 6), n_in=st.integers(1, 4))
def test_euler_identity(seed, degree, n_in):
    rng = np.random.default_rng(seed)
    h = random_component(rng, degree, n_in, 2)
    x = rng.normal(size=(20, n_in))
    J = h.jacobian(x).reshape(20, 2, n_in)
    lhs = np.einsum("pij,pj->pi", J, x)
    rhs = degree * h.evaluate(x)
    assert np.allclose(lhs, rhs, rtol=1e-10, atol=1e-10 * np.max(np.abs(rhs)))


def test_compose_hand_expansions():
    sq = grade({(2,): [1.0]}, 1, 1)
    inner = grade({(1,): [1.0], (2,): [1.0]}, 1, 1)
    c = compose_truncated(sq, inner, 4)
    assert flatten(c).keys() == {(2,), (3,), (4,)}
    assert np.allclose([flatten(c)[(k,)][0] for k in (2, 3, 4)], [1, 2, 1])
    for N in (2, 3, 4):
        F = grade({(1,): [1.0], (N,): [-1.0]}, 1, 1)
        c = flatten(compose_truncated(F, F, 2 * N - 1))
        assert np.isclose(c[(1,)][0], 1) and np.isclose(c[(N,)][0], -2) and np.isclose(c[(2 * N - 1,)][0], N)
        assert all(np.allclose(v, 0) for k, v in c.items() if k[0] not in (1, N, 2 * N - 1))


def test_compose_identity_outer():
    rng = np.random.default_rng(4)
    J = GradedMapJet(2, 2, {d: random_component(rng, d, 2, 2) for d in (1, 2, 3, 5)})
    c = compose_truncated(GradedMapJet.identity(2), J, 3)
    assert c.degrees == [1, 2, 3]
    x = rng.normal(size=(10, 2))
    assert np.allclose(c.evaluate(x), J.truncate(3).evaluate(x))


def test_compose_order_slope():
    rng = np.random.default_rng(5)
    f = GradedMapJet(2, 2, {d: random_component(rng, d, 2, 2) for d in (1, 2, 3)})
    g = GradedMapJet(2, 2, {d: random_component(rng, d, 2, 2) for d in (1, 2)})
    cut = 4
    c = compose_truncated(f, g, cut)
    w = np.array([[0.6, 0.8]])
    r = np.geomspace(1e-2, 1e-1, 8)
    err = [np.max(np.abs(c.evaluate(w * s) - f.evaluate(g.evaluate(w * s)))) for s in r]
    slope = np.polyfit(np.log(r), np.log(err), 1)[0]
    assert slope >= cut + 1 - 0.3


def test_compose_rejects_constant_inner():
    inner = grade({(0,): [1.0], (1,): [1.0]}, 1, 1)
    with pytest.raises(JetError):
        compose_truncated(GradedMapJet.identity(1), inner, 3)


def test_grade_zero_table_and_lowest_degree():
    assert grade({(0, 0): [0.0]}, 2, 1).degrees == []
    from parabolic.threebody import R3BPParams, build_field
    jet, _ = build_field(R3BPParams(), degree=7)
    assert min(jet.degrees) == 4 and max(jet.degrees) <= 7


@settings(max_examples=30, deadline=None)
@given(st.dictionaries(st.tuples(st.integers(0, 3), st.integers(0, 3)),
                       st.floats(-5, 5, allow_nan=False).filter(lambda v: v != 0), max_size=8))
def test_grade_flatten_roundtrip(table):
    tab = {k: [v] for k, v in table.items()}
    back = flatten(grade(tab, 2, 1))
    assert set(back) == set(tab)
    for k, v in tab.items():
        assert np.allclose(back[k], v)


def test_evaluation_is_sum_of_components():
    rng = np.random.default_rng(6)
    comps = {d: random_component(rng, d, 3, 2) for d in (0, 2, 3)}
    J = GradedMapJet(3, 2, comps)
    x = rng.normal(size=(5, 3))
    assert np.allclose(J.evaluate(x), sum(h.evaluate(x) for h in comps.values()))


def test_jet_validation():
    h = random_component(np.random.default_rng(0), 2, 2, 1)
    with pytest.raises(JetError):
        GradedMapJet(2, 1, {3: h})
    with pytest.raises(JetError):
        GradedMapJet(2, 1, {2: h}, max_degree=1)
    with pytest.raises(JetError):
        HomogeneousComponent(2, 2, 1, np.zeros((2, 1)))


def test_json_roundtrip():
    rng = np.random.default_rng(7)
    J = GradedMapJet(2, 3, {d: random_component(rng, d, 2, 3) for d in (1, 4)}, max_degree=5)
    back = GradedMapJet.loads(J.dumps())
    x = rng.normal(size=(4, 2))
    assert back.max_degree == 5 and np.array_equal(back.evaluate(x), J.evaluate(x))


def test_fit_polynomial_recovers_coefficients():
    rng = np.random.default_rng(8)
    h = random_component(rng, 4, 2, 2)
    pts = rng.normal(size=(40, 2))
    coeffs, res = fit_polynomial(pts, h.evaluate(pts), 4)
    assert res < 1e-12 and np.allclose(coeffs, h.coeffs)


def test_series_arithmetic_matches_taylor():
    x = Series.variable(1, 8, 0)
    s = (1 + x).power(-1.0 / 3.0)
    from math import gamma
    expect = [gamma(-1 / 3 + 1) / (gamma(k + 1) * gamma(-1 / 3 - k + 1)) for k in range(9)]
    assert np.allclose(s.c[:9].ravel(), expect)
    assert np.allclose((x.sin() * x.sin() + x.cos() * x.cos()).c.ravel(), [1] + [0] * 8, atol=1e-15)


def periodic(coeffs_fn, n_t=64, period=2 * np.pi):
    t = period * np.arange(n_t) / n_t
    c = coeffs_fn(t)  # (n_mon, n_out, n_t)
    return PeriodicGradedJet(1, 1, {2: HomogeneousComponent(2, 1, 1, c)}, 2, period)


def test_periodic_time_index_wraps():
    J = periodic(lambda t: np.sin(t)[None, None, :])
    a, b = J.at_time_index(3), J.at_time_index(3 + J.n_t)
    assert np.array_equal(a.components[2].coeffs, b.components[2].coeffs)


def test_split_mean_cases():
    J = periodic(lambda t: np.cos(t)[None, None, :])
    mean, osc = split_mean(J)
    assert np.max(np.abs(mean.components[2].coeffs)) < 1e-15
    assert np.allclose(osc.components[2].coeffs, J.components[2].coeffs)
    const = GradedMapJet(1, 1, {2: HomogeneousComponent(2, 1, 1, np.array([[3.0]]))})
    m2, o2 = split_mean(const)
    assert np.allclose(m2.components[2].coeffs, 3.0) and not o2.components
    # trigonometric polynomial: mean is the Fourier constant term
    J = periodic(lambda t: (0.7 + 2 * np.sin(3 * t) - np.cos(5 * t) + 0.3 * np.sin(t) ** 2)[None, None, :])
    mean, osc = split_mean(J)
    assert abs(mean.components[2].coeffs[0, 0] - (0.7 + 0.15)) < 1e-12
    assert abs(osc.components[2].coeffs.mean()) < 1e-12
