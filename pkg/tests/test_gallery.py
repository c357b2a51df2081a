import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from parabolic.gallery import (LossDiffParams, ToyModelParams, differentiability_probe, invariant_rays_check,
                               lossdiff_closed, lossdiff_jets, lossdiff_manifold, toy_flow,
                               toy_iterate, toy_stable_candidate, toy_verdict)


# ---------------------------------------------------------------- toy model

@pytest.mark.parametrize("a,b", [(0.05, 0.75), (0.4, 0.5), (0.2, 0.8)])
def test_toy_flow_solves_ode(a, b):
    prm = ToyModelParams(a, b)
    x1, x2, y, t, e = 0.7, 0.4, 0.3, 2.5, 1e-6
    fp = np.array(toy_flow(prm, t + e, x1, x2, y))
    fm = np.array(toy_flow(prm, t - e, x1, x2, y))
    X1, X2, Y = toy_flow(prm, t, x1, x2, y)
    rhs = np.array([-X1 ** 2, -a * X1 * X2, b * X1 * Y + X2 ** 3])
    assert np.allclose((fp - fm) / (2 * e), rhs, rtol=1e-7)
    assert np.allclose(toy_flow(prm, 0.0, x1, x2, y), (x1, x2, y))


def test_toy_flow_resonant_branch():
    # b + 3a = 1 uses the logarithmic integral; compare with a nearby parameter
    X = toy_flow(ToyModelParams(0.1, 0.7), 3.0, 0.5, 0.5, 0.1)
    Y = toy_flow(ToyModelParams(0.1, 0.7 + 1e-7), 3.0, 0.5, 0.5, 0.1)
    assert np.allclose(X, Y, rtol=1e-6)


def test_toy_direct_iteration_matches_closed_form():
    prm = ToyModelParams(0.05, 0.75)
    d = toy_iterate(prm, (1.5, 1.0), 0.2, n_max=2000)
    c = toy_iterate(prm, (1.5, 1.0), 0.2, n_max=2000, closed_form=True)
    assert np.max(np.abs(d.x1 - c.x1)) <= 1e-14
    assert np.max(np.abs(d.y - c.y) / np.abs(c.y)) <= 1e-12


def test_toy_no_stable_manifold():
    v = toy_verdict(ToyModelParams(0.05, 0.75))
    assert v.no_stable_manifold
    assert max(v.exceeded) < 1000


def test_toy_unique_bounded_orbit_when_c_above_one():
    prm = ToyModelParams(0.4, 0.5)
    v = toy_verdict(prm)
    assert v.bounded.count(True) == 1 and v.bounded[10]
    assert np.isclose(v.y_star, toy_stable_candidate(prm, 1.5, 1.0, quadrature=False), rtol=1e-10)


def test_toy_params_validation():
    with pytest.raises(ValueError):
        ToyModelParams(0.0, 0.5)
    with pytest.raises(ValueError):
        toy_iterate(ToyModelParams(0.1, 0.5), (-1.0, 0.0), 0.0, n_max=5)


# ------------------------------------------------------ loss of differentiability

def test_lossdiff_jets_polar_form():
    prm = LossDiffParams()
    P, Q, G = lossdiff_jets(prm)
    r, th = 0.3, 0.7
    x = np.array([r * np.cos(th), r * np.sin(th), 0.0])
    v = P.evaluate(x[None])[0]
    rdot = (x[0] * v[0] + x[1] * v[1]) / r
    thdot = (x[0] * v[1] - x[1] * v[0]) / r ** 2
    assert np.isclose(rdot, -prm.a * r ** 5)
    assert np.isclose(thdot, r ** 4 * np.sin(4 * th))
    xy = x.copy()
    xy[2] = 1.0
    assert np.isclose(Q.evaluate(xy[None])[0, 0], prm.b * r ** 4)
    assert np.isclose(G.evaluate(x[None])[0, 0], r ** 6 * np.sin(4 * th))


@settings(max_examples=30, deadline=None)
@given(st.floats(0.05, 1.9), st.floats(0.01, 0.2))
def test_lossdiff_quadrature_matches_closed_form(ratio, x2):
    # ratio = x1 / x2 with nu = 0.5, so |x1| <= 2 x2
    q, c = lossdiff_manifold(LossDiffParams(), (ratio * x2, x2))
    assert abs(q - c) <= 1e-12 * x2 ** 2 + 1e-9 * abs(c)


def test_lossdiff_solves_invariance_equation():
    prm = LossDiffParams()
    P, Q, G = lossdiff_jets(prm)
    e = 1e-6
    for x1, x2 in [(0.05, 0.1), (-0.08, 0.1), (0.15, 0.12)]:
        h = lossdiff_closed(prm, x1, x2)
        dh = np.array([(lossdiff_closed(prm, x1 + e, x2) - lossdiff_closed(prm, x1 - e, x2)) / (2 * e),
                       (lossdiff_closed(prm, x1, x2 + e) - lossdiff_closed(prm, x1, x2 - e)) / (2 * e)])
        p = P.evaluate(np.array([[x1, x2, 0.0]]))[0]
        q1 = Q.evaluate(np.array([[x1, x2, 1.0]]))[0, 0]
        g = G.evaluate(np.array([[x1, x2, 0.0]]))[0, 0]
        assert abs(dh @ p - (q1 * h + g)) <= 1e-8 * (abs(q1 * h) + abs(g))


def test_lossdiff_parity_and_rays():
    prm = LossDiffParams()
    assert invariant_rays_check(prm) <= 1e-15
    for x1, x2 in [(0.03, 0.1), (0.12, 0.07)]:
        assert np.isclose(lossdiff_closed(prm, -x1, x2), -lossdiff_closed(prm, x1, x2), rtol=1e-12)


def test_lossdiff_quadrature_rejects_outside():
    with pytest.raises(ValueError):
        lossdiff_manifold(LossDiffParams(), (0.5, 0.1))


def test_differentiability_probe():
    prm = LossDiffParams()
    below = differentiability_probe(prm, derivative_order=2 * prm.m - 2)
    at = differentiability_probe(prm)
    control = differentiability_probe(prm, polynomial_only=True)
    assert below.bounded
    assert at.order == 7 and at.increasing and not at.bounded
    # growth is logarithmic in x1: linear in |log x1| with a nonzero slope
    assert 1.0 < at.log_slope < 4.0
    assert control.bounded
