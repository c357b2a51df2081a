"""Elliptic spatial restricted three-body problem near parabolic infinity.

Coordinates: spherical position (r, alpha, theta) with momenta (R, A, Theta),
McGehee r = 2/z^2, local variables theta_h = theta/z, Theta_h = z Theta/theta,
alpha_h = (alpha - alpha0 + A R)/z, A_h = (A - A0)/z and u = (z+R)/2,
v = (z-R)/2.  Phase variables are ordered x = (u, Theta_h),
y = (v, alpha_h, A_h, theta_h).  Every right-hand side is assembled from
``Series`` arithmetic with explicit powers of z factored out, so the field
can be composed with a jet exactly to any degree.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from .homological import FlowOracle, InvarianceProblem, State, invariance_error, solve_to_order
from .polyalg import GradedMapJet, PeriodicGradedJet, Series, monomials

N_X, N_Y = 2, 4
VAR_NAMES = ("u", "Theta_h", "v", "alpha_h", "A_h", "theta_h")


class ChartError(ValueError):
    """Point outside the local chart of the coordinate chain."""


@dataclass
class R3BPParams:
    mu: float = 0.01
    e: float = 0.05
    alpha0: float = 0.0
    A0: float = 1.0
    order: int = 10
    n_t: int = 64
    perturbation: object | None = None

    def __post_init__(self):
        if not 0.0 < self.mu < 1.0:
            raise ValueError("mass ratio must lie in (0, 1)")
        if not 0.0 <= self.e < 1.0:
            raise ValueError("eccentricity must lie in [0, 1)")
        if self.n_t < 4:
            raise ValueError("time grid too coarse")


def true_anomaly(times: np.ndarray, e: float) -> np.ndarray:
    """f(t) from df/dt = (1 + e cos f)^2 / (1 - e^2)^{3/2}, f(0) = 0."""
    times = np.asarray(times, dtype=float)
    if e == 0.0:
        return times.copy()
    k = (1.0 - e * e) ** -1.5
    sol = solve_ivp(lambda t, f: k * (1.0 + e * np.cos(f)) ** 2, (0.0, float(times[-1]) + 1e-12), [0.0],
                    method="DOP853", rtol=1e-13, atol=1e-14, t_eval=times)
    return sol.y[0]


def primaries_distance(f: np.ndarray, e: float) -> np.ndarray:
    return (1.0 - e * e) / (1.0 + e * np.cos(f))


def two_center_potential(r, alpha, theta, f, rho, mu):
    """(1-mu)/d1 + mu/d2 for primaries at distance mu*rho and (1-mu)*rho in direction +-f."""
    C = np.cos(alpha - f) * np.cos(theta)
    d1 = np.sqrt(r * r - 2 * mu * rho * r * C + (mu * rho) ** 2)
    d2 = np.sqrt(r * r + 2 * (1 - mu) * rho * r * C + ((1 - mu) * rho) ** 2)
    return (1 - mu) / d1 + mu / d2


def potential_expansion(r, alpha, theta, f, rho, mu):
    """Monopole plus quadrupole: 1/r - mu(1-mu)/2 (1 - 3 cos^2(alpha-f) cos^2 theta) rho^2 / r^3."""
    C = np.cos(alpha - f) * np.cos(theta)
    return 1.0 / r - 0.5 * mu * (1 - mu) * (1.0 - 3.0 * C * C) * rho * rho / r ** 3


class ThreeBodyField:
    """Time-periodic vector field in local variables, composable with series."""

    def __init__(self, params: R3BPParams):
        self.params = params
        self.period = 2 * np.pi
        self.n_t = params.n_t
        self.times = self.period * np.arange(self.n_t) / self.n_t
        self.f = true_anomaly(self.times, params.e)
        self.rho = primaries_distance(self.f, params.e)

    def compose(self, args):
        """X(args, t) on the time grid; args are series for (u, Theta_h, v, alpha_h, A_h, theta_h)."""
        mu, A0, a0 = self.params.mu, self.params.A0, self.params.alpha0
        u, Th, v, ah, Ah, th = args
        n, D = u.n, u.D
        for s in args:
            if np.any(s.c[0] != 0.0):
                raise ChartError("the field is expanded at the parabolic point; arguments must vanish there")
        one = Series.constant(n, D, np.ones(self.n_t))
        z = u + v
        R = u - v
        z2 = z * z
        z3 = z2 * z
        theta = z * th
        A = A0 + z * Ah
        alpha = a0 - A * R + z * ah
        Theta = th * Th
        cth = theta.cos()
        sec2 = (cth * cth).reciprocal()
        sec3 = sec2 / cth
        phase = alpha - self.f
        cph, sph = phase.cos(), phase.sin()
        C = cph * cth
        w = z2 * 0.5
        rw = w * self.rho
        S1 = (one - rw * C * (2 * mu) + rw * rw * (mu * mu)).power(-1.5)
        S2 = (one + rw * C * (2 * (1 - mu)) + rw * rw * ((1 - mu) ** 2)).power(-1.5)
        # R' = z^4 BR, A'/z = z^3 BA, Theta' = sin(theta) BT
        BR = (A * A * sec2 * z2 + Theta * Theta * z2) * 0.125 \
            + (S1 * (one - rw * C * mu) * (-(1 - mu)) - S2 * (one + rw * C * (1 - mu)) * mu) * 0.25
        dS = S1 - S2
        BA = dS * (-sph * cth) * self.rho * (0.25 * mu * (1 - mu))
        BT = (A * A * sec3 * (-0.25) - dS * cph * self.rho * (0.25 * mu * (1 - mu))) * (z2 * z2)
        zdot = z3 * R * (-0.25)
        Rdot = z3 * z * BR
        du = (zdot + Rdot) * 0.5
        dv = (zdot - Rdot) * 0.5
        q4 = z2 * R * 0.25
        dah = z3 * (A * sec2 * 0.25 + A * BR + R * BA) + q4 * ah
        dAh = z3 * BA + q4 * Ah
        dth = z3 * Theta * 0.25 + q4 * th
        dTh = z * theta.sinc() * BT - Th * (z3 * Th * 0.25 + q4)
        return [du, dTh, dv, dah, dAh, dth]

    def evaluate(self, points: np.ndarray, D: int = 12) -> np.ndarray:
        """Field values at points (P, 6) on the time grid via a degree-D expansion at each point."""
        points = np.atleast_2d(points)
        out = []
        for pt in points:
            args = [Series.variable(1, D, 0) * float(c) for c in pt]
            vals = self.compose(args)
            out.append(np.stack([np.broadcast_to(s.c.sum(axis=0), (self.n_t,)) for s in vals]))
        return np.array(out)


def leading_terms() -> tuple:
    """p and q (degree 4) as jets on R^6 in the order (u, Theta_h, v, alpha_h, A_h, theta_h)."""
    D = 4
    X = [Series.variable(6, D, i) for i in range(6)]
    u, Th, v, ah, Ah, th = X
    s = u + v
    s2 = s * s
    d = u - v
    p = [s2 * s * u * (-0.25), s2 * d * Th * (-0.25)]
    q = [s2 * s * v * 0.25, s2 * d * ah * 0.25, s2 * d * Ah * 0.25, s2 * d * th * 0.25]
    pj = GradedMapJet.from_series(p, lo=4, hi=4)
    qj = GradedMapJet.from_series(q, lo=4, hi=4)
    return pj, qj


def build_field(params: R3BPParams, degree: int = 7) -> tuple:
    """Graded jet of the field on R^6 up to ``degree`` plus the exact evaluator.

    The jet has time-sampled coefficients (n_t samples over one period).
    """
    fld = ThreeBodyField(params)
    X = [Series.variable(6, degree, i) for i in range(6)]
    vals = fld.compose(X)
    jet = GradedMapJet.from_series(vals, lo=0, hi=degree)
    comps = {d: h for d, h in jet.components.items() if np.max(np.abs(h.coeffs)) > 1e-14}
    return PeriodicGradedJet(6, 6, comps, degree, fld.period), fld


def closed_oracle() -> FlowOracle:
    """Explicit flow of x' = p(x, 0) and the inverse fundamental matrices."""

    def w_of(t, x):
        return 1.0 + 0.75 * t * x[:, 0] ** 3

    def phi(t, x):
        return w_of(t, x)[:, None] ** (-1.0 / 3.0) * x

    def M1inv(t, x):
        w = w_of(t, x)
        out = np.zeros((len(x), 2, 2))
        out[:, 0, 0] = w ** (4.0 / 3.0)
        out[:, 1, 0] = 0.75 * t * x[:, 0] ** 2 * x[:, 1] * w ** (1.0 / 3.0)
        out[:, 1, 1] = w ** (1.0 / 3.0)
        return out

    def M2inv(t, x):
        w = w_of(t, x)
        return w[:, None, None] ** (-1.0 / 3.0) * np.eye(4)[None]

    def rate(x):
        if np.any(x[:, 0] <= 0):
            raise ChartError("the flow integrals need u > 0")
        return x[:, 0] ** 3

    def gamma(kind, d):
        return {"x": (d - 4) / 3.0, "y": (d + 1) / 3.0, "plain": d / 3.0}[kind]

    return FlowOracle(n=2, m=4, N=4, mode="closed", phi_rule=phi, M1inv_rule=M1inv, M2inv_rule=M2inv,
                      rate_rule=rate, gamma_rule=gamma)


def numeric_oracle(rtol: float = 1e-12, s_max: float = 1e14) -> FlowOracle:
    p, q = leading_terms()
    orc = FlowOracle.numeric(p, q, 2, rtol=rtol, s_max=s_max)
    orc.rate_rule = lambda x: x[:, 0] ** 3
    return orc


def detection_directions(count: int = 80, half_angle: float = 1.2) -> np.ndarray:
    """Unit vectors (cos a, sin a) at Chebyshev angles in [-half_angle, half_angle]."""
    k = np.arange(count)
    a = half_angle * np.cos(np.pi * (k + 0.5) / count)
    return np.stack([np.cos(a), np.sin(a)], axis=1)


def make_problem(params: R3BPParams, oracle: FlowOracle | None = None) -> InvarianceProblem:
    p, q = leading_terms()
    return InvarianceProblem("flow", N_X, N_Y, ThreeBodyField(params), p, q,
                             oracle if oracle is not None else closed_oracle(), detection_directions(),
                             period=2 * np.pi, n_t=params.n_t)


# ---------------------------------------------------------------------------
# closed-form kernels (substitution s = t u^3)
# ---------------------------------------------------------------------------

def kernel_M2(j1: int, j2: int) -> float:
    """Integral from infinity to 0 of M2^-1 (u^j1 Th^j2)(phi) dt = c u^j1 Th^j2 / u^3."""
    d = j1 + j2
    if d < 3:
        raise ValueError("kernel diverges for total degree < 3")
    return -4.0 / (d - 2)


def kernel_M1(j1: int, j2: int) -> tuple:
    """M1^-1 kernels: e1 column gives (c1 Z/u^3, c2 Z Th/u^4); e2 column gives c3 Z/u^3."""
    d = j1 + j2
    c1 = -4.0 / (d - 7) if d >= 8 else np.nan
    c2 = -12.0 / ((d - 4) * (d - 7)) if d >= 8 else np.nan
    c3 = -4.0 / (d - 4) if d >= 5 else np.nan
    return c1, c2, c3


# ---------------------------------------------------------------------------
# pipeline and structure
# ---------------------------------------------------------------------------

@dataclass
class R3BPJets:
    params: R3BPParams
    state: State
    steps: list
    K: dict = field(default_factory=dict)
    K_tilde: dict = field(default_factory=dict)
    Y: dict = field(default_factory=dict)
    polynomial: dict = field(default_factory=dict)


ELL_STAR = 7


def compute_jets(params: R3BPParams, oracle: FlowOracle | None = None, order: int | None = None,
                 ell_star: int = ELL_STAR) -> R3BPJets:
    """Flow-case solver: free mode (K_x = 0) for j <= ell_star - 3, integral mode (Y = 0) above."""
    order = params.order if order is None else order
    if order > 12:
        raise ValueError("order above the configured maximum of 12")
    prob = make_problem(params, oracle)
    state, steps = solve_to_order(prob, order, "R_simplest", ell_star)
    jets = R3BPJets(params, state, steps)
    for s in steps:
        jets.K[s.j] = (s.K_x, s.K_y)
        jets.K_tilde[s.j + 3] = (s.K_tilde_x, s.K_tilde_y)
        jets.Y[s.j + 3] = s.R_term
        jets.polynomial[s.j] = bool(s.info["x"]["polynomial"] and s.info["y"]["polynomial"])
    return jets


def forbidden_max(coeffs: np.ndarray, degree: int, k: int, n_in: int = 2) -> float:
    """Largest |coefficient| on monomials with u-exponent < k (u is variable 0)."""
    if coeffs is None:
        return 0.0
    exps = monomials(n_in, degree)
    mask = exps[:, 0] < k
    if not mask.any():
        return 0.0
    return float(np.max(np.abs(coeffs[mask]), initial=0.0))


@dataclass
class StructureReport:
    checks: dict
    stray: dict
    tol: float
    passed: bool

    def failures(self) -> list:
        return [k for k, v in self.checks.items() if not v]


def structure_check(jets: R3BPJets, tol: float = 1e-10) -> StructureReport:
    """Coefficient-level divisibility relations of the three-body jets.

    K^j = u^2 O_{j-2}; (K^j_u, K^j_v) = u^3 O_{j-3}; K~^{j+3} = u^5 O;
    (K~_u, K~_v) = u^6 O_{j-2}; K_x^j = 0 for 2 <= j <= 7; Y^j = 0 for j >= 8.
    """
    checks, stray = {}, {}

    def record(name, value):
        stray[name] = value
        checks[name] = value <= tol

    for j, (Kx, Ky) in jets.K.items():
        if not (Kx.is_polynomial and Ky.is_polynomial):
            checks[f"K^{j} polynomial"] = False
            continue
        full = np.concatenate([Kx.coeffs, Ky.coeffs], axis=1)
        record(f"K^{j} = u^2 O", forbidden_max(full, j, 2))
        uv = full[:, [0, 2]]
        record(f"K^{j}_uv = u^3 O", forbidden_max(uv, j, 3))
        if 2 <= j <= 7:
            record(f"K_x^{j} = 0", float(np.max(np.abs(Kx.coeffs), initial=0.0)))
    for d, (Ktx, Kty) in jets.K_tilde.items():
        if Ktx is None:
            continue
        full = np.concatenate([Ktx.coeffs, Kty.coeffs], axis=1)
        record(f"K~^{d} = u^5 O", forbidden_max(full, d, 5))
        record(f"K~^{d}_uv = u^6 O", forbidden_max(full[:, [0, 2]], d, 6))
    for d, Y in jets.Y.items():
        if d >= 8:
            record(f"Y^{d} = 0", float(np.max(np.abs(Y.coeffs), initial=0.0)))
    for j, ok in jets.polynomial.items():
        checks[f"order {j} polynomial"] = ok
    return StructureReport(checks, stray, tol, all(checks.values()))


def error_factorization(jets: R3BPJets, extra: int = 1) -> dict:
    """Max forbidden coefficients of the current invariance error: E = u^5 O and E_{u,v} = u^6 O."""
    prob = make_problem(jets.params)
    st = jets.state
    D = st.j + 3 + extra
    E = invariance_error(prob, st, D)
    out = {}
    for d in range(st.j + 4, D + 1):
        allc = np.stack([s.homogeneous(d) for s in E], axis=1)
        out[d] = (forbidden_max(allc, d, 5), forbidden_max(allc[:, [0, 2]], d, 6))
    return out


def invariance_residual(jets: R3BPJets, radii=None) -> dict:
    """Radial log-log slopes of the differential invariance error after the last step.

    Delegates to ``residual_scan``; ``values``/``slope`` summarize the worse
    of the x- and y-parts.
    """
    from .homological import residual_scan
    prob = make_problem(jets.params)
    scan = residual_scan(prob, jets.state, radii=radii)
    worse = "x" if scan["x"]["slope"] <= scan["y"]["slope"] else "y"
    return {"radii": scan["radii"], "values": scan[worse]["values"], "slope": scan[worse]["slope"],
            "expected": scan[worse]["expected"], "x": scan["x"], "y": scan["y"], "cleaned": scan["cleaned"]}


def threebody_cone(slope: float = 1.0):
    """Sector {|Theta_h| <= slope * u} in the x-plane."""
    from .domain import ConeSpec
    return ConeSpec.halfspaces([(slope, -1.0), (slope, 1.0)])


def leading_map(x: np.ndarray) -> np.ndarray:
    """x -> x + p(x, 0) restricted to the x-plane; (P, 2) arrays."""
    from .polyalg import evaluate
    p, _ = leading_terms()
    x = np.atleast_2d(np.asarray(x, dtype=float))
    X = np.zeros((len(x), 6))
    X[:, :2] = x
    return x + evaluate(p, X)
