"""Order-by-order solvers for the approximate invariance equation.

Map case: F o K - K o R is cancelled degree by degree; flow case:
X(K, t) - DK Y - d_t K, with time-periodic coefficients split into mean
and oscillatory parts.  Polynomial jets are handled exactly through
``Series`` composition; integral formulas are evaluated by quadrature
along the flow of the leading term and then tested for polynomiality.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import quad_vec, solve_ivp

from .fitting import loglog_slope
from .polyalg import (GradedMapJet, HomogeneousComponent, JetError, PeriodicGradedJet, Series,
                      fit_polynomial, n_monomials, tables)


class DivergenceError(ValueError):
    """An improper integral of the homological formulas does not converge."""


class SingularityError(ValueError):
    """D_y q(x, 0) is not invertible where it must be."""


class ConvergenceError(ValueError):
    """Integral mode requested below its convergence threshold."""


# ---------------------------------------------------------------------------
# improper quadrature
# ---------------------------------------------------------------------------

@dataclass
class QuadratureResult:
    value: np.ndarray
    error: float
    evaluations: int


def integrate_halfline(g: Callable[[float], np.ndarray], gamma: float, split: float = 1.0,
                       abs_tol: float = 1e-11, rel_tol: float = 1e-12, s_max: float | None = None,
                       limit: int = 4000) -> QuadratureResult:
    """Integral of g over [0, inf) for g(s) ~ C s^-gamma at infinity.

    The head [0, split] is integrated directly.  The tail uses
    s = split * tau^(-1/(gamma-1)), which turns the power-law decay into a
    bounded integrand on (0, 1].  When ``s_max`` is given the integrand is
    only trusted up to s_max: [split, s_max] is integrated in log s and the
    rest is the analytic power-law tail C s_max^(1-gamma) / (gamma-1).
    """
    if not gamma > 1.0:
        raise DivergenceError(f"integrand decays like s^-{gamma:.4g}; the improper integral diverges")
    count = [0]

    def head(s):
        count[0] += 1
        return g(s)

    v0, e0 = quad_vec(head, 0.0, split, epsabs=abs_tol, epsrel=rel_tol, norm="max", limit=limit)
    if s_max is None:
        k = 1.0 / (gamma - 1.0)

        def tail(tau):
            count[0] += 1
            if tau <= 0.0:
                return np.zeros_like(v0)
            s = split * tau ** (-k)
            return g(s) * split * k * tau ** (-k - 1.0)

        v1, e1 = quad_vec(tail, 0.0, 1.0, epsabs=abs_tol, epsrel=rel_tol, norm="max", limit=limit)
        return QuadratureResult(v0 + v1, float(e0 + e1), count[0])

    def logpart(lg):
        count[0] += 1
        s = math.exp(lg)
        return g(s) * s

    v1, e1 = quad_vec(logpart, math.log(split), math.log(s_max), epsabs=abs_tol, epsrel=rel_tol, norm="max",
                      limit=limit)
    gs = g(s_max)
    tail = gs * s_max / (gamma - 1.0)
    return QuadratureResult(v0 + v1 + tail, float(e0 + e1 + np.max(np.abs(tail)) * 1e-3), count[0])


def improper_quadrature(integrand: Callable[[float], np.ndarray], x, gamma: float, N: int = 2,
                        abs_tol: float = 1e-11, rate: float | None = None) -> np.ndarray:
    """Integral from infinity to 0 of integrand(t) dt.

    Parameters
    ----------
    integrand : callable
        t -> array; must decay like (1 + c t ||x||^{N-1})^-gamma.
    x : array
        Base point, used only for the time scale s = t ||x||^{N-1}.
    gamma : float
        Decay exponent; gamma <= 1 raises ``DivergenceError``.
    rate : float, optional
        Overrides the time scale ||x||^{N-1}.

    Returns
    -------
    numpy.ndarray
        The value of the integral (note the orientation: minus the
        integral over [0, inf)).
    """
    x = np.asarray(x, dtype=float)
    c = float(np.linalg.norm(x) ** (N - 1)) if rate is None else float(rate)
    if c <= 0:
        raise ValueError("time scale must be positive")
    res = integrate_halfline(lambda s: np.atleast_1d(np.asarray(integrand(s / c), dtype=float)) / c, gamma,
                             abs_tol=abs_tol)
    return -res.value


# ---------------------------------------------------------------------------
# flow oracle
# ---------------------------------------------------------------------------

def _restrict_y0(jet: GradedMapJet, x: np.ndarray, n: int) -> np.ndarray:
    x = np.atleast_2d(x)
    if jet.n_in == n:
        return jet.evaluate(x)
    return jet.evaluate(np.concatenate([x, np.zeros((len(x), jet.n_in - n))], axis=1))


@dataclass
class FlowOracle:
    """Flow of x' = p(x, 0) and inverse fundamental matrices along it.

    Closed mode uses the supplied rules; numeric mode integrates the base
    flow jointly with the inverse variational equations
    N1' = -N1 D_x p(phi, 0) and N2' = -N2 D_y q(phi, 0) in logarithmic time
    with an order-8 Runge-Kutta method at rtol 1e-12.

    Rules take t of shape (P,) and x of shape (P, n) and return arrays of
    shape (P, n), (P, n, n) and (P, m, m).
    """

    n: int
    m: int
    N: int
    mode: str = "closed"
    phi_rule: Callable | None = None
    M1inv_rule: Callable | None = None
    M2inv_rule: Callable | None = None
    rate_rule: Callable | None = None
    gamma_rule: Callable | None = None
    p: GradedMapJet | None = None
    q: GradedMapJet | None = None
    rtol: float = 1e-12
    s_max: float = 1e14
    _cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def numeric(cls, p: GradedMapJet, q: GradedMapJet | None, n: int, rtol: float = 1e-12,
                s_max: float = 1e14) -> "FlowOracle":
        N = p.lowest_degree()
        m = q.n_out if q is not None else 0
        return cls(n=n, m=m, N=N, mode="numeric", p=p, q=q, rtol=rtol, s_max=s_max)

    # evaluation ----------------------------------------------------------
    def rate(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        if self.rate_rule is not None:
            return np.asarray(self.rate_rule(x), dtype=float)
        return np.linalg.norm(x, axis=1) ** (self.N - 1)

    def phi(self, t, x) -> np.ndarray:
        if self.mode == "closed":
            return self.phi_rule(np.asarray(t, dtype=float), np.atleast_2d(x))
        return self._numeric(t, x)[0]

    def M1inv(self, t, x) -> np.ndarray:
        if self.mode == "closed":
            return self.M1inv_rule(np.asarray(t, dtype=float), np.atleast_2d(x))
        return self._numeric(t, x)[1]

    def M2inv(self, t, x) -> np.ndarray:
        if self.mode == "closed":
            if self.M2inv_rule is None:
                P = np.atleast_2d(x).shape[0]
                return np.broadcast_to(np.eye(self.m), (P, self.m, self.m))
            return self.M2inv_rule(np.asarray(t, dtype=float), np.atleast_2d(x))
        return self._numeric(t, x)[2]

    def M1(self, t, x) -> np.ndarray:
        return np.linalg.inv(self.M1inv(t, x))

    def M2(self, t, x) -> np.ndarray:
        return np.linalg.inv(self.M2inv(t, x))

    # numeric backend ----------------------------------------------------------
    def _rhs_factory(self, c: float):
        n, m = self.n, self.m
        Dp = self.p.differentiate()
        Dq = self.q.differentiate() if (self.q is not None and m > 0) else None

        def rhs(sig, z):
            dt = math.exp(sig) / c
            x = z[:n]
            J = _restrict_y0(Dp, x[None, :], n)[0].reshape(n, self.p.n_in)[:, :n]
            out = np.empty_like(z)
            out[:n] = _restrict_y0(self.p, x[None, :], n)[0]
            N1 = z[n:n + n * n].reshape(n, n)
            out[n:n + n * n] = -(N1 @ J).ravel()
            if Dq is not None:
                Jq = _restrict_y0(Dq, x[None, :], n)[0].reshape(m, self.q.n_in)[:, n:]
                N2 = z[n + n * n:].reshape(m, m)
                out[n + n * n:] = -(N2 @ Jq).ravel()
            return out * dt

        return rhs

    def _solution(self, x: np.ndarray):
        key = x.tobytes()
        sol = self._cache.get(key)
        if sol is None:
            c = float(self.rate(x[None, :])[0])
            z0 = np.concatenate([x, np.eye(self.n).ravel(), np.eye(self.m).ravel()])
            sig_max = math.log1p(self.s_max)
            sol = solve_ivp(self._rhs_factory(c), (0.0, sig_max), z0, method="DOP853", rtol=self.rtol,
                            atol=self.rtol * 1e-6, dense_output=True)
            if not sol.success:
                raise RuntimeError(f"variational integration failed at x={x.tolist()}: {sol.message}")
            sol = (c, sol.sol, sig_max)
            self._cache[key] = sol
        return sol

    def _numeric(self, t, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        t = np.broadcast_to(np.asarray(t, dtype=float), (len(x),))
        n, m = self.n, self.m
        phi = np.empty((len(x), n))
        N1 = np.empty((len(x), n, n))
        N2 = np.empty((len(x), m, m))
        for i in range(len(x)):
            c, dense, sig_max = self._solution(x[i])
            sig = math.log1p(c * t[i])
            if sig > sig_max * (1 + 1e-12):
                raise ValueError("time beyond the integrated range of the numeric oracle")
            z = dense(min(sig, sig_max))
            phi[i] = z[:n]
            N1[i] = z[n:n + n * n].reshape(n, n)
            N2[i] = z[n + n * n:].reshape(m, m)
        return phi, N1, N2

    def decay_exponent(self, kind: str, degree: int, x: np.ndarray) -> float:
        """Decay exponent in s of the integrand for a degree-``degree`` right-hand side."""
        if self.gamma_rule is not None:
            return float(self.gamma_rule(kind, degree))
        # numeric estimate from the far field of the weighted flow
        x = np.atleast_2d(x)[:1]
        c = float(self.rate(x)[0])
        s1, s2 = 1e8, 1e10
        vals = []
        for s in (s1, s2):
            t = np.array([s / c])
            ph = self.phi(t, x)[0]
            W = (self.M1inv if kind == "x" else self.M2inv)(t, x)[0]
            vals.append(np.linalg.norm(W, ord=2) * np.linalg.norm(ph) ** degree)
        return -math.log(vals[1] / vals[0]) / math.log(s2 / s1)

    def flow_integral(self, kind: str, rhs: Callable[[np.ndarray], np.ndarray], x: np.ndarray, degree: int,
                      abs_tol: float = 1e-11, gamma: float | None = None) -> np.ndarray:
        """Integral from infinity to 0 of M^-1(t, x) rhs(phi(t, x)) dt at each row of x.

        ``kind`` selects M1 ("x") or M2 ("y"); rhs is homogeneous of
        ``degree`` and maps (P, n) -> (P, k).
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        c = self.rate(x)
        if gamma is None:
            gamma = self.decay_exponent(kind, degree, x)
        W = self.M1inv if kind == "x" else self.M2inv

        def g(s):
            t = s / c
            ph = self.phi(t, x)
            val = np.einsum("pij,pj->pi", W(t, x), rhs(ph))
            return (val / c[:, None]).ravel()

        s_max = None if self.mode == "closed" else self.s_max
        res = integrate_halfline(g, gamma, abs_tol=abs_tol, s_max=s_max)
        return -res.value.reshape(len(x), -1)


# ---------------------------------------------------------------------------
# series helpers
# ---------------------------------------------------------------------------

def component_series(h: HomogeneousComponent, D: int) -> list:
    """Polynomial component as a list of Series (one per output)."""
    if not h.is_polynomial:
        raise JetError("series form needs a polynomial component")
    t = tables(h.n_in, D)
    c = np.zeros((t.size, h.n_out, *h.tshape))
    if h.degree <= D:
        c[t.offsets[h.degree]:t.offsets[h.degree + 1]] = h.coeffs
    return [Series(h.n_in, D, c[:, k]) for k in range(h.n_out)]


def series_component(series: Sequence[Series], d: int) -> HomogeneousComponent:
    n = series[0].n
    cols = [s.homogeneous(d) for s in series]
    shape = np.broadcast_shapes(*(c.shape for c in cols))
    coeffs = np.stack([np.broadcast_to(c, shape) for c in cols], axis=1)
    return HomogeneousComponent(d, n, len(series), np.array(coeffs))


def x_variables(n: int, D: int) -> list:
    return [Series.variable(n, D, i) for i in range(n)]


class LeadingTerms:
    """p(x,0), D_x p(x,0), D_y p(x,0), D_y q(x,0) as series in x."""

    def __init__(self, p: GradedMapJet, q: GradedMapJet | None, n: int, m: int, D: int):
        self.n, self.m, self.D = n, m, D
        xs = x_variables(n, D)
        zero = Series.zeros(n, D)
        args = xs + [zero] * (p.n_in - n)
        self.p0 = p.compose_series(args)
        Dp = p.differentiate().compose_series(args)
        ni = p.n_in
        self.Dxp = [[Dp[i * ni + k] for k in range(n)] for i in range(n)]
        self.Dyp = [[Dp[i * ni + n + k] for k in range(m)] for i in range(n)]
        if q is not None and m > 0:
            Dq = q.differentiate().compose_series(xs + [zero] * (q.n_in - n))
            qi = q.n_in
            self.Dyq = [[Dq[i * qi + n + k] for k in range(m)] for i in range(m)]
            self.Dxq = [[Dq[i * qi + k] for k in range(n)] for i in range(m)]
        else:
            self.Dyq = self.Dxq = None


def _matvec(A, v):
    out = []
    for row in A:
        acc = None
        for a, b in zip(row, v):
            term = a * b
            acc = term if acc is None else acc + term
        out.append(acc)
    return out


def _directional(Ks: Sequence[Series], Y: Sequence[Series]) -> list:
    """DK(x) Y(x) for series K (list over outputs) and vector field Y."""
    out = []
    for k in Ks:
        acc = None
        for v, y in enumerate(Y):
            term = k.deriv(v) * y
            acc = term if acc is None else acc + term
        out.append(acc)
    return out


# ---------------------------------------------------------------------------
# polynomial detection
# ---------------------------------------------------------------------------

def default_directions(n: int, count: int, seed: int = 0, halfspace: np.ndarray | None = None) -> np.ndarray:
    """Deterministic unit vectors, optionally restricted to <a, w> >= 0.3."""
    rng = np.random.default_rng(seed)
    out = []
    while sum(len(o) for o in out) < count:
        w = rng.normal(size=(4 * count, n))
        w /= np.linalg.norm(w, axis=1)[:, None]
        if halfspace is not None:
            w = w[w @ np.asarray(halfspace, dtype=float) >= 0.3]
        out.append(w)
    return np.concatenate(out)[:count]


@dataclass
class Detection:
    component: HomogeneousComponent
    polynomial: bool
    residual: float
    scale: float


def detect_polynomial(values: np.ndarray, points: np.ndarray, degree: int, rule: Callable | None,
                      tol: float = 1e-10, n_out: int | None = None) -> Detection:
    """Exact-fit test of sampled values against the degree-``degree`` monomials.

    Residual below tol * max(1, max|values|) stores the result as a
    polynomial; otherwise the sampled rule is kept.
    """
    values = np.asarray(values, dtype=float).reshape(len(points), -1)
    n = points.shape[1]
    n_out = values.shape[1] if n_out is None else n_out
    coeffs, resid = fit_polynomial(points, values, degree)
    scale = max(1.0, float(np.max(np.abs(values), initial=0.0)))
    if resid <= tol * scale:
        return Detection(HomogeneousComponent(degree, n, n_out, coeffs), True, resid, scale)
    if rule is None:
        raise JetError("non-polynomial result without an evaluation rule")
    return Detection(HomogeneousComponent(degree, n, n_out, rule=rule, basis="sampled"), False, resid, scale)


def _n_fit_points(n: int, degree: int) -> int:
    return 2 * n_monomials(n, degree) + 12


# ---------------------------------------------------------------------------
# problems and states
# ---------------------------------------------------------------------------

def _compose_field(field_, args: Sequence[Series]) -> list:
    if isinstance(field_, GradedMapJet):
        return field_.compose_series(args)
    return field_.compose(args)


@dataclass
class InvarianceProblem:
    """Data for the parameterization method near a parabolic point.

    ``field`` is the full map F (kind "map") or vector field X (kind
    "flow") on R^{n+m}, either a polynomial ``GradedMapJet`` or any object
    with ``compose(args) -> list[Series]``.  ``p`` and ``q`` are the leading
    homogeneous parts (jets from R^{n+m}).  ``directions`` are unit points
    inside the domain used to recognize polynomial integrals.
    """

    kind: str
    n: int
    m: int
    field: object
    p: GradedMapJet
    q: GradedMapJet | None
    oracle: FlowOracle
    directions: np.ndarray
    period: float = 2 * np.pi
    n_t: int = 0

    @property
    def N(self) -> int:
        return self.p.lowest_degree()

    @property
    def M(self) -> int:
        if self.q is None or self.m == 0:
            return self.N
        return self.q.lowest_degree()

    @property
    def L(self) -> int:
        return min(self.N, self.M)


@dataclass
class State:
    """Current approximation: K (R^n -> R^{n+m}) and the reduced dynamics R or Y."""

    K: GradedMapJet
    R: GradedMapJet
    j: int

    def copy(self) -> "State":
        return State(self.K, self.R, self.j)


def initial_state(problem: InvarianceProblem) -> State:
    """K = (x, 0) with R = x + p(x,0) (maps) or Y = p(x,0) (flows)."""
    n, m = problem.n, problem.m
    eye = np.zeros((n, n + m))
    eye[:, :n] = np.eye(n)
    tsh = (problem.n_t,) if problem.kind == "flow" and problem.n_t else ()
    c1 = np.zeros((n, n + m, *tsh))
    c1[:] = eye.reshape(eye.shape + (1,) * len(tsh))
    K = GradedMapJet(n, n + m, {1: HomogeneousComponent(1, n, n + m, c1)})
    lead = LeadingTerms(problem.p, None, n, m, problem.N)
    p0 = GradedMapJet.from_series(lead.p0, lo=problem.N, hi=problem.N)
    if problem.kind == "map":
        R = GradedMapJet.identity(n) + p0
    else:
        R = p0
    return State(K, R, 1)


# ---------------------------------------------------------------------------
# errors
# ---------------------------------------------------------------------------

def spectral_derivative(c: np.ndarray, period: float) -> np.ndarray:
    """d/dt of samples on a uniform periodic grid along the last axis."""
    n_t = c.shape[-1]
    k = np.fft.rfftfreq(n_t, d=1.0 / n_t)
    if n_t % 2 == 0:
        k = k.copy()
        k[-1] = 0.0
    return np.fft.irfft(np.fft.rfft(c, axis=-1) * (2j * np.pi / period) * k, n=n_t, axis=-1)


def spectral_antiderivative(c: np.ndarray, period: float) -> np.ndarray:
    """Zero-mean antiderivative along the last axis; the mean of c is ignored."""
    n_t = c.shape[-1]
    k = np.fft.rfftfreq(n_t, d=1.0 / n_t)
    F = np.fft.rfft(c, axis=-1)
    out = np.zeros_like(F)
    nz = k > 0
    if n_t % 2 == 0:
        nz[-1] = False
    out[..., nz] = F[..., nz] / ((2j * np.pi / period) * k[nz])
    return np.fft.irfft(out, n=n_t, axis=-1)


def invariance_error(problem: InvarianceProblem, state: State, D: int) -> list:
    """Error series up to degree D: F o K - K o R, or X(K,t) - DK Y - d_t K."""
    n = problem.n
    if not state.K.is_polynomial or not state.R.is_polynomial:
        raise JetError("graded composition reached a sampled (non-polynomial) component")
    Ks = state.K.to_series(D)
    Rs = state.R.to_series(D)
    FK = _compose_field(problem.field, Ks)
    if problem.kind == "map":
        KR = state.K.compose_series(Rs)
        return [a - b for a, b in zip(FK, KR)]
    DKY = _directional(Ks, Rs)
    out = []
    for a, b, k in zip(FK, DKY, Ks):
        dt = Series(n, D, spectral_derivative(k.c, problem.period)) if k.c.ndim > 1 else 0.0
        out.append(a - b - dt)
    return out


def residual_by_degree(E: Sequence[Series], lo: int, hi: int) -> dict:
    """Max |coefficient| of each homogeneous degree in [lo, hi]."""
    return {d: float(max(np.max(np.abs(s.homogeneous(d)), initial=0.0) for s in E)) for d in range(lo, hi + 1)}


# ---------------------------------------------------------------------------
# component solvers
# ---------------------------------------------------------------------------

def _zero_comp(d, n, k):
    return HomogeneousComponent.zero(d, n, k)


def _case(N: int, M: int) -> str:
    return "N<M" if N < M else ("N=M" if N == M else "N>M")


def solve_Ky(E_y: HomogeneousComponent, problem: InvarianceProblem, j: int, lead: LeadingTerms | None = None,
             abs_tol: float = 1e-11) -> tuple:
    """Degree-j y-part of K from the y-error of degree j+L-1.

    N < M: D K_y p = E_y; N = M: D K_y p - D_y q K_y = E_y (both through the
    integral along the flow of p(x,0)); N > M: K_y = -(D_y q)^-1 E_y.
    Returns (component, info).
    """
    n, m, N, M = problem.n, problem.m, problem.N, problem.M
    case = _case(N, M)
    if m == 0:
        return _zero_comp(j, n, 0), {"case": case, "polynomial": True, "residual": 0.0}
    if E_y.is_polynomial and not np.any(E_y.coeffs):
        return _zero_comp(j, n, m), {"case": case, "polynomial": True, "residual": 0.0}
    pts = problem.directions[:_n_fit_points(n, j)]

    if case == "N>M":
        if lead is None:
            lead = LeadingTerms(problem.p, problem.q, n, m, N + 1)
        Dyq = lead.Dyq

        def rule(w):
            A = np.stack([np.stack([Dyq[i][k].evaluate(w) for k in range(m)], axis=-1) for i in range(m)], axis=-2)
            if np.any(np.abs(np.linalg.det(A)) < 1e-300):
                raise SingularityError("D_y q(x, 0) is singular at a sample point")
            return -np.linalg.solve(A, E_y.evaluate(w)[..., None])[..., 0]

        vals = rule(pts)
    else:
        kind = "y"
        d = E_y.degree

        def rule(w):
            if case == "N<M":
                return _plain_flow_integral(problem.oracle, E_y.evaluate, w, d, abs_tol)
            return problem.oracle.flow_integral(kind, E_y.evaluate, w, d, abs_tol=abs_tol)

        vals = rule(pts)
    det = detect_polynomial(vals, pts, j, rule, n_out=m)
    return det.component, {"case": case, "polynomial": det.polynomial, "residual": det.residual}


def _plain_flow_integral(oracle: FlowOracle, rhs, x, degree, abs_tol):
    """Integral from infinity to 0 of rhs(phi(t, x)) dt (no matrix weight)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    c = oracle.rate(x)
    gamma = _plain_gamma(oracle, degree, x)

    def g(s):
        t = s / c
        return (rhs(oracle.phi(t, x)) / c[:, None]).ravel()

    s_max = None if oracle.mode == "closed" else oracle.s_max
    res = integrate_halfline(g, gamma, abs_tol=abs_tol, s_max=s_max)
    return -res.value.reshape(len(x), -1)


def _plain_gamma(oracle: FlowOracle, degree: int, x: np.ndarray) -> float:
    if oracle.gamma_rule is not None:
        try:
            return float(oracle.gamma_rule("plain", degree))
        except KeyError:
            pass
    x = np.atleast_2d(x)[:1]
    c = float(oracle.rate(x)[0])
    vals = [np.linalg.norm(oracle.phi(np.array([s / c]), x)[0]) ** degree for s in (1e8, 1e10)]
    return -math.log(vals[1] / vals[0]) / math.log(100.0)


def _polynomial_series(h: HomogeneousComponent, D: int) -> list:
    return component_series(h, D)


def rhs_x(E_x: HomogeneousComponent, K_y: HomogeneousComponent, R_term: HomogeneousComponent | None,
          lead: LeadingTerms, D: int) -> HomogeneousComponent:
    """E_x - R + D_y p(x,0) K_y as a degree-D component (sampled if K_y is)."""
    n, m = lead.n, lead.m
    if K_y.is_polynomial and (R_term is None or R_term.is_polynomial) and E_x.is_polynomial:
        out = component_series(E_x, D)
        if m:
            Dy = _matvec(lead.Dyp, component_series(K_y, D))
            out = [a + b for a, b in zip(out, Dy)]
        if R_term is not None:
            out = [a - b for a, b in zip(out, component_series(R_term, D))]
        return series_component(out, D)

    def rule(w):
        val = E_x.evaluate(w)
        if m:
            A = np.stack([np.stack([lead.Dyp[i][k].evaluate(w) for k in range(m)], axis=-1) for i in range(n)],
                         axis=-2)
            val = val + np.einsum("pik,pk->pi", A, K_y.evaluate(w))
        if R_term is not None:
            val = val - R_term.evaluate(w)
        return val

    return HomogeneousComponent(D, n, n, rule=rule, basis="sampled")


def solve_Kx_free(E_x: HomogeneousComponent, K_x: HomogeneousComponent, K_y: HomogeneousComponent,
                  lead: LeadingTerms, D: int) -> HomogeneousComponent:
    """R = E_x - D K_x p + D_x p K_x + D_y p K_y (free mode)."""
    base = rhs_x(E_x, K_y, None, lead, D)
    if not np.any(K_x.coeffs if K_x.is_polynomial else 1.0):
        return base
    if not (base.is_polynomial and K_x.is_polynomial):
        raise JetError("free mode with a sampled K_x is not supported")
    kx = component_series(K_x, D)
    corr = [a - b for a, b in zip(_matvec(lead.Dxp, kx), _directional(kx, lead.p0))]
    out = [a + b for a, b in zip(component_series(base, D), corr)]
    return series_component(out, D)


def solve_Kx_integral(E_x: HomogeneousComponent, K_y: HomogeneousComponent, problem: InvarianceProblem,
                      lead: LeadingTerms, j: int, R_term: HomogeneousComponent | None = None,
                      abs_tol: float = 1e-11) -> tuple:
    """K_x = integral from infinity to 0 of M1^-1 [E_x - R + D_y p K_y](phi) dt."""
    n = problem.n
    D = E_x.degree
    G = rhs_x(E_x, K_y, R_term, lead, D)
    if G.is_polynomial and not np.any(G.coeffs):
        return _zero_comp(j, n, n), {"polynomial": True, "residual": 0.0}
    pts = problem.directions[:_n_fit_points(n, j)]

    def rule(w):
        return problem.oracle.flow_integral("x", G.evaluate, w, D, abs_tol=abs_tol)

    vals = rule(pts)
    det = detect_polynomial(vals, pts, j, rule, n_out=n)
    return det.component, {"polynomial": det.polynomial, "residual": det.residual}


# ---------------------------------------------------------------------------
# steps
# ---------------------------------------------------------------------------

def _stack(a: HomogeneousComponent, b: HomogeneousComponent, tsh: tuple = ()) -> HomogeneousComponent:
    n = a.n_in
    k = a.n_out + b.n_out
    if a.is_polynomial and b.is_polynomial:
        ca = a.coeffs.reshape(a.coeffs.shape + (1,) * (2 + len(tsh) - a.coeffs.ndim))
        cb = b.coeffs.reshape(b.coeffs.shape + (1,) * (2 + len(tsh) - b.coeffs.ndim))
        shape = (ca.shape[0],) + tuple(np.broadcast_shapes(ca.shape[2:], cb.shape[2:], tsh))
        c = np.concatenate([np.broadcast_to(ca, (shape[0], a.n_out) + shape[1:]),
                            np.broadcast_to(cb, (shape[0], b.n_out) + shape[1:])], axis=1)
        return HomogeneousComponent(a.degree, n, k, np.array(c))
    return HomogeneousComponent(a.degree, n, k, rule=lambda w: np.concatenate([a.evaluate(w), b.evaluate(w)], axis=1),
                                basis="sampled")


def _pad_outputs(h: HomogeneousComponent, start: int, total: int, tsh: tuple) -> HomogeneousComponent:
    c = np.zeros((h.coeffs.shape[0], total, *tsh))
    c[:, start:start + h.n_out] = h.coeffs.reshape(h.coeffs.shape + (1,) * (2 + len(tsh) - h.coeffs.ndim))
    return HomogeneousComponent(h.degree, h.n_in, total, c)


def _is_zero(h: HomogeneousComponent) -> bool:
    return h.is_polynomial and not np.any(h.coeffs)


@dataclass
class StepResult:
    """Bookkeeping for one order of the solver."""

    j: int
    mode: str
    K_x: HomogeneousComponent
    K_y: HomogeneousComponent
    R_term: HomogeneousComponent
    E_x: HomogeneousComponent
    E_y: HomogeneousComponent
    lower_residual: float
    info: dict = field(default_factory=dict)
    K_tilde_x: HomogeneousComponent | None = None
    K_tilde_y: HomogeneousComponent | None = None


def choose_mode(policy: str, j: int, N: int, ell_star: int | None) -> str:
    """'free' (K_x = 0, R absorbs the error) or 'integral' (R = 0, K_x by quadrature)."""
    if policy == "K_x_zero":
        return "free"
    if policy == "R_simplest":
        if ell_star is None or j < ell_star - N + 2:
            return "free"
        return "integral"
    if policy == "integral":
        return "integral"
    raise ValueError(f"unknown policy {policy!r}")


def step(problem: InvarianceProblem, state: State, policy: str = "R_simplest", ell_star: int | None = None,
         abs_tol: float = 1e-11) -> tuple:
    """Cancel the lowest-order error by adding K^j and R^{j+N-1} (or Y^{j+N-1}).

    Returns (new_state, StepResult).
    """
    n, m, N, L = problem.n, problem.m, problem.N, problem.L
    j = state.j + 1
    dx, dy = j + N - 1, j + L - 1
    E = invariance_error(problem, state, dx)
    lower = 0.0
    for i, s in enumerate(E):
        top = dx if i < n else dy
        for d in range(0, top):
            lower = max(lower, float(np.max(np.abs(s.homogeneous(d)), initial=0.0)))
    E_x = series_component(E[:n], dx)
    E_y = series_component(E[n:], dy) if m else _zero_comp(dy, n, 0)
    flow = problem.kind == "flow"
    tsh = (problem.n_t,) if flow and problem.n_t else ()
    if flow:
        Ex_mean = HomogeneousComponent(dx, n, n, E_x.coeffs.mean(axis=-1))
        Ey_mean = HomogeneousComponent(dy, n, m, E_y.coeffs.mean(axis=-1)) if m else E_y
    else:
        Ex_mean, Ey_mean = E_x, E_y
    lead = LeadingTerms(problem.p, problem.q, n, m, dx)
    K_y, info_y = solve_Ky(Ey_mean, problem, j, lead, abs_tol=abs_tol)
    mode = choose_mode(policy, j, N, ell_star)
    if mode == "free":
        K_x = _zero_comp(j, n, n)
        R_term = solve_Kx_free(Ex_mean, K_x, K_y, lead, dx)
        info_x = {"polynomial": True, "residual": 0.0}
    else:
        K_x, info_x = solve_Kx_integral(Ex_mean, K_y, problem, lead, j, abs_tol=abs_tol)
        R_term = _zero_comp(dx, n, n)

    K = state.K
    Kj = _stack(K_x, K_y, tsh) if m else _stack(K_x, _zero_comp(j, n, 0), tsh)
    if not _is_zero(Kj):
        K = K.with_component(Kj)
    R = state.R if _is_zero(R_term) else state.R.with_component(R_term)
    Kt_x = Kt_y = None
    if flow:
        Kt_x = HomogeneousComponent(dx, n, n, spectral_antiderivative(E_x.coeffs, problem.period))
        K = K.with_component(_pad_outputs(Kt_x, 0, n + m, tsh))
        if m:
            Kt_y = HomogeneousComponent(dy, n, m, spectral_antiderivative(E_y.coeffs, problem.period))
            K = K.with_component(_pad_outputs(Kt_y, n, n + m, tsh))
    info = {"x": info_x, "y": info_y}
    res = StepResult(j, mode, K_x, K_y, R_term, Ex_mean, Ey_mean, lower, info, Kt_x, Kt_y)
    return State(K, R, j), res


def solve_to_order(problem: InvarianceProblem, order: int, policy: str = "R_simplest",
                   ell_star: int | None = None, state: State | None = None, abs_tol: float = 1e-11) -> tuple:
    """Run steps j = 2..order; returns (state, [StepResult, ...])."""
    state = initial_state(problem) if state is None else state
    steps = []
    while state.j < order:
        state, res = step(problem, state, policy, ell_star, abs_tol)
        steps.append(res)
    return state, steps


def final_error(problem: InvarianceProblem, state: State, extra: int = 2) -> dict:
    """Residual coefficients of the invariance error by degree after the last step."""
    N = problem.N
    D = state.j + N - 1 + extra
    E = invariance_error(problem, state, D)
    n = problem.n
    out = {}
    for d in range(D + 1):
        ex = max(float(np.max(np.abs(s.homogeneous(d)), initial=0.0)) for s in E[:n])
        ey = max((float(np.max(np.abs(s.homogeneous(d)), initial=0.0)) for s in E[n:]), default=0.0)
        out[d] = (ex, ey)
    return out


def residual_scan(problem: InvarianceProblem, state: State, radii=None, directions=None, extra: int = 3,
                  clean_tol: float = 1e-9) -> dict:
    """Radial log-log slopes of the x- and y-parts of the invariance error.

    The error series is taken to degree j+N-1+extra.  Degrees already
    cancelled by the solver (below j+N for x, below j+L for y) are exactly
    zero in exact arithmetic; their floating-point residue is reported as
    ``cleaned`` and removed before the scan, and the scan fails loudly if
    that residue exceeds ``clean_tol``.
    """
    n, N, L = problem.n, problem.N, problem.L
    j = state.j
    radii = np.geomspace(1e-3, 1e-1, 9) if radii is None else np.asarray(radii, dtype=float)
    directions = problem.directions[:: max(1, len(problem.directions) // 9)] if directions is None else directions
    D = j + N - 1 + extra
    E = invariance_error(problem, state, D)
    cleaned = 0.0
    parts = []
    for i, s in enumerate(E):
        lo = j + N if i < n else j + L
        for d in range(lo):
            cleaned = max(cleaned, float(np.max(np.abs(s.homogeneous(d)), initial=0.0)))
        parts.append(s.degree_window(lo, D))
    if cleaned > clean_tol:
        raise ArithmeticError(f"cancelled coefficients left a residue of {cleaned:.3e}")
    out = {"radii": radii.tolist(), "cleaned": cleaned, "j": j}
    for name, sl, expected in (("x", slice(0, n), j + N), ("y", slice(n, None), j + L)):
        vals = []
        for r in radii:
            pts = np.asarray(directions) * r
            v = [np.abs(s.evaluate(pts)) for s in parts[sl]]
            vals.append(float(max((np.max(x) for x in v), default=0.0)))
        out[name] = {"values": vals, "slope": loglog_slope(radii, vals), "expected": expected}
    return out


def split_mean(jet: GradedMapJet) -> tuple:
    """(mean, oscillatory) parts of a time-sampled jet along its last coefficient axis."""
    mean, osc = {}, {}
    for d, h in jet.components.items():
        c = h.coeffs
        if c.ndim < 3:
            mean[d] = h
            continue
        mu = c.mean(axis=-1)
        mean[d] = HomogeneousComponent(d, jet.n_in, jet.n_out, mu)
        osc[d] = HomogeneousComponent(d, jet.n_in, jet.n_out, c - mu[..., None])
    period = getattr(jet, "period", 2 * np.pi)
    return (GradedMapJet(jet.n_in, jet.n_out, mean, jet.max_degree),
            PeriodicGradedJet(jet.n_in, jet.n_out, osc, jet.max_degree, period))
