"""Executable counterexamples.

Toy model: the time-1 map of x1' = -x1^2, x2' = -a x1 x2, y' = b x1 y + x2^3,
which has no stable manifold over its cone when b + 3a <= 1.

Loss of differentiability: x' = p(x), y' = q1(x) y + g(x) with polar form
r' = -a r^5, theta' = r^4 sin 4 theta, q1 = b r^4, g = r^6 sin 4 theta,
whose stable manifold y = h(x) is only finitely differentiable.
"""
from __future__ import annotations

from dataclasses import dataclass

import mpmath
import numpy as np
from scipy.integrate import quad

from .domain import ConeSpec
from .fitting import loglog_slope
from .polyalg import grade


# ---------------------------------------------------------------------------
# toy model
# ---------------------------------------------------------------------------

@dataclass
class ToyModelParams:
    a: float
    b: float

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0):
            raise ValueError("toy model needs a, b > 0")

    @property
    def c(self) -> float:
        return self.b + 3 * self.a


def toy_flow(params: ToyModelParams, t, x1, x2, y):
    """Closed-form time-t flow (t may be an array)."""
    a, b, c = params.a, params.b, params.c
    w = 1.0 + t * x1
    X1 = x1 / w
    X2 = x2 * w ** (-a)
    if abs(c - 1.0) < 1e-14:
        integral = np.log(w) / x1
    else:
        integral = (w ** (1.0 - c) - 1.0) / (x1 * (1.0 - c))
    Y = w ** b * (y + x2 ** 3 * integral)
    return X1, X2, Y


def toy_map(params: ToyModelParams, x1, x2, y):
    return toy_flow(params, 1.0, x1, x2, y)


def toy_jets(params: ToyModelParams):
    """Leading terms p = (-x1^2, -a x1 x2), q = b x1 y on R^3 = (x1, x2, y)."""
    p = grade({(2, 0, 0): [-1.0, 0.0], (1, 1, 0): [0.0, -params.a]}, 3, 2)
    q = grade({(1, 0, 1): [params.b]}, 3, 1)
    return p, q


def toy_cone(params: ToyModelParams) -> ConeSpec:
    """W = {|x2| < (1-a) x1}."""
    s = 1.0 - params.a
    return ConeSpec.halfspaces([(s, -1.0), (s, 1.0)])


def toy_stable_candidate(params: ToyModelParams, x1, x2, quadrature: bool = True) -> float:
    """y*(x) = x2^3 * integral from infinity to 0 of (1 + s x1)^-(b+3a) ds."""
    c = params.c
    if c <= 1.0:
        return float("nan")
    if not quadrature:
        return -x2 ** 3 / (x1 * (c - 1.0))
    val, _ = quad(lambda s: (1.0 + s * x1) ** (-c), 0.0, np.inf, epsabs=1e-14, epsrel=1e-13, limit=400)
    return -x2 ** 3 * val


@dataclass
class ToyOrbit:
    n: np.ndarray
    x1: np.ndarray
    x2: np.ndarray
    y: np.ndarray
    exceeded_at: int | None
    growth_slope: float


def toy_iterate(params: ToyModelParams, x0, y0: float, n_max: int = 10_000, threshold: float = 1e3,
                closed_form: bool = False) -> ToyOrbit:
    """Orbit of the time-1 map; ``closed_form`` uses F^n directly instead of iterating.

    ``growth_slope`` is the log-log slope of |y_n| over the last decade of n.
    """
    x1, x2 = float(x0[0]), float(x0[1])
    if x1 <= 0:
        raise ValueError("toy orbit needs x1 > 0")
    n = np.arange(n_max + 1)
    if closed_form:
        X1, X2, Y = toy_flow(params, n.astype(float), x1, x2, y0)
    else:
        X1, X2, Y = (np.empty(n_max + 1) for _ in range(3))
        X1[0], X2[0], Y[0] = x1, x2, y0
        for k in range(1, n_max + 1):
            X1[k], X2[k], Y[k] = toy_map(params, X1[k - 1], X2[k - 1], Y[k - 1])
    over = np.nonzero(np.abs(Y) > threshold)[0]
    tail = n >= max(1, n_max // 10)
    slope = loglog_slope(n[tail], Y[tail])
    return ToyOrbit(n, X1, X2, Y, int(over[0]) if len(over) else None, slope)


@dataclass
class ToyVerdict:
    params: ToyModelParams
    x: tuple
    y_grid: np.ndarray
    exceeded: list
    slopes: list
    y_star: float
    bounded: list
    no_stable_manifold: bool


def toy_verdict(params: ToyModelParams, x=(1.5, 1.0), y_grid=None, n_max: int = 10_000,
                threshold: float = 1e3) -> ToyVerdict:
    """Divergence scan over initial y.

    For b+3a <= 1 every y is tested against the threshold.  For b+3a > 1
    the grid is centred on y*(x) and an orbit counts as bounded when |y_n|
    decays over the last decade (negative growth slope).
    """
    ys = y_star = float("nan")
    if params.c > 1.0:
        y_star = toy_stable_candidate(params, *x)
        ys = y_star + np.linspace(-1.0, 1.0, 21)
    else:
        ys = np.linspace(-1.0, 1.0, 21)
    ys = np.asarray(ys if y_grid is None else y_grid, dtype=float)
    exceeded, slopes, bounded = [], [], []
    for y in ys:
        orb = toy_iterate(params, x, y, n_max, threshold)
        exceeded.append(orb.exceeded_at)
        slopes.append(orb.growth_slope)
        bounded.append(bool(orb.growth_slope < 0 and orb.exceeded_at is None))
    return ToyVerdict(params, tuple(x), ys, exceeded, slopes, y_star, bounded,
                      no_stable_manifold=all(e is not None for e in exceeded))


# ---------------------------------------------------------------------------
# loss of differentiability
# ---------------------------------------------------------------------------

@dataclass
class LossDiffParams:
    n: int = 3
    m: int = 4
    nu: float = 0.5

    def __post_init__(self):
        if self.n < 1 or self.m < 1 or not 2 * self.m > self.n + 1:
            raise ValueError("need positive n, m with 2m > n + 1")
        if not 0 < self.nu < 1:
            raise ValueError("nu must lie in (0, 1)")

    @property
    def a(self) -> float:
        return 2.0 * self.n

    @property
    def b(self) -> float:
        # matches the exponent of the closed-form manifold
        return 4.0 * (2 * self.m - self.n - 1)


def lossdiff_jets(params: LossDiffParams):
    """p (degree 5), q = q1 y (degree 5 in (x, y)) and g (degree 6) on R^3 = (x1, x2, y)."""
    a, b = params.a, params.b
    # p = -a r^4 x + r^4 sin(4 theta) J x with r^4 sin 4theta = 4 x1 x2 (x1^2 - x2^2)
    P = {}

    def add(table, exps, vec):
        table[exps] = np.add(table.get(exps, np.zeros(len(vec))), vec)

    r4 = {(4, 0): 1.0, (2, 2): 2.0, (0, 4): 1.0}
    s4 = {(3, 1): 4.0, (1, 3): -4.0}
    for (i, j), c in r4.items():
        add(P, (i + 1, j, 0), [-a * c, 0.0])
        add(P, (i, j + 1, 0), [0.0, -a * c])
    for (i, j), c in s4.items():
        add(P, (i, j + 1, 0), [-c, 0.0])
        add(P, (i + 1, j, 0), [0.0, c])
    Q = {}
    for (i, j), c in r4.items():
        add(Q, (i, j, 1), [b * c])
    G = {}
    for (i, j), c in s4.items():
        for (k, l), d in {(2, 0): 1.0, (0, 2): 1.0}.items():
            add(G, (i + k, j + l, 0), [c * d])
    return grade(P, 3, 2), grade(Q, 3, 1), grade(G, 3, 1)


def lossdiff_cone(params: LossDiffParams) -> ConeSpec:
    """V = {nu |x1| <= x2} as two halfspaces."""
    return ConeSpec.halfspaces([(-params.nu, 1.0), (params.nu, 1.0)], norm_x="l2")


def _cot2theta(x1, x2):
    return (x1 * x1 - x2 * x2) / (2.0 * x1 * x2)


def _h_from_c(r2, c, m, log=np.log, series_cut: float = 0.5):
    """h as a function of r^2 and c; a power series in c is used for |c| < series_cut."""
    if c == 0:
        return 0.0 * r2
    if abs(c) < series_cut:
        total = 0.0 * c
        k = m
        term_sign = (-1) ** (m + 1)
        while True:
            t = (-1) ** (k + 1) * c ** (2 * k - 2 * m + 1) / k
            total = total + t
            if abs(t) < 1e-18 * max(abs(total), 1e-300) or k > m + 400:
                break
            k += 1
        return -(r2 / 4.0) * term_sign * total
    s = sum((-1) ** j * c ** (2 * (m - j + 1)) / (m - j + 1) for j in range(2, m + 1))
    return -(r2 / (4.0 * c ** (2 * m - 1))) * (s + (-1) ** (m + 1) * log(c * c + 1))


def lossdiff_closed(params: LossDiffParams, x1: float, x2: float) -> float:
    """Closed form of the manifold; exactly 0 on the invariant rays x1 = 0 and |x1| = x2."""
    if x1 == 0.0:
        return 0.0
    return float(_h_from_c(x1 * x1 + x2 * x2, _cot2theta(x1, x2), params.m))


def lossdiff_quadrature(params: LossDiffParams, x1: float, x2: float) -> float:
    """h(x) = integral from infinity to 0 of M^-1(t) g(phi(t, x)) dt along the explicit flow."""
    if x2 <= 0 or params.nu * abs(x1) > x2 * (1 + 1e-12):
        raise ValueError("point outside the cone V")
    a, b = params.a, params.b
    r = np.hypot(x1, x2)
    if x1 == 0.0 or abs(abs(x1) - x2) == 0.0:
        return 0.0
    c = _cot2theta(x1, x2)
    r4 = r ** 4

    def f(s):
        w = 1.0 + s
        sin4 = 2.0 * c * w ** (1.0 / a) / (c * c + w ** (2.0 / a))
        return w ** (-b / (4.0 * a)) * r ** 6 * w ** -1.5 * sin4 / (4.0 * a * r4)

    v1, _ = quad(f, 0.0, 1.0, epsabs=1e-16, epsrel=1e-13, limit=400)
    v2, _ = quad(f, 1.0, np.inf, epsabs=1e-16, epsrel=1e-13, limit=400)
    return -(v1 + v2)


def lossdiff_manifold(params: LossDiffParams, x) -> tuple:
    """(quadrature, closed form) at x in V."""
    x1, x2 = float(x[0]), float(x[1])
    return lossdiff_quadrature(params, x1, x2), lossdiff_closed(params, x1, x2)


def _h_mp(params: LossDiffParams, x1, x2, polynomial_only: bool = False):
    m = params.m
    c = (x1 * x1 - x2 * x2) / (2 * x1 * x2)
    r2 = x1 * x1 + x2 * x2
    s = sum((-1) ** j * c ** (2 * (m - j + 1)) / (m - j + 1) for j in range(2, m + 1))
    logt = 0 if polynomial_only else (-1) ** (m + 1) * mpmath.log(c * c + 1)
    return -(r2 / (4 * c ** (2 * m - 1))) * (s + logt)


@dataclass
class ProbeReport:
    x1: list
    estimates: list
    order: int
    bounded: bool
    increasing: bool
    log_slope: float


def differentiability_probe(params: LossDiffParams, x2_fixed: float = 1.0, derivative_order: int | None = None,
                            x1_values=(1e-2, 1e-3, 1e-4, 1e-5), polynomial_only: bool = False,
                            dps: int = 60) -> ProbeReport:
    """d^k h / dx1^k at shrinking x1 by high-precision finite differences.

    h is homogeneous of degree 2 in x up to the log term, so x2 = 1 loses
    nothing.  Bounded means no estimate exceeds twice the one at the largest
    x1; ``log_slope`` fits |estimate| against log|log x1|.
    """
    k = 2 * params.m - 1 if derivative_order is None else int(derivative_order)
    ests = []
    with mpmath.workdps(dps):
        x2 = mpmath.mpf(x2_fixed)
        for x1 in x1_values:
            f = lambda t: _h_mp(params, t, x2, polynomial_only)
            ests.append(float(mpmath.diff(f, mpmath.mpf(x1), k)))
    mags = np.abs(ests)
    bounded = bool(np.max(mags) <= 2.0 * mags[0])
    increasing = bool(np.all(np.diff(mags) > 0))
    slope = loglog_slope(np.abs(np.log(np.asarray(x1_values))), mags)
    return ProbeReport(list(x1_values), ests, k, bounded, increasing, slope)


def invariant_rays_check(params: LossDiffParams, radii=(0.01, 0.05, 0.1)) -> float:
    """Largest |h| on the rays theta = pi/4, pi/2, 3pi/4 (quadrature)."""
    worst = 0.0
    for th in (np.pi / 4, np.pi / 2, 3 * np.pi / 4):
        for r in radii:
            x1, x2 = r * np.cos(th), r * np.sin(th)
            if abs(x1) < 1e-15:
                x1 = 0.0
            worst = max(worst, abs(lossdiff_quadrature(params, x1, x2)))
    return worst
