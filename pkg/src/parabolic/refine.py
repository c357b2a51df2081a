"""Fixed-point refinement of a polynomial approximation of the stable manifold.

With F = P + F_> (P the Taylor polynomial of F) and an approximate pair
(K_le, R) with defect T = P o K_le - K_le o R, the correction K solves

    L0 K = (DP o K_le) K - K o R = FF(K),
    FF(K) = -T - F_> o (K_le + K) - [P o (K_le + K) - P o K_le - (DP o K_le) K].

L0 is inverted along R-orbits, K(x) = A(x)^-1 [T(x) + K(R x)], so values are
stored on an orbit grid where R maps each point to the next one.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import solve_ivp

from .fitting import loglog_slope
from .polyalg import GradedMapJet, HomogeneousComponent, Series, monomials


class NonContractionError(RuntimeError):
    """Fixed-point iteration grew for several consecutive sweeps."""


class DomainError(ValueError):
    """A point left the domain where the map can be evaluated."""


# ---------------------------------------------------------------------------
# scaling
# ---------------------------------------------------------------------------

def scale_jet(jet: GradedMapJet, n: int, delta: float, scale_outputs: bool = True) -> GradedMapJet:
    """Conjugate a jet on R^{n+m} by S(x, y) = (x, delta y): S^-1 o F o S."""
    if not delta > 0:
        raise ValueError("delta must be positive")
    comps = {}
    out_scale = np.ones(jet.n_out)
    if scale_outputs:
        out_scale[n:] = 1.0 / delta
    for d, h in jet.components.items():
        exps = monomials(jet.n_in, d)
        w = delta ** exps[:, n:].sum(axis=1)
        c = h.coeffs * w.reshape((-1,) + (1,) * (h.coeffs.ndim - 1))
        c = c * out_scale.reshape((1, -1) + (1,) * (h.coeffs.ndim - 2))
        comps[d] = HomogeneousComponent(d, jet.n_in, jet.n_out, c)
    return GradedMapJet(jet.n_in, jet.n_out, comps, jet.max_degree)


def scale_parameterization(K: GradedMapJet, n: int, delta: float) -> GradedMapJet:
    """S^-1 o K for K: R^n -> R^{n+m}."""
    if not delta > 0:
        raise ValueError("delta must be positive")
    s = np.ones(K.n_out)
    s[n:] = 1.0 / delta
    comps = {d: HomogeneousComponent(d, K.n_in, K.n_out, h.coeffs * s.reshape((1, -1) + (1,) * (h.coeffs.ndim - 2)))
             for d, h in K.components.items()}
    return GradedMapJet(K.n_in, K.n_out, comps, K.max_degree)


def scale_y(F: Callable, P: GradedMapJet, K_le: GradedMapJet, n: int, delta: float) -> tuple:
    """Scaled system: (F~, P~, K~) with F~ = S^-1 o F o S and K~ = S^-1 o K."""
    if not delta > 0:
        raise ValueError("delta must be positive")

    def Fs(z):
        z = np.array(z, dtype=float)
        z[..., n:] *= delta
        out = np.array(F(z), dtype=float)
        out[..., n:] /= delta
        return out

    return Fs, scale_jet(P, n, delta), scale_parameterization(K_le, n, delta)


# ---------------------------------------------------------------------------
# systems and grids
# ---------------------------------------------------------------------------

@dataclass
class RefineSystem:
    """Map F on R^{n+m} with its Taylor polynomial P and an approximate pair (K_le, R).

    ``F_high`` (optional) is a high-degree Taylor jet of F used to evaluate
    F_> = F - P without cancellation near the origin.
    """

    n: int
    m: int
    F: Callable[[np.ndarray], np.ndarray]
    P: GradedMapJet
    K_le: GradedMapJet
    R: GradedMapJet
    N: int
    F_high: GradedMapJet | None = None
    defect_weight: int | None = None

    def __post_init__(self):
        self._DP = self.P.differentiate()
        if self.F_high is not None:
            self._F_gt = GradedMapJet(self.F_high.n_in, self.F_high.n_out,
                                      {d: h for d, h in self.F_high.components.items() if d > self.P.max_degree},
                                      self.F_high.max_degree)

    @property
    def weight_T(self) -> int:
        if self.defect_weight is not None:
            return self.defect_weight
        return self.K_le.max_degree + self.N

    @property
    def weight_K(self) -> int:
        return self.weight_T - self.N + 1

    def DP(self, z: np.ndarray) -> np.ndarray:
        d = self.n + self.m
        return self._DP.evaluate(z).reshape(len(z), d, d)

    def F_gt(self, z: np.ndarray) -> np.ndarray:
        if self.F_high is not None:
            return self._F_gt.evaluate(z)
        return self.F(z) - self.P.evaluate(z)

    def defect_jet(self, extra: int = 12, clean_tol: float = 1e-10) -> GradedMapJet:
        """T = P o K_le - K_le o R as a polynomial, degrees weight_T .. weight_T + extra.

        Degrees below weight_T cancel in exact arithmetic; their round-off
        residue is stored in ``defect_cleaned`` and must stay below clean_tol.
        """
        key = (extra, clean_tol)
        cache = self.__dict__.setdefault("_defect_cache", {})
        if key in cache:
            return cache[key]
        D = self.weight_T + extra
        xs = [Series.variable(self.n, D, i) for i in range(self.n)]
        Ks = self.K_le.compose_series(xs)
        Rs = self.R.compose_series(xs)
        T = [a - b for a, b in zip(self.P.compose_series(Ks), self.K_le.compose_series(Rs))]
        cleaned = max(float(np.max(np.abs(t.homogeneous(d)), initial=0.0))
                      for t in T for d in range(self.weight_T))
        if cleaned > clean_tol:
            raise ArithmeticError(f"defect has terms of degree below {self.weight_T}: {cleaned:.3e}")
        self.defect_cleaned = cleaned
        jet = GradedMapJet.from_series(T, lo=self.weight_T, hi=D)
        cache[key] = jet
        return jet

    def defect(self, x: np.ndarray) -> np.ndarray:
        return self.defect_jet().evaluate(x)

    def second_order(self, a: np.ndarray, k: np.ndarray) -> np.ndarray:
        """P(a + k) - P(a) - DP(a) k, summed from the Taylor expansion of s -> P(a + s k)."""
        d = self.n + self.m
        D = self.P.max_degree
        s = Series.variable(1, D, 0)
        args = [s * k[:, i] + a[:, i] for i in range(d)]
        outs = self.P.compose_series(args)
        return np.stack([o.c[2:].sum(axis=0) for o in outs], axis=1)


@dataclass
class GridField:
    """Values of the correction on an orbit grid.

    ``points`` has shape (S, L, n): S orbits of length L with
    points[s, i+1] = R(points[s, i]).  Values live on the same layout.
    ``active`` marks the points whose truncated orbit sums are trusted.
    """

    points: np.ndarray
    values: np.ndarray
    weight_exponent: float
    active: np.ndarray
    tail_bound: np.ndarray | None = None

    def weighted_norm(self, values: np.ndarray | None = None, only_active: bool = True) -> float:
        v = self.values if values is None else values
        r = np.linalg.norm(self.points, axis=-1)
        w = np.linalg.norm(v, axis=-1) / r ** self.weight_exponent
        if only_active:
            w = w[self.active]
        return float(np.max(w, initial=0.0))

    def with_values(self, values, tail_bound=None) -> "GridField":
        return GridField(self.points, values, self.weight_exponent, self.active, tail_bound)

    def ring_index(self) -> np.ndarray:
        return np.broadcast_to(np.arange(self.points.shape[1]), self.points.shape[:2])

    def flat(self) -> tuple:
        n = self.points.shape[-1]
        return self.points.reshape(-1, n), self.values.reshape(-1, self.values.shape[-1])

    def to_csv(self, path, residual: np.ndarray | None = None) -> None:
        P, V = self.flat()
        k = self.ring_index().reshape(-1)
        cols = [P, V, k[:, None]]
        header = [f"x{i + 1}" for i in range(P.shape[1])] + [f"K{i + 1}" for i in range(V.shape[1])] + ["ring"]
        if residual is not None:
            cols.append(np.asarray(residual).reshape(-1, 1))
            header.append("residual")
        np.savetxt(path, np.concatenate(cols, axis=1), delimiter=",", header=",".join(header), comments="")


def orbit_grid(R: GradedMapJet, seeds: np.ndarray, length: int, active: int, weight: float,
               m: int) -> GridField:
    """Orbits of R from the seeds; the first ``active`` points of each orbit are trusted."""
    seeds = np.atleast_2d(np.asarray(seeds, dtype=float))
    pts = np.empty((len(seeds), length, seeds.shape[1]))
    pts[:, 0] = seeds
    for i in range(1, length):
        pts[:, i] = R.evaluate(pts[:, i - 1])
    if not np.all(np.isfinite(pts)):
        raise DomainError("orbit of R left the finite domain")
    act = np.zeros(pts.shape[:2], dtype=bool)
    act[:, :active] = True
    n = seeds.shape[1]
    return GridField(pts, np.zeros(pts.shape[:2] + (n + m,)), weight, act)


def ring_seeds(R: GradedMapJet, directions: np.ndarray, rho: float, per_ring: int) -> np.ndarray:
    """Seeds filling the outer ring between R(rho w) and rho w along each direction."""
    directions = np.atleast_2d(directions)
    out = []
    for w in directions:
        x0 = rho * w
        x1 = R.evaluate(x0[None])[0]
        r0, r1 = np.linalg.norm(x0), np.linalg.norm(x1)
        for s in np.linspace(r1, r0, per_ring, endpoint=False)[::-1]:
            out.append(w * s)
    return np.array(out)


# ---------------------------------------------------------------------------
# operators
# ---------------------------------------------------------------------------

@dataclass
class SolverConfig:
    delta: float = 1.0
    max_iter: int = 60
    tol: float = 1e-12
    tail_tol: float | None = None
    ell: int | None = None
    divergence_window: int = 5

    def __post_init__(self):
        if not 0 < self.delta <= 1:
            raise ValueError("delta must lie in (0, 1]")
        if not self.tol > 0:
            raise ValueError("tol must be positive")


def operator_F(system: RefineSystem, grid: GridField, values: np.ndarray | None = None,
               T: np.ndarray | None = None) -> np.ndarray:
    """FF(K) at every grid point."""
    n = system.n
    pts = grid.points.reshape(-1, n)
    K = (grid.values if values is None else values).reshape(len(pts), -1)
    a = system.K_le.evaluate(pts)
    if not np.all(np.isfinite(a)):
        raise DomainError("K_le is not finite on the grid")
    T = system.defect(pts) if T is None else T.reshape(len(pts), -1)
    out = -T - system.F_gt(a + K) - system.second_order(a, K)
    bad = ~np.all(np.isfinite(out), axis=1)
    if bad.any():
        raise DomainError(f"map evaluation failed at {pts[np.argmax(bad)].tolist()}")
    return out.reshape(grid.values.shape)


def operator_S0(system: RefineSystem, grid: GridField, T: np.ndarray) -> GridField:
    """Right inverse of L0 along the orbits: K_i = A_i^-1 (T_i + K_{i+1}).

    The sum is truncated at the end of each stored orbit; the neglected
    tail is bounded by ||prod A^-1|| * C ||x_end||^w with C the largest
    weighted value seen along that orbit.
    """
    n = system.n
    S, Lo = grid.points.shape[:2]
    d = n + system.m
    pts = grid.points.reshape(-1, n)
    A = system.DP(system.K_le.evaluate(pts)).reshape(S, Lo, d, d)
    Ainv = np.linalg.inv(A)
    K = np.zeros((S, Lo, d))
    prod_norm = np.zeros((S, Lo))
    w = system.weight_K
    carry = np.zeros((S, d))
    prod = np.broadcast_to(np.eye(d), (S, d, d)).copy()
    for i in range(Lo - 1, -1, -1):
        carry = np.einsum("sij,sj->si", Ainv[:, i], T[:, i] + carry)
        K[:, i] = carry
    # tail bound: product of inverse norms from i to the end
    r_end = np.linalg.norm(grid.points[:, -1], axis=-1)
    C = np.max(np.linalg.norm(K, axis=-1) / np.linalg.norm(grid.points, axis=-1) ** w, axis=1)
    for i in range(Lo - 1, -1, -1):
        prod = np.einsum("sij,sjk->sik", Ainv[:, i], prod)
        prod_norm[:, i] = np.sqrt(np.einsum("sij,sij->s", prod, prod))
    tail = prod_norm * (C * r_end ** w)[:, None]
    return GridField(grid.points, K, w, grid.active, tail)


def apply_L0(system: RefineSystem, grid: GridField, values: np.ndarray) -> np.ndarray:
    """(DP o K_le) K - K o R on the grid (defined except at each orbit's last point)."""
    n = system.n
    S, Lo = grid.points.shape[:2]
    d = n + system.m
    A = system.DP(system.K_le.evaluate(grid.points.reshape(-1, n))).reshape(S, Lo, d, d)
    out = np.einsum("slij,slj->sli", A, values)
    out[:, :-1] -= values[:, 1:]
    out[:, -1] = np.nan
    return out


@dataclass
class ResidualReport:
    residual: np.ndarray
    weighted_residual: float
    slope: float
    history: list
    contraction: float
    iterations: int
    converged: bool
    details: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"weighted_residual": self.weighted_residual, "slope": self.slope, "history": self.history,
                "contraction": self.contraction, "iterations": self.iterations, "converged": self.converged,
                **self.details}


def invariance_residual(system: RefineSystem, grid: GridField, values: np.ndarray | None = None) -> np.ndarray:
    """F(K_le + K) - (K_le + K)(R x) on the grid, split so that nothing cancels catastrophically."""
    V = grid.values if values is None else values
    FF = operator_F(system, grid, V)
    L0 = apply_L0(system, grid, V)
    # F o (K_le + K) - (K_le + K) o R = L0 K - FF(K)
    return L0 - FF


def solve_fixed_point(system: RefineSystem, grid: GridField, config: SolverConfig | None = None,
                      initial: np.ndarray | None = None) -> tuple:
    """Iterate K <- S0(FF(K)) on the orbit grid.

    Returns (GridField, ResidualReport).  The weighted step norm uses the
    output weight of S0; growth over ``divergence_window`` consecutive
    sweeps raises ``NonContractionError``.
    """
    config = config or SolverConfig()
    T = system.defect(grid.points.reshape(-1, system.n)).reshape(grid.values.shape)
    K = grid.with_values(np.zeros_like(grid.values) if initial is None else np.array(initial))
    history = []
    grow = 0
    converged = False
    it = 0
    for it in range(1, config.max_iter + 1):
        new = operator_S0(system, grid, operator_F(system, K, T=T))
        step_norm = new.weighted_norm(new.values - K.values)
        history.append(step_norm)
        K = new
        if len(history) > 1 and history[-1] > history[-2]:
            grow += 1
            if grow >= config.divergence_window:
                raise NonContractionError(f"step norms grew for {grow} sweeps: {history[-grow - 1:]}")
        else:
            grow = 0
        if step_norm < config.tol:
            converged = True
            break
    res = invariance_residual(system, K)
    rn = np.linalg.norm(res, axis=-1)
    r = np.linalg.norm(grid.points, axis=-1)
    tail_tol = config.tol / 10 if config.tail_tol is None else config.tail_tol
    trusted = grid.active & (K.tail_bound / r ** system.weight_K <= tail_tol)
    if not trusted.any():
        raise DomainError("no grid point has a truncation tail below tolerance; lengthen the orbits")
    K = GridField(K.points, K.values, K.weight_exponent, trusted, K.tail_bound)
    mask = trusted & np.isfinite(rn)
    mask[:, -1] = False
    weighted = float(np.max(rn[mask] / r[mask] ** system.weight_T, initial=0.0))
    ratios = [history[i + 1] / history[i] for i in range(len(history) - 1) if history[i] > 0 and history[i + 1] > 0]
    contraction = float(np.median(ratios)) if ratios else float("nan")
    slope = loglog_slope(r[mask], rn[mask]) if mask.sum() > 2 else float("nan")
    tail_max = float(np.max(K.tail_bound[trusted] / r[trusted] ** system.weight_K, initial=0.0))
    report = ResidualReport(rn, weighted, slope, history, contraction, it, converged,
                            {"weighted_tail_bound": tail_max, "weight_T": system.weight_T,
                             "weight_K": system.weight_K, "n_trusted": int(trusted.sum()),
                             "defect_cleaned": getattr(system, "defect_cleaned", 0.0)})
    return K, report


def contraction_estimate(system: RefineSystem, grid: GridField, base: np.ndarray | None = None, pairs: int = 6,
                         size: float = 1e-3, seed: int = 0) -> float:
    """Largest ratio ||S0 FF(K) - S0 FF(K')|| / ||K - K'|| over random pairs (weighted norms)."""
    rng = np.random.default_rng(seed)
    T = system.defect(grid.points.reshape(-1, system.n)).reshape(grid.values.shape)
    r = np.linalg.norm(grid.points, axis=-1)[..., None]
    w = system.weight_K
    base = np.zeros_like(grid.values) if base is None else base
    best = 0.0
    for _ in range(pairs):
        d1 = rng.uniform(-1, 1, grid.values.shape) * size * r ** w
        d2 = rng.uniform(-1, 1, grid.values.shape) * size * r ** w
        K1 = grid.with_values(base + d1)
        K2 = grid.with_values(base + d2)
        o1 = operator_S0(system, grid, operator_F(system, K1, T=T)).values
        o2 = operator_S0(system, grid, operator_F(system, K2, T=T)).values
        num = grid.weighted_norm(o1 - o2)
        den = grid.weighted_norm(d1 - d2)
        best = max(best, num / den)
    return best


def product_bound_check(system: RefineSystem, grid: GridField, kappa_a: float, B_hat: float, u: float,
                        C: float = 2.0) -> dict:
    """Sampled check of prod_{m<=i} ||DP^-1(K_le(R^m x))|| <= C ((u+i)/u)^{alpha B_hat / kappa_a} on orbits."""
    n = system.n
    S, Lo = grid.points.shape[:2]
    d = n + system.m
    alpha = 1.0 / (system.N - 1)
    A = system.DP(system.K_le.evaluate(grid.points.reshape(-1, n))).reshape(S, Lo, d, d)
    Ainv = np.linalg.inv(A)
    prod = np.broadcast_to(np.eye(d), (S, d, d)).copy()
    worst = 0.0
    for i in range(Lo):
        prod = np.einsum("sij,sjk->sik", prod, Ainv[:, i])
        lhs = np.sqrt(np.einsum("sij,sij->s", prod, prod))
        rhs = C * ((u + i + 1) / u) ** (alpha * B_hat / kappa_a)
        worst = max(worst, float(np.max(lhs / rhs)))
    return {"worst_ratio": worst, "passed": worst <= 1.0}


# ---------------------------------------------------------------------------
# periodic flows
# ---------------------------------------------------------------------------

def poincare_map(X: Callable[[float, np.ndarray], np.ndarray], period: float, t0: float = 0.0,
                 rtol: float = 1e-12, atol: float = 1e-15) -> Callable[[np.ndarray], np.ndarray]:
    """Time-``period`` map of z' = X(t, z) from the section t0, vectorized over rows."""

    def F(z):
        z = np.atleast_2d(np.asarray(z, dtype=float))
        out = np.empty_like(z)
        for i, z0 in enumerate(z):
            sol = solve_ivp(X, (t0, t0 + period), z0, method="DOP853", rtol=rtol, atol=atol)
            if not sol.success:
                raise RuntimeError(f"integration failed from {z0.tolist()}: {sol.message}")
            out[i] = sol.y[:, -1]
        return out

    return F


def verify_invariance(F: Callable, K: Callable, R: Callable, points: np.ndarray) -> dict:
    """Map residual F(K(x)) - K(R(x)) along the given points with a fitted order slope."""
    points = np.atleast_2d(points)
    res = F(K(points)) - K(R(points))
    mag = np.linalg.norm(res, axis=-1)
    r = np.linalg.norm(points, axis=-1)
    return {"residual": mag, "max": float(np.max(mag)), "slope": loglog_slope(r, mag)}


# ---------------------------------------------------------------------------
# manufactured test system
# ---------------------------------------------------------------------------

def _sin(a):
    return a.sin() if isinstance(a, Series) else np.sin(a)


@dataclass
class ManufacturedSystem:
    """F = Phi o G o Phi^-1 with G(x, y) = (x - x^2, y + x y) and Phi(x, y) = (x/(1-cx), y + k x sin x).

    The stable manifold is known exactly: K(x) = (x/(1-cx), k x sin x) with R(x) = x - x^2.
    """

    c: float = 0.5
    k: float = 1.0

    def F(self, X, Y):
        x = X / (1.0 + X * self.c) if isinstance(X, Series) else X / (1.0 + self.c * X)
        y = Y - self.h(x)
        g1 = x - x * x
        g2 = y + x * y
        return self.psi(g1), g2 + self.h(g1)

    def psi(self, x):
        return x * (1.0 - x * self.c).reciprocal() if isinstance(x, Series) else x / (1.0 - self.c * x)

    def h(self, x):
        return x * _sin(x) * self.k

    def K_exact(self, x):
        x = np.asarray(x, dtype=float)[..., 0]
        return np.stack([self.psi(x), self.h(x)], axis=-1)

    def F_points(self, z):
        z = np.atleast_2d(z)
        a, b = self.F(z[:, 0], z[:, 1])
        return np.stack([a, b], axis=1)

    def taylor(self, degree: int) -> GradedMapJet:
        X = Series.variable(2, degree, 0)
        Y = Series.variable(2, degree, 1)
        a, b = self.F(X, Y)
        return GradedMapJet.from_series([a, b], lo=1, hi=degree)

    def K_jet(self, degree: int) -> GradedMapJet:
        x = Series.variable(1, degree, 0)
        jet = GradedMapJet.from_series([self.psi(x), self.h(x)], lo=1, hi=degree)
        return GradedMapJet(1, 2, {d: h for d, h in jet.components.items() if np.any(h.coeffs)}, degree)

    def system(self, k_order: int, high: int = 26) -> RefineSystem:
        R = GradedMapJet(1, 1, {1: HomogeneousComponent(1, 1, 1, np.array([[1.0]])),
                                2: HomogeneousComponent(2, 1, 1, np.array([[-1.0]]))})
        return RefineSystem(1, 1, self.F_points, self.taylor(k_order + 1), self.K_jet(k_order), R, 2,
                            F_high=self.taylor(high))


@dataclass
class ManufacturedRun:
    system: RefineSystem
    grid: GridField
    K: GridField
    report: ResidualReport
    exact_error: float


def run_manufactured(rho: float = 0.05, k_order: int = 4, tol: float = 1e-9, seeds: int = 6,
                     horizon: float = 1500.0, ms: ManufacturedSystem | None = None,
                     initial: np.ndarray | None = None) -> ManufacturedRun:
    """Refine the order-``k_order`` jet of the manufactured system on V_rho = (0, rho].

    ``exact_error`` compares K^> with the degree > k_order part of the exact
    parameterization in the weighted norm over trusted points.
    """
    ms = ms or ManufacturedSystem()
    sysm = ms.system(k_order)
    seed_pts = ring_seeds(sysm.R, np.array([[1.0]]), rho, seeds)
    grid = orbit_grid(sysm.R, seed_pts, int(horizon / rho), max(1, int(1.0 / rho)), sysm.weight_K, 1)
    K, rep = solve_fixed_point(sysm, grid, SolverConfig(tol=tol), initial=initial)
    pts = grid.points.reshape(-1, 1)
    exact = ms.K_jet(40).truncate(40, lowest=k_order + 1).evaluate(pts)
    err = np.abs(K.values.reshape(-1, 2) - exact).max(axis=1) / np.abs(pts[:, 0]) ** sysm.weight_K
    return ManufacturedRun(sysm, grid, K, rep, float(np.max(err[K.active.ravel()])))
