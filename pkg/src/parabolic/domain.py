"""Cone domains, contraction constants, hypothesis checks and orbit rings."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.stats import qmc

from .fitting import loglog_slope
from .polyalg import GradedMapJet, monomials


class DomainError(ValueError):
    """Raised for degenerate cones or invalid constant orderings."""


# ---------------------------------------------------------------------------
# norms
# ---------------------------------------------------------------------------

def vec_norm(v: np.ndarray, kind: str = "sup") -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if kind == "sup":
        return np.max(np.abs(v), axis=-1)
    if kind == "l2":
        return np.linalg.norm(v, axis=-1)
    if kind == "l1":
        return np.sum(np.abs(v), axis=-1)
    raise DomainError(f"unknown norm {kind!r}")


def op_norm(A: np.ndarray, kind: str = "sup") -> np.ndarray:
    """Induced operator norm of a stack of square matrices (..., k, k)."""
    A = np.asarray(A, dtype=float)
    if kind == "sup":
        return np.max(np.sum(np.abs(A), axis=-1), axis=-1)
    if kind == "l1":
        return np.max(np.sum(np.abs(A), axis=-2), axis=-1)
    if kind == "l2":
        return np.linalg.norm(A, ord=2, axis=(-2, -1))
    raise DomainError(f"unknown norm {kind!r}")


def _abs_increment(x: np.ndarray, dx: np.ndarray) -> np.ndarray:
    """|x + dx| - |x| without cancellation when |dx| << |x|."""
    same = np.abs(dx) < np.abs(x)
    return np.where(same, np.sign(x) * dx, np.abs(x + dx) - np.abs(x))


def norm_increment(x: np.ndarray, dx: np.ndarray, kind: str = "sup") -> np.ndarray:
    """||x + dx|| - ||x|| evaluated stably for small dx."""
    x, dx = np.asarray(x, dtype=float), np.asarray(dx, dtype=float)
    if kind == "l2":
        num = 2.0 * np.sum(x * dx, axis=-1) + np.sum(dx * dx, axis=-1)
        return num / (np.linalg.norm(x + dx, axis=-1) + np.linalg.norm(x, axis=-1))
    inc = _abs_increment(x, dx)
    if kind == "l1":
        return np.sum(inc, axis=-1)
    if kind == "sup":
        top = np.max(np.abs(x), axis=-1, keepdims=True)
        return np.max((np.abs(x) - top) + inc, axis=-1)
    raise DomainError(f"unknown norm {kind!r}")


def op_increment(D: np.ndarray, kind: str = "sup") -> np.ndarray:
    """||Id + D|| - 1 for a stack of square matrices, stable for small D."""
    D = np.asarray(D, dtype=float)
    k = D.shape[-1]
    eye = np.eye(k, dtype=bool)
    diag = np.diagonal(D, axis1=-2, axis2=-1)
    diag_inc = _abs_increment(np.ones_like(diag), diag)
    off = np.where(eye, 0.0, np.abs(D))
    if kind == "sup":
        return np.max(diag_inc + off.sum(axis=-1), axis=-1)
    if kind == "l1":
        return np.max(diag_inc + off.sum(axis=-2), axis=-1)
    if kind == "l2":
        S = D + np.swapaxes(D, -1, -2) + np.swapaxes(D, -1, -2) @ D
        lam = np.linalg.eigvalsh(S)[..., -1]
        return lam / (np.sqrt(1.0 + lam) + 1.0)
    raise DomainError(f"unknown norm {kind!r}")


def _dual_norm(a: np.ndarray, kind: str) -> float:
    return float({"sup": np.sum(np.abs(a)), "l1": np.max(np.abs(a)), "l2": np.linalg.norm(a)}[kind])


def _l2_equivalence(kind: str, n: int) -> float:
    """Constant c with ||z||_2 <= c ||z||_kind."""
    return {"sup": math.sqrt(n), "l1": 1.0, "l2": 1.0}[kind]


# ---------------------------------------------------------------------------
# cones
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConeSpec:
    """Star-shaped cone V in R^n.

    ``faces`` holds pairs (a, nu) encoding <a, x> >= nu * ||x||_2 with a of
    unit Euclidean length; nu = 0 gives a halfspace.  ``rule`` is an optional
    extra membership predicate on (P, n) arrays (homogeneous of degree 0).
    """

    n: int
    faces: tuple = ()
    rule: Callable[[np.ndarray], np.ndarray] | None = None
    norm_x: str = "sup"
    norm_y: str = "sup"

    def __post_init__(self):
        faces = []
        for a, nu in self.faces:
            a = np.asarray(a, dtype=float)
            if a.shape != (self.n,):
                raise DomainError("face normal has the wrong dimension")
            nrm = np.linalg.norm(a)
            faces.append((tuple(a / nrm), float(nu)))
        object.__setattr__(self, "faces", tuple(faces))

    @classmethod
    def halfspaces(cls, normals: Sequence, **kw) -> "ConeSpec":
        normals = [np.asarray(a, dtype=float) for a in normals]
        return cls(len(normals[0]), tuple((a, 0.0) for a in normals), **kw)

    def contains(self, x, tol: float = 1e-14) -> np.ndarray:
        """Membership in the closed cone (boundary included up to tol)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        r2 = np.linalg.norm(x, axis=1)
        ok = r2 > 0
        for a, nu in self.faces:
            ok &= x @ np.asarray(a) >= nu * r2 - tol * r2
        if self.rule is not None:
            ok &= np.asarray(self.rule(x), dtype=bool)
        return ok

    def face_distance(self, y) -> np.ndarray:
        """Signed norm_x distance from y to the complement of the cone.

        Exact (dual norm) for halfspace faces; for circular faces the
        Euclidean distance is converted by the norm-equivalence constant, a
        lower bound.  Negative values mean y lies outside.
        """
        y = np.atleast_2d(np.asarray(y, dtype=float))
        out = np.full(len(y), np.inf)
        r2 = np.linalg.norm(y, axis=1)
        c = _l2_equivalence(self.norm_x, self.n)
        for a, nu in self.faces:
            a = np.asarray(a)
            proj = y @ a
            if nu == 0.0:
                d = proj / _dual_norm(a, self.norm_x)
            else:
                th0 = math.acos(nu)
                th = np.arccos(np.clip(proj / np.where(r2 > 0, r2, 1.0), -1.0, 1.0))
                d = r2 * np.sin(np.clip(th0 - th, -math.pi / 2, math.pi / 2)) / c
            out = np.minimum(out, d)
        if self.rule is not None:
            out = np.minimum(out, self._ray_distance(y))
        return out

    def _ray_distance(self, y: np.ndarray, n_dir: int = 64) -> np.ndarray:
        """Exit distance along a fan of directions (rule cones), by bisection."""
        rng = np.random.default_rng(12345)
        dirs = np.concatenate([np.eye(self.n), -np.eye(self.n), rng.normal(size=(n_dir, self.n))])
        dirs /= vec_norm(dirs, self.norm_x)[:, None]
        inside = self.contains(y)
        scale = vec_norm(y, self.norm_x)
        best = np.full(len(y), np.inf)
        for d in dirs:
            lo, hi = np.zeros(len(y)), scale.copy()
            far_in = self.contains(y + hi[:, None] * d)
            hi = np.where(far_in, np.inf, hi)
            finite = np.isfinite(hi)
            for _ in range(50):
                mid = 0.5 * (lo + np.where(finite, hi, 0.0))
                ok = self.contains(y + mid[:, None] * d)
                lo = np.where(finite & ok, mid, lo)
                hi = np.where(finite & ~ok, mid, hi)
            best = np.minimum(best, np.where(finite, lo, np.inf))
        return np.where(inside, best, -0.0)

    def boundary_points(self, x: np.ndarray) -> np.ndarray:
        """Push interior samples onto each face by bisection (closure samples)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = []
        for a, _ in self.faces:
            a = np.asarray(a)
            lo = np.zeros(len(x))
            hi = 2.0 * np.linalg.norm(x, axis=1) + 1e-300
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                ok = self.contains(x - mid[:, None] * a, tol=0.0)
                lo, hi = np.where(ok, mid, lo), np.where(ok, hi, mid)
            out.append(x - lo[:, None] * a)
        return np.concatenate(out) if out else np.zeros((0, self.n))

    def check_star_shaped(self, samples: np.ndarray, n_lambda: int = 7) -> bool:
        lam = np.linspace(0.05, 0.95, n_lambda)
        inside = samples[self.contains(samples)]
        return all(bool(np.all(self.contains(inside * s))) for s in lam)

    def origin_not_interior(self, n_probe: int = 4096, seed: int = 0) -> bool:
        pts = np.random.default_rng(seed).normal(size=(n_probe, self.n)) * 1e-8
        return not bool(np.all(self.contains(pts)))


def sample_cone(cone: ConeSpec, rho: float, budget: int, seed: int = 0,
                with_boundary: bool = True) -> np.ndarray:
    """Low-discrepancy sample of the (closed) set V_rho.

    Interior Sobol points are complemented by their radial images at radius
    rho, where the defining quotients typically attain their suprema, and
    by bisection projections onto the cone faces.
    """
    if rho <= 0:
        raise DomainError("rho must be positive")
    sob = qmc.Sobol(d=cone.n, scramble=True, seed=seed)
    got: list = []
    count, rounds = 0, 0
    while count < budget and rounds < 12:
        m = int(math.ceil(math.log2(max(4 * budget, 16)))) + rounds
        u = sob.random_base2(m) if rounds == 0 else sob.random(2 ** m)
        pts = rho * (2.0 * u - 1.0)
        nrm = vec_norm(pts, cone.norm_x)
        keep = cone.contains(pts) & (nrm < rho) & (nrm > 1e-6 * rho)
        got.append(pts[keep])
        count += int(keep.sum())
        rounds += 1
    if count == 0:
        raise DomainError("no sample points fall inside the cone")
    pts = np.concatenate(got)[:budget]
    nrm = vec_norm(pts, cone.norm_x)
    outer = pts * (rho * (1 - 1e-12) / nrm)[:, None]
    all_pts = [pts, outer]
    if with_boundary and cone.faces:
        bnd = cone.boundary_points(np.concatenate([pts[: budget // 4], outer[: budget // 4]]))
        bn = vec_norm(bnd, cone.norm_x)
        # faces are sampled away from the vertex, where the H3 quotient
        # would amplify bisection round-off by ||x||^{-N}
        all_pts.append(bnd[(bn > 0.1 * rho) & (bn <= rho) & cone.contains(bnd, tol=0.0)])
    return np.concatenate(all_pts)


# ---------------------------------------------------------------------------
# constants
# ---------------------------------------------------------------------------

def _leading_degree(jet: GradedMapJet) -> int:
    d = jet.lowest_degree()
    if d is None:
        raise DomainError("jet is identically zero")
    return d


class _System:
    """Evaluators for p(x,0), D_x p(x,0), D_y q(x,0) on point arrays."""

    def __init__(self, p: GradedMapJet, q: GradedMapJet | None, n: int):
        self.p, self.q, self.n = p, q, n
        self.m = (p.n_in - n) if p.n_in > n else (q.n_out if q is not None else 0)
        self.N = _leading_degree(p)
        self.M = _leading_degree(q) if q is not None else None
        self.Dp = p.differentiate()
        self.Dq = q.differentiate() if q is not None else None

    def _pad(self, x: np.ndarray, width: int) -> np.ndarray:
        return np.concatenate([x, np.zeros((len(x), width - self.n))], axis=1) if width > self.n else x

    def px(self, x):
        return self.p.evaluate(self._pad(x, self.p.n_in))

    def Dxp(self, x):
        J = self.Dp.evaluate(self._pad(x, self.p.n_in)).reshape(len(x), self.p.n_out, self.p.n_in)
        return J[:, :, : self.n]

    def Dyq(self, x):
        J = self.Dq.evaluate(self._pad(x, self.q.n_in)).reshape(len(x), self.q.n_out, self.q.n_in)
        return J[:, :, self.n:]


def _quotients(sysm: _System, cone: ConeSpec, rho: float) -> dict:
    nx, ny, N, M = cone.norm_x, cone.norm_y, sysm.N, sysm.M
    def base(x):
        return vec_norm(x, nx)

    def qa(x):
        r = base(x)
        return norm_increment(x, sysm.px(x), nx) / r ** N

    def qb(x):
        return vec_norm(sysm.px(x), nx) / base(x) ** N

    def qA(x):
        return op_increment(sysm.Dxp(x), nx) / base(x) ** (N - 1)

    def qB(x):
        return op_increment(-sysm.Dxp(x), nx) / base(x) ** (N - 1)

    out = {"a_p": qa, "b_p": qb, "A_p": qA, "B_p": qB}
    if sysm.q is not None and sysm.m > 0:
        def qBq(x):
            return op_increment(-sysm.Dyq(x), ny) / base(x) ** (M - 1)

        out["B_q"] = qBq

    def qC1(x):
        y = x + sysm.px(x)
        d = np.minimum(cone.face_distance(y), rho - vec_norm(y, nx))
        return d / base(x) ** N

    out["C1"] = qC1
    return out


def _polish_sup(fun, pts: np.ndarray, vals: np.ndarray, cone: ConeSpec, rho: float,
                n_start: int = 3) -> float:
    """Nelder-Mead ascent from the best samples, constrained to closed V_rho."""
    best = float(np.max(vals))
    order = np.argsort(vals)[::-1][:n_start]

    def neg(z):
        z = z[None, :]
        r = vec_norm(z, cone.norm_x)[0]
        if not (0 < r <= rho) or not cone.contains(z, tol=0.0)[0]:
            return np.inf
        v = fun(z)[0]
        return -v if np.isfinite(v) else np.inf

    for i in order:
        res = minimize(neg, pts[i], method="Nelder-Mead",
                       options={"xatol": 1e-12 * rho, "fatol": 1e-14, "maxiter": 400})
        if np.isfinite(res.fun):
            best = max(best, -float(res.fun))
    return best


@dataclass
class DomainConstants:
    rho: float
    N: int
    M: int | None
    L: int
    eta: int
    alpha: float
    a_p: float
    b_p: float
    A_p: float
    B_p: float
    B_q: float | None
    c_p: float
    d_p: float
    C1: float
    sample_budget: int
    sampling_error: dict = field(default_factory=dict)
    q_vanishes: bool = True
    members: tuple = ()

    @property
    def r0(self) -> float:
        return r0_formula(self.N, self.B_p, self.a_p, self.A_p, self.d_p, self.eta)

    def as_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("rho", "N", "M", "L", "eta", "alpha", "a_p", "b_p", "A_p",
                                            "B_p", "B_q", "c_p", "d_p", "C1", "sample_budget")}
        d["sampling_error"] = dict(self.sampling_error)
        d["q_vanishes"] = self.q_vanishes
        d["r0"] = self.r0 if self.a_p > 0 else None
        return d


def _selectors(a_p, b_p, A_p, B_q):
    c_p = a_p if (B_q is not None and B_q <= 0) else b_p
    d_p = a_p if A_p <= 0 else b_p
    return c_p, d_p


def r0_formula(N, B_p, a_p, A_p, d_p, eta) -> float:
    return N - 1 + B_p / a_p + max(eta - A_p / d_p, 0.0)


def q_vanishes_on_x(q: GradedMapJet | None, n: int, tol: float = 0.0) -> bool:
    """True when every monomial of q free of y-variables has zero coefficient."""
    if q is None:
        return True
    for d, h in q.components.items():
        if not h.is_polynomial:
            pts = np.random.default_rng(0).normal(size=(32, n))
            pad = np.concatenate([pts, np.zeros((32, q.n_in - n))], axis=1)
            if np.max(np.abs(h.evaluate(pad))) > tol:
                return False
            continue
        exps = monomials(q.n_in, d)
        mask = np.all(exps[:, n:] == 0, axis=1)
        if np.any(np.abs(h.coeffs[mask]) > tol):
            return False
    return True


def compute_constants(p: GradedMapJet, q: GradedMapJet | None, cone: ConeSpec, rho: float,
                      budget: int = 2000, seed: int = 0, polish: bool = True) -> DomainConstants:
    """Contraction constants of the leading terms over V_rho.

    Parameters
    ----------
    p, q : GradedMapJet
        Homogeneous leading terms in the variables (x, y); p may also be given
        in x alone.  q may be None when there are no y-variables.
    cone : ConeSpec
        The cone V together with the norms on R^n and R^m.
    rho : float
        Radius of V_rho.
    budget : int
        Number of interior Sobol samples; suprema are refined by local ascent.

    Returns
    -------
    DomainConstants
        Includes the H3 margin C1 and a sampling-error estimate per constant
        (gap between the raw sample supremum and the polished one).
    """
    sysm = _System(p, q, cone.n)
    pts = sample_cone(cone, rho, budget, seed=seed)
    quot = _quotients(sysm, cone, rho)
    vals, errs = {}, {}
    for name, fun in quot.items():
        v = fun(pts)
        v = np.where(np.isfinite(v), v, -np.inf if name != "C1" else np.inf)
        if name == "C1":
            raw = float(np.min(v))
            best = -_polish_sup(lambda z: -fun(z), pts, -v, cone, rho) if polish else raw
            best = min(best, raw)
            vals[name], errs[name] = best, abs(raw - best)
            continue
        raw = float(np.max(v))
        best = _polish_sup(fun, pts, v, cone, rho) if polish else raw
        vals[name], errs[name] = best, abs(best - raw)
    a_p, b_p = -vals["a_p"], vals["b_p"]
    A_p, B_p = -vals["A_p"], vals["B_p"]
    B_q = -vals["B_q"] if "B_q" in vals else None
    N, M = sysm.N, sysm.M
    L = min(N, M) if M is not None else N
    c_p, d_p = _selectors(a_p, b_p, A_p, B_q)
    return DomainConstants(rho=rho, N=N, M=M, L=L, eta=1 + N - L, alpha=1.0 / (N - 1), a_p=a_p, b_p=b_p,
                           A_p=A_p, B_p=B_p, B_q=B_q, c_p=c_p, d_p=d_p, C1=vals["C1"],
                           sample_budget=budget, sampling_error=errs,
                           q_vanishes=q_vanishes_on_x(q, cone.n))


def constant_inequalities(c: DomainConstants, tol: float = 1e-9) -> dict:
    """Structural inequalities every constants object must satisfy."""
    t = tol * max(1.0, abs(c.a_p), abs(c.b_p), abs(c.A_p), abs(c.B_p))
    out = {
        "abs_a_le_b": abs(c.a_p) <= c.b_p + t,
        "B_ge_A": c.B_p >= c.A_p - t,
        "a_ge_A_over_N": c.a_p >= c.A_p / c.N - t,
        "B_ge_N_a": (c.B_p >= c.N * c.a_p - t) if c.a_p > 0 else True,
        "finite": all(np.isfinite(v) for v in (c.a_p, c.b_p, c.A_p, c.B_p)),
    }
    return out


def monotonicity_check(big: DomainConstants, small: DomainConstants, tol: float = 1e-9) -> dict:
    """Compare constants at rho (big) and a smaller radius (small)."""
    if small.rho > big.rho:
        big, small = small, big

    def slack(name):
        return tol * max(1.0, abs(getattr(big, name))) + big.sampling_error.get(name, 0.0) \
            + small.sampling_error.get(name, 0.0)

    out = {
        "A_p": small.A_p >= big.A_p - slack("A_p"),
        "a_p": small.a_p >= big.a_p - slack("a_p"),
        "B_p": small.B_p <= big.B_p + slack("B_p"),
        "b_p": abs(small.b_p - big.b_p) <= 1e-6 * max(1.0, abs(big.b_p)) + slack("b_p"),
    }
    if big.B_q is not None:
        out["B_q"] = small.B_q >= big.B_q - slack("B_q")
    return out


# ---------------------------------------------------------------------------
# hypotheses
# ---------------------------------------------------------------------------

@dataclass
class HypothesisReport:
    H1: bool
    H2: bool
    H3: bool
    H1_prime: bool
    H2_prime: bool
    H_lambda: bool
    analytic_flag: bool
    q_vanishes: bool
    margins: dict = field(default_factory=dict)

    @property
    def all_basic(self) -> bool:
        return self.H1 and self.H2 and self.H3

    def as_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("H1", "H2", "H3", "H1_prime", "H2_prime", "H_lambda",
                                            "analytic_flag", "q_vanishes")}
        d["margins"] = dict(self.margins)
        return d


def check_hypotheses(consts: DomainConstants, q: GradedMapJet | None = None, cone: ConeSpec | None = None,
                     h3_tol: float = 1e-6) -> HypothesisReport:
    """Evaluate H1-H3, H1', H2' and the uniform version with numeric margins.

    For M > N the uniform hypothesis asks B_q > 0, mirroring the map-case
    dichotomy; the structural condition q(x,0) = 0 is read off the jet.
    """
    c = consts
    qv = c.q_vanishes if q is None or cone is None else q_vanishes_on_x(q, cone.n)
    N, M = c.N, c.M
    margins = {"a_p": c.a_p, "C1": c.C1}
    H1 = c.a_p > 0
    if M is None:
        h2_margin = math.inf
    elif M < N:
        h2_margin = c.B_q
    elif M == N:
        h2_margin = c.B_q + N * c.a_p
    else:
        h2_margin = math.inf
    margins["H2"] = h2_margin
    H2 = qv and h2_margin > 0
    H3 = c.C1 > h3_tol
    h1p = H1
    if M is not None and M > N:
        margins["H1_prime"] = c.A_p / c.d_p + 1
        h1p = h1p and c.A_p / c.d_p > -1
    if M is None:
        h2p_margin = math.inf
    elif M < N:
        h2p_margin = c.B_q
    elif M == N:
        h2p_margin = 2 + c.B_q / c.c_p - max(1 - c.A_p / c.d_p, 0.0)
    else:
        h2p_margin = math.inf
    margins["H2_prime"] = h2p_margin
    H2p = qv and h2p_margin > 0
    if M is None:
        hl_margin = math.inf
    elif M == N:
        hl_margin = c.B_q + N * c.a_p
    elif M > N:
        hl_margin = c.B_q
    else:
        hl_margin = c.B_q
    margins["H_lambda"] = hl_margin
    Hl = H1 and H3 and qv and hl_margin > 0
    return HypothesisReport(H1=H1, H2=H2, H3=H3, H1_prime=h1p, H2_prime=H2p, H_lambda=Hl,
                            analytic_flag=c.A_p > c.b_p, q_vanishes=qv, margins=margins)


# ---------------------------------------------------------------------------
# parameter families
# ---------------------------------------------------------------------------

def constants_over_parameters(family: Callable, lambdas: Sequence, cone: ConeSpec, rho: float,
                              budget: int = 2000, seed: int = 0) -> DomainConstants:
    """Uniform constants over sampled parameters.

    ``family(lam)`` returns (p, q).  Lower-type constants take the infimum,
    B_p and b_p the supremum; the selectors and r0 are recomputed.
    """
    lambdas = list(lambdas)
    if not lambdas:
        raise DomainError("empty parameter sample")
    members = []
    for lam in lambdas:
        p, q = family(lam)
        members.append(compute_constants(p, q, cone, rho, budget=budget, seed=seed))
    if len({m.N for m in members}) != 1 or len({m.M for m in members}) != 1:
        raise DomainError("leading degrees vary across the parameter sample")
    first = members[0]
    a_p = min(m.a_p for m in members)
    b_p = max(m.b_p for m in members)
    A_p = min(m.A_p for m in members)
    B_p = max(m.B_p for m in members)
    B_q = None if first.B_q is None else min(m.B_q for m in members)
    C1 = min(m.C1 for m in members)
    c_p, d_p = _selectors(a_p, b_p, A_p, B_q)
    errs = {k: max(m.sampling_error.get(k, 0.0) for m in members) for k in first.sampling_error}
    return replace(first, a_p=a_p, b_p=b_p, A_p=A_p, B_p=B_p, B_q=B_q, C1=C1, c_p=c_p, d_p=d_p,
                   sampling_error=errs, q_vanishes=all(m.q_vanishes for m in members),
                   members=tuple(members))


# ---------------------------------------------------------------------------
# regularity
# ---------------------------------------------------------------------------

def _max_k_below(coef: float, bound: float) -> int | None:
    """max{k in N : coef * k < bound} for coef > 0; None when the set is empty."""
    if bound <= 0:
        return None
    k = math.floor(bound / coef)
    if k * coef >= bound - 1e-12 * abs(bound):
        k -= 1
    return k if k >= 0 else None


@dataclass
class RegularityReport:
    r0: float
    ell0: float
    ell_min: int | None
    case: int
    r_v: float
    sigma_max: int | None
    sigma_formal: int | None
    kappa_d: float

    def as_dict(self) -> dict:
        return {k: (v if not (isinstance(v, float) and math.isinf(v)) else "inf")
                for k, v in self.__dict__.items()}


def regularity_report(consts: DomainConstants, r: float, kappa_a: float, kappa_b: float, B_hat: float,
                      r_jet: float = math.inf) -> RegularityReport:
    """Differentiability thresholds and regularity-case selection.

    ``r`` is the smoothness of the map (``math.inf`` for C-infinity) and
    ``r_jet`` that of the approximate solution.  ``ell0`` uses the
    perturbed constants kappa_a < a_p, kappa_b > b_p, B_hat > B_p and
    ``ell_min`` is the smallest integer order above ell0 (None if above r).
    """
    c = consts
    if not (kappa_a < c.a_p and kappa_b > c.b_p and B_hat > c.B_p):
        raise DomainError("need kappa_a < a_p, kappa_b > b_p and B_hat > B_p")
    if kappa_a <= 0:
        raise DomainError("kappa_a must be positive")
    N, eta = c.N, c.eta
    r0 = r0_formula(N, c.B_p, c.a_p, c.A_p, c.d_p, eta)
    kappa_d = kappa_a if c.A_p <= 0 else kappa_b
    ell0 = N - 1 + B_hat / kappa_a + max(eta - c.A_p / kappa_d, 0.0)
    ell_min = math.floor(ell0) + 1
    if ell_min > r:
        ell_min = None
    sigma_max = None
    if math.isinf(r):
        case, r_v = 3, r_jet
    elif c.A_p >= eta * c.d_p:
        case, r_v = 1, min(r, r_jet)
    else:
        case = 2
        sigma_max = _max_k_below(eta - c.A_p / c.d_p, r - c.B_p / c.a_p - N + 1)
        r_v = min(r, sigma_max if sigma_max is not None else -math.inf, r_jet)
    sigma_formal = None
    if c.M is not None and c.B_q is not None and c.A_p < c.d_p and c.M >= N:
        bound = 2 + c.B_q / c.c_p if c.M == N else 2.0
        sigma_formal = _max_k_below(1 - c.A_p / c.d_p, bound)
    return RegularityReport(r0=r0, ell0=ell0, ell_min=ell_min, case=case, r_v=r_v, sigma_max=sigma_max,
                            sigma_formal=sigma_formal, kappa_d=kappa_d)


# ---------------------------------------------------------------------------
# orbit decomposition
# ---------------------------------------------------------------------------

@dataclass
class OrbitDecomposition:
    N: int
    alpha: float
    rho: float
    kappa_a: float
    kappa_b: float
    u: float
    a0: float
    b0: float
    a_bar: np.ndarray
    b_bar: np.ndarray
    beta_a: float
    beta_b: float
    interleaved: bool
    norm: str = "sup"
    envelope_ok: bool | None = None
    worst: dict = field(default_factory=dict)

    @property
    def a_seq(self) -> np.ndarray:
        return self.a_bar * (self.u + np.arange(len(self.a_bar))) ** self.alpha

    @property
    def b_seq(self) -> np.ndarray:
        return self.b_bar * (self.u + np.arange(len(self.b_bar))) ** self.alpha

    @property
    def beta(self) -> float:
        return min(self.beta_a, self.beta_b)

    def ring(self, k: int) -> tuple:
        return float(self.b_bar[k + 1]), float(self.a_bar[k])

    def ring_index(self, r: np.ndarray) -> np.ndarray:
        """Smallest k with ||x|| in [b_bar_{k+1}, a_bar_k] (rings overlap)."""
        r = np.asarray(r, dtype=float)
        # a_bar decreasing: k = last index with a_bar_k >= r
        k = np.searchsorted(-self.a_bar, -r, side="right") - 1
        return np.clip(k, 0, len(self.a_bar) - 2)

    def envelope(self, k: int, j: np.ndarray) -> tuple:
        """Asymptotic bounds for ||R^j x||^{N-1} when x lies in ring k."""
        j = np.asarray(j, dtype=float)
        lo = self.alpha / (self.kappa_b * (self.u + k + 1 + j))
        hi = self.alpha / (self.kappa_a * (self.u + k + j))
        return lo, hi


def _scalar_orbit(v0: float, kappa: float, N: int, length: int) -> np.ndarray:
    out = np.empty(length)
    v = float(v0)
    for k in range(length):
        out[k] = v
        v = v - kappa * v ** N
    return out


def _fit_beta(seq: np.ndarray, limit: float, u: float) -> float:
    """Decay exponent of |seq_k/limit - 1| against (u + k) on the far tail.

    The deviation vanishes at k = 0 by construction and only enters its
    power-law regime once k exceeds u, so the fit uses k >= 10 u.
    """
    k = np.arange(len(seq))
    dev = np.abs(seq / limit - 1.0)
    sel = (k >= 10 * u) & (dev > 1e-14)
    if sel.sum() < 5:
        return float("nan")
    return -loglog_slope(u + k[sel], dev[sel])


def orbit_decomposition(R: Callable[[np.ndarray], np.ndarray], consts: DomainConstants, kappa_a: float,
                        kappa_b: float, k_max: int = 10_000, samples: np.ndarray | None = None,
                        j_max: int = 10_000, cone: ConeSpec | None = None) -> OrbitDecomposition:
    """Ring decomposition of V_rho and the orbit-norm envelope.

    The rings V_k are built from the scalar recurrences v -> v - kappa v^N.
    When ``samples`` are given, each is iterated ``j_max`` times and checked
    against the exact ring nesting ||R^j x|| in [b_bar_{k+j+1}, a_bar_{k+j}];
    the worst offender is reported in ``worst``.
    """
    c = consts
    if not (0 < kappa_a < c.a_p and kappa_b > c.b_p):
        raise DomainError("need 0 < kappa_a < a_p and kappa_b > b_p")
    N, alpha, rho = c.N, 1.0 / (c.N - 1), c.rho
    a0 = (alpha / kappa_a) ** alpha
    b0 = (alpha / kappa_b) ** alpha
    u = (a0 / rho) ** (N - 1)
    k_fit = int(min(max(k_max, 200 * u + 1000), 5_000_000))
    total = max(k_max, k_fit) + j_max + 3
    a_bar = _scalar_orbit(rho, kappa_a, N, total)
    b_bar = _scalar_orbit(b0 / u ** alpha, kappa_b, N, total)
    ks = np.arange(total)
    a_seq = a_bar * (u + ks) ** alpha
    b_seq = b_bar * (u + ks) ** alpha
    interleaved = bool(np.all(b_bar[1:] < a_bar[:-1]))
    dec = OrbitDecomposition(N=N, alpha=alpha, rho=rho, kappa_a=kappa_a, kappa_b=kappa_b, u=u, a0=a0, b0=b0,
                             a_bar=a_bar, b_bar=b_bar, beta_a=_fit_beta(a_seq[: k_fit + 1], a0, u),
                             beta_b=_fit_beta(b_seq[: k_fit + 1], b0, u), interleaved=interleaved,
                             norm=cone.norm_x if cone is not None else "sup")
    if samples is not None:
        check_envelope(dec, R, samples, j_max, cone)
    return dec


def check_envelope(dec: OrbitDecomposition, R: Callable, samples: np.ndarray, j_max: int,
                   cone: ConeSpec | None = None) -> OrbitDecomposition:
    x = np.atleast_2d(np.asarray(samples, dtype=float)).copy()
    r = vec_norm(x, dec.norm)
    k_cap = len(dec.a_bar) - j_max - 3
    keep = r >= dec.a_bar[k_cap]
    x, r, samples = x[keep], r[keep], np.asarray(samples)[keep]
    k0 = dec.ring_index(r)
    worst_margin, worst = np.inf, {}
    ok = True
    excess = 0.0
    for j in range(j_max + 1):
        kk = k0 + j
        lo, hi = dec.b_bar[kk + 1], dec.a_bar[kk]
        margin = np.minimum(r - lo, hi - r) / r
        env_lo, env_hi = dec.envelope(k0, j)
        rn = r ** (dec.N - 1)
        excess = max(excess, float(np.max(np.maximum(rn / env_hi, env_lo / rn))) - 1.0)
        i = int(np.argmin(margin))
        if margin[i] < worst_margin:
            worst_margin = float(margin[i])
            worst = {"point": samples[i].tolist(), "j": j, "k": int(k0[i]), "norm": float(r[i]),
                     "ring": [float(lo[i]), float(hi[i])], "relative_margin": worst_margin}
        if np.any(margin < -1e-12):
            ok = False
        if cone is not None and not np.all(cone.contains(x)):
            ok = False
            worst.setdefault("left_cone_at", j)
        if j < j_max:
            x = R(x)
            r = vec_norm(x, dec.norm)
    dec.envelope_ok = ok
    # the asymptotic envelope holds up to (1 + O(k^-beta)); the sequences
    # themselves bound that factor
    seq_hi = np.max(np.concatenate([(dec.a_seq / dec.a0) ** (dec.N - 1),
                                    (dec.b0 / dec.b_seq) ** (dec.N - 1)])) - 1.0
    worst["asymptotic_excess"] = excess
    worst["sequence_excess"] = float(seq_hi)
    worst["n_checked"] = int(keep.sum())
    worst["n_beyond_k_max"] = int((~keep).sum())
    dec.worst = worst
    return dec
