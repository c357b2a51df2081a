"""Graded homogeneous-function algebra.

Two layers live here:

* ``Series``: dense truncated multivariate power series with an optional
  batch of coefficient samples (used for time grids and for expanding maps
  around many base points at once).  This is the arithmetic engine.
* ``HomogeneousComponent`` / ``GradedMapJet``: maps R^n -> R^k stored as a
  finite sum of homogeneous pieces, either polynomial (dense exponent
  table) or sampled (degree plus an evaluation rule on the unit sphere).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from math import comb, factorial
from typing import Callable, Iterable, Sequence

import numpy as np


class JetError(ValueError):
    """Raised on malformed jets or unsupported operations."""


# ---------------------------------------------------------------------------
# monomial bookkeeping
# ---------------------------------------------------------------------------

@lru_cache(maxsize=None)
def monomials(n: int, d: int) -> np.ndarray:
    """Exponent tuples of total degree ``d`` in ``n`` variables.

    Ordered lexicographically with the first variable's exponent decreasing,
    so for n=2 the order is x^d, x^{d-1} y, ..., y^d.
    """
    if n == 0:
        return np.zeros((1 if d == 0 else 0, 0), dtype=np.int64)
    if n == 1:
        return np.array([[d]], dtype=np.int64)
    rows = []
    for first in range(d, -1, -1):
        for rest in monomials(n - 1, d - first):
            rows.append((first, *rest))
    out = np.array(rows, dtype=np.int64).reshape(-1, n)
    out.setflags(write=False)
    return out


def n_monomials(n: int, d: int) -> int:
    return comb(n + d - 1, d) if n > 0 else int(d == 0)


@lru_cache(maxsize=None)
def _monomial_index(n: int, d: int) -> dict:
    return {tuple(int(e) for e in row): i for i, row in enumerate(monomials(n, d))}


def monomial_index(n: int, d: int, exps: Sequence[int]) -> int:
    return _monomial_index(n, d)[tuple(int(e) for e in exps)]


def monomial_values(pts: np.ndarray, exps: np.ndarray) -> np.ndarray:
    """Values of the monomials ``exps`` at ``pts``; shape (P, n_monomials)."""
    P, n = pts.shape
    if exps.size == 0:
        return np.ones((P, len(exps)))
    top = int(exps.max())
    pw = np.empty((n, top + 1, P))
    pw[:, 0] = 1.0
    for e in range(1, top + 1):
        pw[:, e] = pw[:, e - 1] * pts.T
    mon = pw[0, exps[:, 0]]
    for v in range(1, n):
        mon = mon * pw[v, exps[:, v]]
    return mon.T


class _Tables:
    """Index tables for dense graded storage of degree <= D in n variables."""

    def __init__(self, n: int, D: int):
        self.n, self.D = n, D
        blocks = [monomials(n, d) for d in range(D + 1)]
        self.exps = np.concatenate(blocks, axis=0)
        self.degree = self.exps.sum(axis=1)
        self.offsets = np.zeros(D + 2, dtype=np.int64)
        for d in range(D + 1):
            self.offsets[d + 1] = self.offsets[d] + len(blocks[d])
        self.size = int(self.offsets[-1])
        self.index = {tuple(int(e) for e in row): i for i, row in enumerate(self.exps)}
        ia, ib, ir = [], [], []
        for i in range(self.size):
            di = self.degree[i]
            for k in range(self.offsets[D - di + 1]):
                ia.append(i)
                ib.append(k)
                ir.append(self.index[tuple(int(e) for e in self.exps[i] + self.exps[k])])
        ia, ib, ir = (np.asarray(v, dtype=np.int64) for v in (ia, ib, ir))
        order = np.argsort(ir, kind="stable")
        self.mul_a, self.mul_b, self.mul_r = ia[order], ib[order], ir[order]
        self.mul_starts = np.searchsorted(self.mul_r, np.arange(self.size))
        self.deriv = []
        for v in range(n):
            src = np.nonzero(self.exps[:, v] > 0)[0]
            dst = []
            for i in src:
                e = self.exps[i].copy()
                e[v] -= 1
                dst.append(self.index[tuple(int(x) for x in e)])
            self.deriv.append((src, np.asarray(dst, dtype=np.int64), self.exps[src, v].astype(float)))


@lru_cache(maxsize=None)
def tables(n: int, D: int) -> _Tables:
    return _Tables(n, D)


def _expand_batch(c: np.ndarray, ndim: int) -> np.ndarray:
    extra = ndim - (c.ndim - 1)
    if extra <= 0:
        return c
    return c.reshape(c.shape[:1] + (1,) * extra + c.shape[1:])


# ---------------------------------------------------------------------------
# truncated power series
# ---------------------------------------------------------------------------

class Series:
    """Truncated power series in ``n`` variables up to total degree ``D``.

    ``c`` has shape ``(size, *batch)``; the batch axes carry independent
    coefficient samples (time grid, base points) that broadcast like numpy.
    """

    __slots__ = ("n", "D", "c")

    def __init__(self, n: int, D: int, c: np.ndarray):
        self.n, self.D = n, D
        self.c = np.asarray(c, dtype=float)
        if self.c.shape[0] != tables(n, D).size:
            raise JetError("coefficient array does not match (n, D)")

    # constructors -----------------------------------------------------
    @classmethod
    def zeros(cls, n: int, D: int, batch: tuple = ()) -> "Series":
        return cls(n, D, np.zeros((tables(n, D).size, *batch)))

    @classmethod
    def constant(cls, n: int, D: int, value) -> "Series":
        value = np.asarray(value, dtype=float)
        c = np.zeros((tables(n, D).size, *value.shape))
        c[0] = value
        return cls(n, D, c)

    @classmethod
    def variable(cls, n: int, D: int, i: int, value=0.0) -> "Series":
        s = cls.constant(n, D, value)
        if D >= 1:
            s.c[1 + i] = 1.0
        return s

    @property
    def batch(self) -> tuple:
        return self.c.shape[1:]

    def copy(self) -> "Series":
        return Series(self.n, self.D, self.c.copy())

    # arithmetic -------------------------------------------------------
    def _coerce(self, other):
        if isinstance(other, Series):
            if other.n != self.n or other.D != self.D:
                raise JetError("series shape mismatch")
            return other
        return None

    def __add__(self, other):
        o = self._coerce(other)
        if o is None:
            other = np.asarray(other, dtype=float)
            bshape = np.broadcast_shapes(self.batch, other.shape)
            c = np.array(np.broadcast_to(_expand_batch(self.c, len(bshape)), (self.c.shape[0], *bshape)))
            c[0] = c[0] + other
            return Series(self.n, self.D, c)
        nd = max(self.c.ndim, o.c.ndim) - 1
        return Series(self.n, self.D, _expand_batch(self.c, nd) + _expand_batch(o.c, nd))

    __radd__ = __add__

    def __neg__(self):
        return Series(self.n, self.D, -self.c)

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        o = self._coerce(other)
        if o is None:
            other = np.asarray(other, dtype=float)
            if other.ndim == 0:
                return Series(self.n, self.D, self.c * float(other))
            nd = max(self.c.ndim - 1, other.ndim)
            return Series(self.n, self.D, _expand_batch(self.c, nd) * other[None, ...])
        t = tables(self.n, self.D)
        nd = max(self.c.ndim, o.c.ndim) - 1
        a, b = _expand_batch(self.c, nd), _expand_batch(o.c, nd)
        prod = a[t.mul_a] * b[t.mul_b]
        return Series(self.n, self.D, np.add.reduceat(prod, t.mul_starts, axis=0))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Series):
            return self * other.reciprocal()
        other = np.asarray(other, dtype=float)
        return self * (1.0 / other)

    def __rtruediv__(self, other):
        return self.reciprocal() * other

    def __pow__(self, e):
        if isinstance(e, (int, np.integer)) and e >= 0:
            out = Series.constant(self.n, self.D, np.ones(self.batch))
            base = self
            k = int(e)
            while k:
                if k & 1:
                    out = out * base
                k >>= 1
                if k:
                    base = base * base
            return out
        return self.power(float(e))

    # elementary functions via Taylor coefficients at the constant term ---
    def apply(self, taylor: np.ndarray) -> "Series":
        """Return f(self) given ``taylor[k] = f^{(k)}(c0)/k!``."""
        taylor = np.asarray(taylor, dtype=float)
        delta = self.copy()
        delta.c[0] = 0.0
        out = Series.constant(self.n, self.D, taylor[self.D])
        for k in range(self.D - 1, -1, -1):
            out = out * delta + taylor[k]
        return out

    def power(self, a: float) -> "Series":
        c0 = self.c[0]
        if np.any(c0 == 0.0):
            raise JetError("real power of a series with vanishing constant term")
        coeffs = np.empty((self.D + 1, *c0.shape))
        coeffs[0] = c0 ** a
        for k in range(1, self.D + 1):
            coeffs[k] = coeffs[k - 1] * (a - k + 1) / (k * c0)
        return self.apply(coeffs)

    def reciprocal(self) -> "Series":
        return self.power(-1.0)

    def sqrt(self) -> "Series":
        return self.power(0.5)

    def _trig(self, phase: int) -> "Series":
        c0 = self.c[0]
        cyc = [np.sin(c0), np.cos(c0), -np.sin(c0), -np.cos(c0)]
        coeffs = np.stack([cyc[(phase + k) % 4] / factorial(k) for k in range(self.D + 1)])
        return self.apply(coeffs)

    def sin(self) -> "Series":
        return self._trig(0)

    def cos(self) -> "Series":
        return self._trig(1)

    def sinc(self) -> "Series":
        """sin(s)/s for a series with zero constant term."""
        if np.any(self.c[0] != 0.0):
            raise JetError("sinc expansion requires a vanishing constant term")
        coeffs = np.zeros((self.D + 1, *self.batch))
        for k in range(0, self.D + 1, 2):
            coeffs[k] = (-1) ** (k // 2) / factorial(k + 1)
        return self.apply(coeffs)

    # structure ---------------------------------------------------------
    def deriv(self, i: int) -> "Series":
        t = tables(self.n, self.D)
        src, dst, fac = t.deriv[i]
        c = np.zeros_like(self.c)
        c[dst] = self.c[src] * fac.reshape((-1,) + (1,) * (self.c.ndim - 1))
        return Series(self.n, self.D, c)

    def homogeneous(self, d: int) -> np.ndarray:
        t = tables(self.n, self.D)
        if d > self.D:
            return np.zeros((n_monomials(self.n, d), *self.batch))
        return self.c[t.offsets[d]:t.offsets[d + 1]]

    def set_homogeneous(self, d: int, values: np.ndarray) -> None:
        t = tables(self.n, self.D)
        self.c[t.offsets[d]:t.offsets[d + 1]] = values

    def degree_window(self, lo: int, hi: int) -> "Series":
        t = tables(self.n, self.D)
        c = np.zeros_like(self.c)
        a, b = t.offsets[max(lo, 0)], t.offsets[min(hi, self.D) + 1]
        c[a:b] = self.c[a:b]
        return Series(self.n, self.D, c)

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        """Evaluate at points ``x`` of shape (P, n); returns (P, *batch)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        t = tables(self.n, self.D)
        mon = monomial_values(x, t.exps)
        return np.tensordot(mon, self.c, axes=(1, 0))


def taylor_of(fn_derivs: Callable[[np.ndarray, int], np.ndarray], c0: np.ndarray, D: int) -> np.ndarray:
    """Helper building Taylor coefficient stacks from a derivative oracle."""
    return np.stack([fn_derivs(c0, k) / factorial(k) for k in range(D + 1)])


# ---------------------------------------------------------------------------
# homogeneous components and graded jets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HomogeneousComponent:
    """One homogeneous piece h with h(s x) = s^degree h(x) for s > 0.

    Polynomial mode stores ``coeffs`` with shape (n_monomials, n_out) or
    (n_monomials, n_out, n_t) for time-sampled coefficients.  Sampled mode
    stores ``rule`` mapping unit vectors (P, n_in) to values (P, n_out).
    """

    degree: int
    n_in: int
    n_out: int
    coeffs: np.ndarray | None = None
    rule: Callable[[np.ndarray], np.ndarray] | None = None
    basis: str = "polynomial"
    derivative_rule: Callable[[np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        if self.basis == "polynomial":
            c = np.asarray(self.coeffs, dtype=float)
            if c.shape[:2] != (n_monomials(self.n_in, self.degree), self.n_out):
                raise JetError(
                    f"coefficient table shape {c.shape} does not fit degree {self.degree}"
                )
            object.__setattr__(self, "coeffs", c)
        elif self.basis == "sampled":
            if self.rule is None:
                raise JetError("sampled component needs an evaluation rule")
        else:
            raise JetError(f"unknown basis {self.basis!r}")

    @classmethod
    def zero(cls, degree: int, n_in: int, n_out: int, tshape: tuple = ()) -> "HomogeneousComponent":
        return cls(degree, n_in, n_out, np.zeros((n_monomials(n_in, degree), n_out, *tshape)))

    @classmethod
    def from_terms(cls, degree: int, n_in: int, n_out: int, terms: dict) -> "HomogeneousComponent":
        c = np.zeros((n_monomials(n_in, degree), n_out))
        for exps, value in terms.items():
            if sum(exps) != degree or len(exps) != n_in:
                raise JetError(f"exponent {exps} does not have degree {degree}")
            c[monomial_index(n_in, degree, exps)] += np.asarray(value, dtype=float)
        return cls(degree, n_in, n_out, c)

    @property
    def is_polynomial(self) -> bool:
        return self.basis == "polynomial"

    @property
    def tshape(self) -> tuple:
        return self.coeffs.shape[2:] if self.is_polynomial else ()

    def terms(self) -> dict:
        if not self.is_polynomial:
            raise JetError("sampled component has no term table")
        return {tuple(int(e) for e in row): self.coeffs[i] for i, row in enumerate(monomials(self.n_in, self.degree))}

    def __call__(self, x) -> np.ndarray:
        return self.evaluate(x)

    def evaluate(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.n_in:
            raise JetError(f"expected points with {self.n_in} coordinates, got {x.shape[-1]}")
        lead = x.shape[:-1]
        pts = x.reshape(-1, self.n_in)
        if self.is_polynomial:
            mon = monomial_values(pts, monomials(self.n_in, self.degree))
            out = np.tensordot(mon, self.coeffs, axes=(1, 0))
        else:
            r = np.linalg.norm(pts, axis=1)
            safe = np.where(r > 0, r, 1.0)
            vals = np.asarray(self.rule(pts / safe[:, None]), dtype=float).reshape(len(pts), self.n_out)
            out = vals * (r ** self.degree)[:, None]
            out[r == 0] = 0.0
        return out.reshape(lead + out.shape[1:])

    def scaled(self, s: float) -> "HomogeneousComponent":
        if self.is_polynomial:
            return HomogeneousComponent(self.degree, self.n_in, self.n_out, self.coeffs * s)
        rule, drule = self.rule, self.derivative_rule
        return HomogeneousComponent(
            self.degree, self.n_in, self.n_out, rule=lambda w: s * rule(w), basis="sampled",
            derivative_rule=None if drule is None else (lambda w: s * drule(w)),
        )

    def differentiate(self) -> "HomogeneousComponent":
        """Jacobian as a component with n_out*n_in outputs (row-major)."""
        if self.degree == 0:
            return HomogeneousComponent.zero(0, self.n_in, self.n_out * self.n_in, self.tshape)
        if not self.is_polynomial:
            if self.derivative_rule is None:
                raise JetError("sampled component without an analytic derivative rule")
            return HomogeneousComponent(
                self.degree - 1, self.n_in, self.n_out * self.n_in, rule=self.derivative_rule, basis="sampled"
            )
        d = self.degree
        out = np.zeros((n_monomials(self.n_in, d - 1), self.n_out, self.n_in, *self.tshape))
        for i, row in enumerate(monomials(self.n_in, d)):
            for v in range(self.n_in):
                if row[v] == 0:
                    continue
                e = row.copy()
                e[v] -= 1
                out[monomial_index(self.n_in, d - 1, e), :, v] += row[v] * self.coeffs[i]
        return HomogeneousComponent(d - 1, self.n_in, self.n_out * self.n_in,
                                    out.reshape(out.shape[0], self.n_out * self.n_in, *self.tshape))

    def jacobian(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        val = self.differentiate().evaluate(x)
        return val.reshape(x.shape[:-1] + (self.n_out, self.n_in) + self.tshape)


@dataclass
class GradedMapJet:
    """Finite sum of homogeneous components with distinct degrees."""

    n_in: int
    n_out: int
    components: dict = field(default_factory=dict)
    max_degree: int | None = None

    def __post_init__(self):
        comps = {}
        for d, h in dict(self.components).items():
            if int(d) != h.degree:
                raise JetError("component keyed under the wrong degree")
            if (h.n_in, h.n_out) != (self.n_in, self.n_out):
                raise JetError("component dimensions do not match the jet")
            comps[int(d)] = h
        self.components = dict(sorted(comps.items()))
        if self.max_degree is None:
            self.max_degree = max(self.components, default=0)
        if any(d > self.max_degree for d in self.components):
            raise JetError("component degree exceeds max_degree")

    @classmethod
    def from_components(cls, comps: Iterable[HomogeneousComponent], n_in: int | None = None,
                        n_out: int | None = None, max_degree: int | None = None) -> "GradedMapJet":
        comps = list(comps)
        if n_in is None:
            n_in, n_out = comps[0].n_in, comps[0].n_out
        out = cls(n_in, n_out, {}, max_degree=max_degree if max_degree is not None else 0)
        acc: dict = {}
        for h in comps:
            acc[h.degree] = h if h.degree not in acc else add_components(acc[h.degree], h)
        out.components = dict(sorted(acc.items()))
        out.max_degree = max([max_degree or 0, *acc.keys()])
        return out

    @classmethod
    def identity(cls, n: int) -> "GradedMapJet":
        return cls(n, n, {1: HomogeneousComponent(1, n, n, np.eye(n))})

    @property
    def degrees(self) -> list:
        return list(self.components)

    @property
    def is_polynomial(self) -> bool:
        return all(h.is_polynomial for h in self.components.values())

    @property
    def tshape(self) -> tuple:
        for h in self.components.values():
            if h.is_polynomial and h.tshape:
                return h.tshape
        return ()

    def component(self, d: int) -> HomogeneousComponent:
        if d in self.components:
            return self.components[d]
        return HomogeneousComponent.zero(d, self.n_in, self.n_out, self.tshape)

    def lowest_degree(self, tol: float = 0.0) -> int | None:
        for d, h in self.components.items():
            if not h.is_polynomial or np.max(np.abs(h.coeffs), initial=0.0) > tol:
                return d
        return None

    def __call__(self, x):
        return self.evaluate(x)

    def evaluate(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.n_in:
            raise JetError(f"expected points with {self.n_in} coordinates, got {x.shape[-1]}")
        out = np.zeros(x.shape[:-1] + (self.n_out,) + self.tshape)
        for d in sorted(self.components, reverse=True):
            out = out + self.components[d].evaluate(x)
        return out

    def __add__(self, other: "GradedMapJet") -> "GradedMapJet":
        return GradedMapJet.from_components(
            [*self.components.values(), *other.components.values()], self.n_in, self.n_out,
            max(self.max_degree, other.max_degree),
        )

    def __neg__(self):
        return self.scaled(-1.0)

    def __sub__(self, other: "GradedMapJet") -> "GradedMapJet":
        return self + (-other)

    def scaled(self, s: float) -> "GradedMapJet":
        return GradedMapJet(self.n_in, self.n_out, {d: h.scaled(s) for d, h in self.components.items()},
                            self.max_degree)

    def truncate(self, cutoff: int, lowest: int = 0) -> "GradedMapJet":
        return GradedMapJet(self.n_in, self.n_out,
                            {d: h for d, h in self.components.items() if lowest <= d <= cutoff},
                            max(min(self.max_degree, cutoff), 0))

    def with_component(self, h: HomogeneousComponent) -> "GradedMapJet":
        comps = dict(self.components)
        comps[h.degree] = add_components(comps[h.degree], h) if h.degree in comps else h
        return GradedMapJet(self.n_in, self.n_out, comps, max(self.max_degree, h.degree))

    def select_outputs(self, idx: Sequence[int]) -> "GradedMapJet":
        idx = list(idx)
        comps = {}
        for d, h in self.components.items():
            if not h.is_polynomial:
                rule = h.rule
                comps[d] = HomogeneousComponent(d, self.n_in, len(idx), rule=lambda w, r=rule: r(w)[:, idx],
                                                basis="sampled")
            else:
                comps[d] = HomogeneousComponent(d, self.n_in, len(idx), h.coeffs[:, idx])
        return GradedMapJet(self.n_in, len(idx), comps, self.max_degree)

    def differentiate(self) -> "GradedMapJet":
        if self.max_degree < 1:
            raise JetError("differentiate needs max_degree >= 1")
        comps = {d - 1: h.differentiate() for d, h in self.components.items() if d >= 1}
        return GradedMapJet(self.n_in, self.n_out * self.n_in, comps, self.max_degree - 1)

    def jacobian(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        val = self.differentiate().evaluate(x)
        return val.reshape(x.shape[:-1] + (self.n_out, self.n_in) + self.tshape)

    # series bridge -------------------------------------------------------
    def to_series(self, D: int) -> list:
        """Output components as ``Series`` objects in the input variables."""
        if not self.is_polynomial:
            raise JetError("series conversion needs polynomial components")
        t = tables(self.n_in, D)
        c = np.zeros((t.size, self.n_out, *self.tshape))
        for d, h in self.components.items():
            if d <= D:
                hc = h.coeffs.reshape(h.coeffs.shape + (1,) * (c.ndim - h.coeffs.ndim))
                c[t.offsets[d]:t.offsets[d + 1]] = hc
        return [Series(self.n_in, D, c[:, k]) for k in range(self.n_out)]

    @classmethod
    def from_series(cls, series: Sequence[Series], lo: int = 0, hi: int | None = None) -> "GradedMapJet":
        n, D = series[0].n, series[0].D
        hi = D if hi is None else min(hi, D)
        nd = max(s.c.ndim for s in series)
        arrs = [_expand_batch(s.c, nd - 1) for s in series]
        bshape = np.broadcast_shapes(*(a.shape[1:] for a in arrs))
        stack = np.stack([np.broadcast_to(a, (a.shape[0], *bshape)) for a in arrs], axis=1)
        t = tables(n, D)
        comps = {}
        for d in range(lo, hi + 1):
            comps[d] = HomogeneousComponent(d, n, len(series), stack[t.offsets[d]:t.offsets[d + 1]].copy())
        return cls(n, len(series), comps, hi)

    def compose_series(self, args: Sequence[Series]) -> list:
        """Evaluate this polynomial map on series arguments (constant terms allowed)."""
        if len(args) != self.n_in:
            raise JetError("wrong number of series arguments")
        if not self.is_polynomial:
            raise JetError("composition needs polynomial components")
        n, D = args[0].n, args[0].D
        max_pow = self.max_degree
        powers = []
        for a in args:
            row = [Series.constant(n, D, np.ones(a.batch))]
            for _ in range(max_pow):
                row.append(row[-1] * a)
            powers.append(row)
        outs = [Series.zeros(n, D) for _ in range(self.n_out)]
        cache: dict = {}
        for d, h in self.components.items():
            for i, row in enumerate(monomials(self.n_in, d)):
                coeff = h.coeffs[i]
                if not np.any(coeff):
                    continue
                key = tuple(int(e) for e in row)
                mono = cache.get(key)
                if mono is None:
                    mono = None
                    for v, e in enumerate(key):
                        if e:
                            mono = powers[v][e] if mono is None else mono * powers[v][e]
                    if mono is None:
                        mono = powers[0][0]
                    cache[key] = mono
                for k in range(self.n_out):
                    ck = coeff[k]
                    if np.any(ck):
                        outs[k] = outs[k] + mono * ck
        return outs

    # serialization ------------------------------------------------------
    def to_json(self) -> dict:
        comps = []
        for d, h in self.components.items():
            if not h.is_polynomial:
                raise JetError("sampled components cannot be serialized")
            terms = [{"exps": [int(e) for e in row], "value": h.coeffs[i].tolist()}
                     for i, row in enumerate(monomials(self.n_in, d))]
            comps.append({"degree": int(d), "terms": terms})
        return {"n_in": self.n_in, "n_out": self.n_out, "max_degree": int(self.max_degree),
                "components": comps}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)

    @classmethod
    def from_json(cls, doc: dict) -> "GradedMapJet":
        n_in, n_out = int(doc["n_in"]), int(doc["n_out"])
        comps = {}
        for comp in doc["components"]:
            d = int(comp["degree"])
            vals = [np.asarray(t["value"], dtype=float) for t in comp["terms"]]
            tshape = vals[0].shape[1:] if vals else ()
            c = np.zeros((n_monomials(n_in, d), n_out, *tshape))
            for t, v in zip(comp["terms"], vals):
                if sum(t["exps"]) != d:
                    raise JetError(f"term {t['exps']} has the wrong degree")
                c[monomial_index(n_in, d, t["exps"])] = v
            comps[d] = HomogeneousComponent(d, n_in, n_out, c)
        return cls(n_in, n_out, comps, doc.get("max_degree"))

    @classmethod
    def loads(cls, text: str) -> "GradedMapJet":
        return cls.from_json(json.loads(text))


class PeriodicGradedJet(GradedMapJet):
    """Graded jet whose coefficients are samples on a uniform periodic time grid."""

    def __init__(self, n_in, n_out, components=None, max_degree=None, period: float = 2 * np.pi):
        super().__init__(n_in, n_out, components or {}, max_degree)
        self.period = float(period)

    @property
    def n_t(self) -> int:
        return self.tshape[0] if self.tshape else 0

    @property
    def times(self) -> np.ndarray:
        return self.period * np.arange(self.n_t) / self.n_t

    def at_time_index(self, k: int) -> GradedMapJet:
        """Slice at sample ``k``; indices are taken modulo the grid size."""
        k = k % self.n_t
        return GradedMapJet(self.n_in, self.n_out,
                            {d: HomogeneousComponent(d, self.n_in, self.n_out, h.coeffs[..., k])
                             for d, h in self.components.items()}, self.max_degree)

    @classmethod
    def wrap(cls, jet: GradedMapJet, period: float) -> "PeriodicGradedJet":
        return cls(jet.n_in, jet.n_out, jet.components, jet.max_degree, period)


def add_components(a: HomogeneousComponent, b: HomogeneousComponent) -> HomogeneousComponent:
    if a.degree != b.degree:
        raise JetError("cannot add components of different degree")
    if a.is_polynomial and b.is_polynomial:
        nd = max(a.coeffs.ndim, b.coeffs.ndim)
        ca = a.coeffs.reshape(a.coeffs.shape + (1,) * (nd - a.coeffs.ndim))
        cb = b.coeffs.reshape(b.coeffs.shape + (1,) * (nd - b.coeffs.ndim))
        return HomogeneousComponent(a.degree, a.n_in, a.n_out, ca + cb)
    return HomogeneousComponent(a.degree, a.n_in, a.n_out,
                                rule=lambda w: _unit_eval(a, w) + _unit_eval(b, w), basis="sampled")


def _unit_eval(h: HomogeneousComponent, w: np.ndarray) -> np.ndarray:
    return h.rule(w) if not h.is_polynomial else h.evaluate(w)


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------

def evaluate(jet: GradedMapJet, x) -> np.ndarray:
    return jet.evaluate(x)


def differentiate(jet: GradedMapJet) -> GradedMapJet:
    return jet.differentiate()


def compose_truncated(outer: GradedMapJet, inner: GradedMapJet, cutoff: int) -> GradedMapJet:
    """Graded expansion of ``outer o inner`` keeping degrees 1..cutoff."""
    if cutoff < 1:
        raise JetError("cutoff must be >= 1")
    if inner.n_out != outer.n_in:
        raise JetError("dimension mismatch in composition")
    if 0 in inner.components and np.any(inner.components[0].coeffs):
        raise JetError("inner map must vanish at the origin")
    args = inner.truncate(cutoff, lowest=1).to_series(cutoff)
    outs = outer.truncate(cutoff).compose_series(args)
    jet = GradedMapJet.from_series(outs, lo=0, hi=cutoff)
    comps = {d: h for d, h in jet.components.items() if np.any(h.coeffs)}
    return GradedMapJet(jet.n_in, outer.n_out, comps, cutoff)


def grade(table: dict, n_in: int, n_out: int) -> GradedMapJet:
    """Group a mixed-degree coefficient table {exps: vector} by total degree."""
    by_degree: dict = {}
    for exps, value in table.items():
        exps = tuple(int(e) for e in exps)
        if len(exps) != n_in:
            raise JetError(f"exponent tuple {exps} has wrong length")
        by_degree.setdefault(sum(exps), {})[exps] = value
    comps = {d: HomogeneousComponent.from_terms(d, n_in, n_out, terms) for d, terms in by_degree.items()}
    comps = {d: h for d, h in comps.items() if np.any(h.coeffs)}
    return GradedMapJet(n_in, n_out, comps)


def flatten(jet: GradedMapJet) -> dict:
    out = {}
    for h in jet.components.values():
        for exps, v in h.terms().items():
            if np.any(v):
                out[exps] = np.array(v)
    return out


def homogeneity_defect(h: HomogeneousComponent, x: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """Relative defect |h(l x) - l^d h(x)| / |l^d h(x)| for each pair."""
    hx = h.evaluate(x)
    hlx = h.evaluate(x * lam[:, None])
    scale = np.linalg.norm((lam ** h.degree)[:, None] * hx, axis=1)
    return np.linalg.norm(hlx - (lam ** h.degree)[:, None] * hx, axis=1) / np.where(scale > 0, scale, 1.0)


def fit_polynomial(points: np.ndarray, values: np.ndarray, degree: int) -> tuple:
    """Least-squares fit of sampled values by a degree-``degree`` homogeneous polynomial.

    Returns (coeffs, max_abs_residual) where coeffs has shape (n_monomials, n_out).
    """
    points = np.asarray(points, dtype=float)
    values = np.asarray(values, dtype=float).reshape(len(points), -1)
    exps = monomials(points.shape[1], degree)
    A = monomial_values(points, exps)
    coeffs, *_ = np.linalg.lstsq(A, values, rcond=None)
    resid = np.max(np.abs(A @ coeffs - values), initial=0.0)
    return coeffs, float(resid)
