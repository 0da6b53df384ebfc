"""Sparse multivariate polynomials over a fixed positional variable space.

Variables are positional (index 0 .. nvars-1); names live in model metadata,
not here.  Monomials are exponent tuples ordered graded-lexicographically,
which gives the degree-blocked layout shared with moment vectors: index 0 is
the constant monomial, then all monomials of degree 1 in lexicographic order
of their exponent tuples, then degree 2, and so on.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

# Coefficients below this magnitude are dropped when a polynomial is
# normalized after arithmetic.
DROP_THRESHOLD = 1e-14


def n_monomials(nvars: int, degree: int) -> int:
    """Number of monomials in `nvars` variables of total degree <= `degree`."""
    return math.comb(nvars + degree, degree)


def _exponents_of_degree(nvars, degree):
    if nvars == 1:
        yield (degree,)
        return
    for head in range(degree + 1):
        for tail in _exponents_of_degree(nvars - 1, degree - head):
            yield (head,) + tail


@lru_cache(maxsize=None)
def monomial_basis(nvars: int, degree: int) -> tuple:
    """All exponent tuples of total degree <= `degree`, graded-lex ordered."""
    if nvars < 1:
        raise ValueError("nvars must be >= 1")
    out = []
    for d in range(degree + 1):
        out.extend(_exponents_of_degree(nvars, d))
    return tuple(out)


@lru_cache(maxsize=None)
def _index_table(nvars, degree):
    return {mono: i for i, mono in enumerate(monomial_basis(nvars, degree))}


def monomial_index(exponents: tuple) -> int:
    """Graded-lex index of an exponent tuple within its ambient basis."""
    return _index_table(len(exponents), sum(exponents))[exponents]


def monomial_at(nvars: int, index: int, degree: int) -> tuple:
    """Inverse of `monomial_index` over the basis of the given degree."""
    return monomial_basis(nvars, degree)[index]


class Monomial:
    """An exponent vector over the ambient variable space."""

    __slots__ = ("exponents",)

    def __init__(self, exponents):
        self.exponents = tuple(int(e) for e in exponents)
        if any(e < 0 for e in self.exponents):
            raise ValueError("exponents must be non-negative")

    @property
    def degree(self) -> int:
        return sum(self.exponents)

    @property
    def nvars(self) -> int:
        return len(self.exponents)

    def index(self) -> int:
        return monomial_index(self.exponents)

    @classmethod
    def from_index(cls, nvars: int, index: int, degree: int) -> "Monomial":
        return cls(monomial_at(nvars, index, degree))

    def __mul__(self, other: "Monomial") -> "Monomial":
        if len(self.exponents) != len(other.exponents):
            raise ValueError("mismatched variable spaces")
        return Monomial(a + b for a, b in zip(self.exponents, other.exponents))

    def __eq__(self, other):
        return isinstance(other, Monomial) and self.exponents == other.exponents

    def __hash__(self):
        return hash(self.exponents)

    def __repr__(self):
        return f"Monomial{self.exponents}"


def _mono_add(a, b):
    return tuple(x + y for x, y in zip(a, b))


class Polynomial:
    """Sparse polynomial: finite map from exponent tuples to real coefficients.

    Immutable after construction; all operations return new values, so
    polynomials are safe to share across threads.
    """

    __slots__ = ("nvars", "terms")

    def __init__(self, nvars: int, terms=None):
        self.nvars = int(nvars)
        clean = {}
        if terms:
            for mono, coeff in terms.items():
                if len(mono) != self.nvars:
                    raise ValueError(
                        f"term {mono} does not match nvars={self.nvars}"
                    )
                c = float(coeff)
                if abs(c) > DROP_THRESHOLD:
                    clean[tuple(int(e) for e in mono)] = c
        self.terms = clean

    # -- constructors ------------------------------------------------------

    @classmethod
    def zero(cls, nvars: int) -> "Polynomial":
        return cls(nvars, {})

    @classmethod
    def constant(cls, nvars: int, value: float) -> "Polynomial":
        return cls(nvars, {(0,) * nvars: value})

    @classmethod
    def variable(cls, nvars: int, i: int) -> "Polynomial":
        if not 0 <= i < nvars:
            raise ValueError(f"variable index {i} out of range")
        e = [0] * nvars
        e[i] = 1
        return cls(nvars, {tuple(e): 1.0})

    @classmethod
    def monomial(cls, nvars: int, exponents, coeff: float = 1.0) -> "Polynomial":
        return cls(nvars, {tuple(exponents): coeff})

    # -- structure ---------------------------------------------------------

    @property
    def degree(self) -> int:
        """Max total degree over stored terms; degree(0) is 0 by convention."""
        if not self.terms:
            return 0
        return max(sum(m) for m in self.terms)

    def coefficient(self, exponents) -> float:
        return self.terms.get(tuple(exponents), 0.0)

    def coefficient_vector(self, degree: int) -> np.ndarray:
        """Dense graded-lex coefficient vector up to the given degree."""
        if self.degree > degree:
            raise ValueError(f"degree {self.degree} exceeds requested {degree}")
        table = _index_table(self.nvars, degree)
        vec = np.zeros(len(table))
        for mono, coeff in self.terms.items():
            vec[table[mono]] = coeff
        return vec

    @classmethod
    def from_coefficient_vector(cls, nvars: int, vec, degree: int) -> "Polynomial":
        basis = monomial_basis(nvars, degree)
        if len(vec) != len(basis):
            raise ValueError("coefficient vector length does not match basis")
        return cls(nvars, {m: c for m, c in zip(basis, vec)})

    # -- ring operations ---------------------------------------------------

    def _check_space(self, other):
        if self.nvars != other.nvars:
            raise ValueError(
                f"mismatched variable spaces: {self.nvars} vs {other.nvars}"
            )

    def __add__(self, other) -> "Polynomial":
        if isinstance(other, (int, float)):
            other = Polynomial.constant(self.nvars, other)
        self._check_space(other)
        terms = dict(self.terms)
        for mono, coeff in other.terms.items():
            terms[mono] = terms.get(mono, 0.0) + coeff
        return Polynomial(self.nvars, terms)

    __radd__ = __add__

    def __neg__(self) -> "Polynomial":
        return Polynomial(self.nvars, {m: -c for m, c in self.terms.items()})

    def __sub__(self, other) -> "Polynomial":
        if isinstance(other, (int, float)):
            other = Polynomial.constant(self.nvars, other)
        return self + (-other)

    def __rsub__(self, other) -> "Polynomial":
        return (-self) + other

    def __mul__(self, other) -> "Polynomial":
        if isinstance(other, (int, float)):
            return Polynomial(
                self.nvars, {m: c * other for m, c in self.terms.items()}
            )
        self._check_space(other)
        terms = {}
        for m1, c1 in self.terms.items():
            for m2, c2 in other.terms.items():
                key = _mono_add(m1, m2)
                terms[key] = terms.get(key, 0.0) + c1 * c2
        return Polynomial(self.nvars, terms)

    __rmul__ = __mul__

    def __pow__(self, k: int) -> "Polynomial":
        if k < 0 or k != int(k):
            raise ValueError("only non-negative integer powers")
        result = Polynomial.constant(self.nvars, 1.0)
        base = self
        k = int(k)
        while k:
            if k & 1:
                result = result * base
            base = base * base if k > 1 else base
            k >>= 1
        return result

    # -- evaluation and substitution ----------------------------------------

    def __call__(self, point) -> float:
        return self.eval(point)

    def eval(self, point) -> float:
        """Evaluate at a single point (length-nvars sequence)."""
        pt = np.asarray(point, dtype=float)
        if pt.shape != (self.nvars,):
            raise ValueError(f"point must have {self.nvars} coordinates")
        total = 0.0
        for mono, coeff in self.terms.items():
            v = coeff
            for x, e in zip(pt, mono):
                if e:
                    v *= x**e
            total += v
        return total

    def eval_many(self, points: np.ndarray) -> np.ndarray:
        """Vectorized evaluation over rows of an (N, nvars) array."""
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != self.nvars:
            raise ValueError(f"points must be (N, {self.nvars})")
        out = np.zeros(pts.shape[0])
        for mono, coeff in self.terms.items():
            term = np.full(pts.shape[0], coeff)
            for i, e in enumerate(mono):
                if e == 1:
                    term *= pts[:, i]
                elif e > 1:
                    term *= pts[:, i] ** e
            out += term
        return out

    def compose(self, subs) -> "Polynomial":
        """Substitute subs[i] for variable i; exact polynomial substitution.

        All substituted polynomials must share one target variable space.
        """
        subs = list(subs)
        if len(subs) != self.nvars:
            raise ValueError(
                f"need {self.nvars} substitutions, got {len(subs)}"
            )
        m = subs[0].nvars
        for s in subs:
            if s.nvars != m:
                raise ValueError("substitutions live in different spaces")
        powers = [{0: Polynomial.constant(m, 1.0)} for _ in range(self.nvars)]

        def power(i, e):
            cache = powers[i]
            if e not in cache:
                cache[e] = power(i, e - 1) * subs[i]
            return cache[e]

        result = Polynomial.zero(m)
        for mono, coeff in self.terms.items():
            term = Polynomial.constant(m, coeff)
            for i, e in enumerate(mono):
                if e:
                    term = term * power(i, e)
            result = result + term
        return result

    def lift(self, nvars: int, var_map) -> "Polynomial":
        """Re-embed into a larger space, sending variable i to var_map[i]."""
        var_map = list(var_map)
        if len(var_map) != self.nvars:
            raise ValueError("var_map must cover every variable")
        terms = {}
        for mono, coeff in self.terms.items():
            e = [0] * nvars
            for i, exp in enumerate(mono):
                e[var_map[i]] += exp
            terms[tuple(e)] = terms.get(tuple(e), 0.0) + coeff
        return Polynomial(nvars, terms)

    def affine_change_of_variables(self, scale, shift) -> "Polynomial":
        """Return q with q(z) = p(scale * z + shift) componentwise.

        Invertible with reciprocal scale and shift -shift/scale.
        """
        scale = np.asarray(scale, dtype=float)
        shift = np.asarray(shift, dtype=float)
        if scale.shape != (self.nvars,) or shift.shape != (self.nvars,):
            raise ValueError("scale and shift must have one entry per variable")
        if np.any(scale == 0.0):
            raise ValueError("scale entries must be non-zero")
        subs = [
            Polynomial(
                self.nvars,
                {
                    tuple(1 if j == i else 0 for j in range(self.nvars)): scale[i],
                    (0,) * self.nvars: shift[i],
                },
            )
            for i in range(self.nvars)
        ]
        return self.compose(subs)

    # -- bounds --------------------------------------------------------------

    def max_abs_on_box(self, bounds) -> float:
        """Interval-arithmetic upper bound on |p| over an axis-aligned box."""
        bounds = list(bounds)
        if len(bounds) != self.nvars:
            raise ValueError("bounds must have one (lo, hi) pair per variable")
        total = 0.0
        for mono, coeff in self.terms.items():
            v = abs(coeff)
            for (lo, hi), e in zip(bounds, mono):
                if e:
                    v *= max(abs(lo), abs(hi)) ** e
            total += v
        return total

    # -- misc ----------------------------------------------------------------

    def is_zero(self) -> bool:
        return not self.terms

    def max_coeff_diff(self, other) -> float:
        self._check_space(other)
        keys = set(self.terms) | set(other.terms)
        if not keys:
            return 0.0
        return max(
            abs(self.terms.get(k, 0.0) - other.terms.get(k, 0.0)) for k in keys
        )

    def __eq__(self, other):
        return (
            isinstance(other, Polynomial)
            and self.nvars == other.nvars
            and self.terms == other.terms
        )

    def __hash__(self):
        return hash((self.nvars, tuple(sorted(self.terms.items()))))

    def __repr__(self):
        if not self.terms:
            return "0"
        parts = []
        for mono in sorted(self.terms, key=lambda m: (sum(m), m)):
            coeff = self.terms[mono]
            factors = "".join(
                f"*x{i}^{e}" if e > 1 else f"*x{i}"
                for i, e in enumerate(mono)
                if e
            )
            parts.append(f"{coeff:g}{factors}")
        return " + ".join(parts)
