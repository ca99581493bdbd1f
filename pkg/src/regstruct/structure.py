"""Graded symbol algebra: basis symbols, truncated vectors, and group elements.

The algebra is a finite graded vector space T = span(symbols) with grading
given by the homogeneity of each symbol, together with unipotent
lower-triangular "reexpansion" maps acting on the basis.  Symbols are
structured tokens: polynomial monomials X^k, epsilon letters E^m, a noise
letter Xi, powers of the integrated noise I(Xi), and formally integrated
symbols I(tau) added by model extension.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Symbol",
    "StructureVector",
    "GroupElement",
    "Sector",
    "RegularityStructure",
    "build_structure",
    "project",
    "truncate",
    "group_apply",
    "group_compose",
    "polynomial_shift",
    "load_structure_file",
]

_HOM_TOL = 1e-9


@dataclass(frozen=True)
class Symbol:
    """One basis symbol.

    x: polynomial multi-index (one exponent per grid axis).
    e: epsilon-letter powers, one per grid axis.
    xi: power of the noise letter (0 or 1).
    i_pow: power of the integrated noise I(Xi).
    tag: name of the base symbol for formally integrated symbols I(tau);
         empty for the core Phi4/polynomial alphabet.
    homogeneity: grading exponent; fixed when the structure is built.
    """

    x: tuple[int, ...]
    e: tuple[int, ...] = ()
    xi: int = 0
    i_pow: int = 0
    tag: str = ""
    homogeneity: float = 0.0

    @property
    def name(self) -> str:
        if self.tag:
            return self.tag
        parts = []
        if self.xi:
            parts.append("Xi")
        if self.i_pow == 1:
            parts.append("I(Xi)")
        elif self.i_pow > 1:
            parts.append(f"I(Xi)^{self.i_pow}")
        for i, k in enumerate(self.x):
            if k:
                parts.append(f"X{i}" + (f"^{k}" if k > 1 else ""))
        for i, m in enumerate(self.e):
            if m:
                parts.append(f"E{i}" + (f"^{m}" if m > 1 else ""))
        return "*".join(parts) if parts else "1"

    @property
    def kind(self) -> str:
        if self.tag:
            return "integrated"
        if self.xi:
            return "noise"
        if any(self.e):
            return "epsilon-weighted"
        if self.i_pow == 1:
            return "integrated"
        if self.i_pow > 1:
            return "product"
        return "polynomial"

    @property
    def is_polynomial(self) -> bool:
        return self.xi == 0 and self.i_pow == 0 and not self.tag and not any(self.e)

    @property
    def is_unit(self) -> bool:
        return self.is_polynomial and not any(self.x)

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Symbol({self.name}, |.|={self.homogeneity:g})"


def _unit(dim: int) -> Symbol:
    return Symbol(x=(0,) * dim, e=(0,) * dim)


def _poly_homogeneity(k: Sequence[int], scaling: Sequence[int]) -> float:
    return float(sum(s * p for s, p in zip(scaling, k)))


@dataclass
class StructureVector:
    """Element of the truncated space T_{<gamma}: finitely many coefficients."""

    coefficients: dict[Symbol, float]
    truncation: float = math.inf

    def __post_init__(self) -> None:
        self.coefficients = {
            s: float(c)
            for s, c in self.coefficients.items()
            if s.homogeneity < self.truncation - _HOM_TOL
        }

    def __add__(self, other: "StructureVector") -> "StructureVector":
        out = dict(self.coefficients)
        for s, c in other.coefficients.items():
            out[s] = out.get(s, 0.0) + c
        return StructureVector(out, min(self.truncation, other.truncation))

    def __sub__(self, other: "StructureVector") -> "StructureVector":
        return self + other.scale(-1.0)

    def scale(self, a: float) -> "StructureVector":
        return StructureVector({s: a * c for s, c in self.coefficients.items()}, self.truncation)

    def coeff(self, sym: Symbol) -> float:
        return self.coefficients.get(sym, 0.0)

    def level_norm(self, level: float) -> float:
        """Max-abs of the coefficients at homogeneity exactly `level`."""
        vals = [abs(c) for s, c in self.coefficients.items() if abs(s.homogeneity - level) <= _HOM_TOL]
        return max(vals, default=0.0)

    def levels(self) -> list[float]:
        out: list[float] = []
        for s in self.coefficients:
            if not any(abs(s.homogeneity - l) <= _HOM_TOL for l in out):
                out.append(s.homogeneity)
        return sorted(out)

    def max_abs(self) -> float:
        return max((abs(c) for c in self.coefficients.values()), default=0.0)


def project(v: StructureVector, level: float) -> StructureVector:
    """Projection Q_level onto the component of exactly the given homogeneity."""
    return StructureVector(
        {s: c for s, c in v.coefficients.items() if abs(s.homogeneity - level) <= _HOM_TOL},
        v.truncation,
    )


def truncate(v: StructureVector, gamma: float) -> StructureVector:
    return StructureVector(dict(v.coefficients), min(v.truncation, gamma))


class GroupElement:
    """Unipotent lower-triangular map on the symbol basis.

    Stored column-wise: columns[tau] = {sigma: coeff} means tau maps to
    sum(coeff * sigma).  Missing columns act as the identity.
    """

    def __init__(self, columns: Mapping[Symbol, Mapping[Symbol, float]] | None = None):
        self.columns: dict[Symbol, dict[Symbol, float]] = {
            t: dict(col) for t, col in (columns or {}).items()
        }

    @staticmethod
    def identity() -> "GroupElement":
        return GroupElement()

    def column(self, tau: Symbol) -> dict[Symbol, float]:
        return dict(self.columns.get(tau, {tau: 1.0}))

    def check_unipotent(self, symbols: Iterable[Symbol], tol: float = 1e-12) -> None:
        for tau in symbols:
            for sigma, c in self.column(tau).items():
                if sigma == tau:
                    if abs(c - 1.0) > tol:
                        raise ValueError(f"diagonal coefficient of {tau.name} is {c}, not 1")
                elif sigma.homogeneity >= tau.homogeneity - _HOM_TOL and abs(c) > tol:
                    raise ValueError(
                        f"{tau.name} -> {sigma.name} violates triangularity "
                        f"({sigma.homogeneity} >= {tau.homogeneity})"
                    )


def group_apply(gamma: GroupElement, v: StructureVector, check: bool = False) -> StructureVector:
    """Apply a group element to a vector; linear, grading non-increasing."""
    if check:
        gamma.check_unipotent(v.coefficients.keys())
    out: dict[Symbol, float] = {}
    for tau, c in v.coefficients.items():
        for sigma, g in gamma.column(tau).items():
            out[sigma] = out.get(sigma, 0.0) + c * g
    return StructureVector(out, v.truncation)


def group_compose(g1: GroupElement, g2: GroupElement) -> GroupElement:
    """Composition g1 o g2 (matrix product on the shared basis)."""
    cols: dict[Symbol, dict[Symbol, float]] = {}
    taus = set(g1.columns) | set(g2.columns)
    for tau in taus:
        acc: dict[Symbol, float] = {}
        for mid, c2 in g2.column(tau).items():
            for sigma, c1 in g1.column(mid).items():
                acc[sigma] = acc.get(sigma, 0.0) + c1 * c2
        cols[tau] = acc
    return GroupElement(cols)


@dataclass(frozen=True)
class Sector:
    """Structure-group invariant subset of the basis."""

    symbols: tuple[Symbol, ...]

    @property
    def regularity(self) -> float:
        return min((s.homogeneity for s in self.symbols), default=0.0)

    @property
    def is_function_like(self) -> bool:
        return abs(self.regularity) <= _HOM_TOL and any(s.is_unit for s in self.symbols)

    def __contains__(self, sym: Symbol) -> bool:
        return sym in self.symbols


@dataclass(frozen=True)
class RegularityStructure:
    """Finite graded basis with scaling and test-function smoothness r."""

    symbols: tuple[Symbol, ...]
    scaling: tuple[int, ...]
    r: int
    beta: float = 2.0
    name: str = "custom"

    def __post_init__(self) -> None:
        names = [s.name for s in self.symbols]
        dupes = {n for n in names if names.count(n) > 1}
        if dupes:
            raise ValueError(f"duplicate symbol ids: {sorted(dupes)}")
        if self.r <= abs(self.min_homogeneity):
            raise ValueError(
                f"r={self.r} must exceed |min A|={abs(self.min_homogeneity):g}"
            )
        self._check_polynomial_gaps()

    def _check_polynomial_gaps(self) -> None:
        # The polynomial part has to be downward closed: X^k present forces
        # every X^j with j <= k componentwise.
        polys = {s.x for s in self.symbols if s.is_polynomial}
        for k in polys:
            for axis in range(len(k)):
                if k[axis] > 0:
                    below = tuple(v - (1 if i == axis else 0) for i, v in enumerate(k))
                    if below not in polys:
                        raise ValueError(
                            f"polynomial degree gap: X^{k} present but X^{below} missing"
                        )

    @property
    def dim(self) -> int:
        return len(self.scaling)

    @property
    def grading(self) -> tuple[float, ...]:
        out: list[float] = []
        for s in self.symbols:
            if not any(abs(s.homogeneity - l) <= _HOM_TOL for l in out):
                out.append(s.homogeneity)
        return tuple(sorted(out))

    @property
    def min_homogeneity(self) -> float:
        return min(s.homogeneity for s in self.symbols)

    @property
    def unit(self) -> Symbol:
        for s in self.symbols:
            if s.is_unit:
                return s
        raise ValueError("structure has no unit symbol")

    def symbol(self, name: str) -> Symbol:
        for s in self.symbols:
            if s.name == name:
                return s
        raise KeyError(name)

    def below(self, gamma: float) -> tuple[Symbol, ...]:
        return tuple(s for s in self.symbols if s.homogeneity < gamma - _HOM_TOL)

    def poly_symbol(self, k: Sequence[int]) -> Symbol:
        key = tuple(int(v) for v in k)
        for s in self.symbols:
            if s.is_polynomial and s.x == key:
                return s
        raise KeyError(f"X^{key} not in structure")

    def has_poly(self, k: Sequence[int]) -> bool:
        key = tuple(int(v) for v in k)
        return any(s.is_polynomial and s.x == key for s in self.symbols)

    def sector(self, names: Iterable[str]) -> Sector:
        return Sector(tuple(self.symbol(n) for n in names))

    def function_like_sector(self) -> Sector:
        return Sector(tuple(s for s in self.symbols if s.homogeneity >= -_HOM_TOL))

    def with_symbol(self, sym: Symbol) -> "RegularityStructure":
        return replace(self, symbols=tuple(list(self.symbols) + [sym]))

    def vector(self, data: Mapping[str, float], truncation: float = math.inf) -> StructureVector:
        return StructureVector({self.symbol(n): float(c) for n, c in data.items()}, truncation)


def _poly_alphabet(scaling: Sequence[int], degree: float) -> list[Symbol]:
    """All X^k with |k|_s <= degree, in homogeneity order."""
    dim = len(scaling)
    out = []
    max_per_axis = [int(degree // s) for s in scaling]

    def rec(prefix: tuple[int, ...]) -> None:
        if len(prefix) == dim:
            h = _poly_homogeneity(prefix, scaling)
            if h <= degree + _HOM_TOL:
                out.append(Symbol(x=prefix, e=(0,) * dim, homogeneity=h))
            return
        for v in range(max_per_axis[len(prefix)] + 1):
            rec(prefix + (v,))

    rec(())
    return sorted(out, key=lambda s: (s.homogeneity, s.name))


def build_structure(
    preset: str = "poly",
    scaling: Sequence[int] = (2, 1),
    degree: float = 2.0,
    kappa: float = 0.01,
    r: int = 2,
    e_axis: int | None = None,
    e_degree: int = 0,
    beta: float = 2.0,
    poly_degree: float | None = None,
) -> RegularityStructure:
    """Assemble a concrete structure.

    Presets:
      "poly": polynomials X^k with |k|_s <= degree; optionally epsilon
              letters E^m (m <= e_degree) on one axis for the discrete
              chain rule.
      "phi4": {Xi, 1, X0, X1, I(Xi), I(Xi)^2, I(Xi)^3} with
              |Xi| = -3/2 - kappa and parabolic scaling (2, 1); pass
              poly_degree to swap in the full monomial alphabet up to that
              degree (needed when convolution output carries high jets).
    """
    scaling = tuple(int(s) for s in scaling)
    dim = len(scaling)
    if preset == "poly":
        symbols = _poly_alphabet(scaling, degree)
        if e_degree > 0:
            axis = dim - 1 if e_axis is None else e_axis
            extra = []
            for sym in symbols:
                for m in range(1, e_degree + 1):
                    e = tuple(m if i == axis else 0 for i in range(dim))
                    extra.append(
                        Symbol(
                            x=sym.x,
                            e=e,
                            homogeneity=sym.homogeneity + m * scaling[axis],
                        )
                    )
            symbols = sorted(symbols + extra, key=lambda s: (s.homogeneity, s.name))
        return RegularityStructure(tuple(symbols), scaling, r=r, beta=beta, name="poly")
    if preset == "phi4":
        if scaling != (2, 1):
            raise ValueError("phi4 preset is defined for scaling (2, 1)")
        xi_hom = -1.5 - kappa
        i_hom = xi_hom + beta
        if poly_degree is None:
            polys = [
                Symbol(x=(0, 0), e=(0, 0), homogeneity=0.0),
                Symbol(x=(0, 1), e=(0, 0), homogeneity=1.0),
                Symbol(x=(1, 0), e=(0, 0), homogeneity=2.0),
            ]
        else:
            polys = _poly_alphabet(scaling, poly_degree)
        symbols = polys + [
            Symbol(x=(0, 0), e=(0, 0), xi=1, homogeneity=xi_hom),
            Symbol(x=(0, 0), e=(0, 0), i_pow=1, homogeneity=i_hom),
            Symbol(x=(0, 0), e=(0, 0), i_pow=2, homogeneity=2 * i_hom),
            Symbol(x=(0, 0), e=(0, 0), i_pow=3, homogeneity=3 * i_hom),
        ]
        symbols = sorted(symbols, key=lambda s: (s.homogeneity, s.name))
        return RegularityStructure(tuple(symbols), scaling, r=r, beta=beta, name="phi4")
    raise ValueError(f"unknown preset {preset!r}")


def polynomial_shift(
    structure: RegularityStructure, h: Sequence[float], extra: Mapping[Symbol, Mapping[Symbol, float]] | None = None
) -> GroupElement:
    """Group element shifting polynomials: X^k -> (X + h)^k, E letters fixed.

    `extra` supplies columns for non-polynomial symbols (noise letters are
    fixed by default).
    """
    cols: dict[Symbol, dict[Symbol, float]] = {}
    for sym in structure.symbols:
        if sym.xi or sym.i_pow or sym.tag:
            continue
        col: dict[Symbol, float] = {}
        for js in np.ndindex(*[k + 1 for k in sym.x]):
            coeff = 1.0
            for axis, (j, k) in enumerate(zip(js, sym.x)):
                coeff *= math.comb(k, j) * h[axis] ** (k - j)
            target_x = tuple(js)
            target = _find_symbol(structure, target_x, sym.e)
            if target is None:
                raise KeyError(
                    f"shift of {sym.name} needs X^{target_x} E^{sym.e}, missing from structure"
                )
            col[target] = col.get(target, 0.0) + coeff
        cols[sym] = col
    if extra:
        for tau, col in extra.items():
            cols[tau] = dict(col)
    return GroupElement(cols)


def _find_symbol(structure: RegularityStructure, x: tuple[int, ...], e: tuple[int, ...]) -> Symbol | None:
    for s in structure.symbols:
        if s.is_polynomial and s.x == x and not any(e):
            return s
        if s.xi == 0 and s.i_pow == 0 and not s.tag and s.x == x and s.e == e:
            return s
    return None


_ROW_RE = re.compile(r"^\s*(\S+)\s+([-+0-9.eE]+)\s+(\S+)\s*$")


def load_structure_file(path: str, scaling: Sequence[int] = (2, 1), r: int = 2, beta: float = 2.0) -> RegularityStructure:
    """Load a custom structure from a text file of (symbol, homogeneity, kind) rows.

    Symbol grammar: "1", "Xi", "I(Xi)^j", "Xi*", "X0^a", "X1^b", "E1^m" and
    "*"-joined products of those tokens.  Kind is recorded for validation
    only; the homogeneity column is authoritative.
    """
    scaling = tuple(int(s) for s in scaling)
    dim = len(scaling)
    symbols: list[Symbol] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            m = _ROW_RE.match(line)
            if not m:
                raise ValueError(f"cannot parse structure row: {line!r}")
            name, hom, kind = m.group(1), float(m.group(2)), m.group(3)
            sym = _parse_symbol(name, dim, hom)
            if sym.kind != kind:
                raise ValueError(f"row {name!r}: stated kind {kind!r} != derived {sym.kind!r}")
            symbols.append(sym)
    symbols = sorted(symbols, key=lambda s: (s.homogeneity, s.name))
    return RegularityStructure(tuple(symbols), scaling, r=r, beta=beta, name="file")


def _parse_symbol(name: str, dim: int, homogeneity: float) -> Symbol:
    x = [0] * dim
    e = [0] * dim
    xi = 0
    i_pow = 0
    if name != "1":
        for token in name.split("*"):
            if token == "Xi":
                xi += 1
            elif token.startswith("I(Xi)"):
                i_pow += int(token[6:]) if "^" in token else 1
            elif token and token[0] in "XE":
                body = token[1:]
                axis_s, _, pow_s = body.partition("^")
                axis = int(axis_s)
                power = int(pow_s) if pow_s else 1
                if axis >= dim:
                    raise ValueError(f"axis {axis} out of range in {name!r}")
                (x if token[0] == "X" else e)[axis] += power
            else:
                raise ValueError(f"cannot parse token {token!r} in {name!r}")
    return Symbol(x=tuple(x), e=tuple(e), xi=xi, i_pow=i_pow, homogeneity=homogeneity)
