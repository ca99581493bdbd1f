"""Modelled distributions: D-gamma spaces, weighted variants, and the local
operations (product, smooth composition, abstract differentiation).

A modelled distribution stores one coefficient field per symbol.  All
seminorms are suprema over a deterministic SamplingPlan: the large-scale
part runs over pairs with eps <= d_s(y, z) <= 1, the small-scale part over
pairs within the c*eps neighbourhood (c = 2 by default).  On the uniform
lattice there are no pairs strictly below eps, so the neighbourhood
convention is what makes the small-scale seminorms nonvacuous; the same
constant governs the reconstruction assumption's local boxes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .grid import Grid, GridFunction, SamplingPlan
from .model import DiscreteModel
from .structure import Sector, StructureVector, Symbol

__all__ = [
    "WeightSpec",
    "ModelledDistribution",
    "SmoothFunction",
    "dgamma_seminorm",
    "dgamma_distance",
    "weighted_seminorm",
    "weighted_distance",
    "multiply",
    "compose_smooth",
    "differentiate",
    "symbol_product",
    "polynomial_lift_from_field",
    "constant_lift",
    "CUBE",
]

_HOM_TOL = 1e-9
SMALL_SCALE_C = 2.0


@dataclass(frozen=True)
class WeightSpec:
    """Hyperplane weight data for D^{gamma,eta}: P = {first coordinate = 0}."""

    eta: float

    def codim(self, grid: Grid) -> float:
        return float(grid.scaling[0])


class ModelledDistribution:
    """Map from lattice points to truncated structure vectors."""

    def __init__(
        self,
        model: DiscreteModel,
        gamma: float,
        coeffs: dict[Symbol, np.ndarray],
        weight: WeightSpec | None = None,
    ):
        self.model = model
        self.grid = model.grid
        self.gamma = float(gamma)
        self.weight = weight
        self.coeffs = {}
        for sym, arr in coeffs.items():
            if sym.homogeneity >= self.gamma - _HOM_TOL:
                continue
            self.coeffs[sym] = np.broadcast_to(
                np.asarray(arr, dtype=float), model.grid.shape
            ).copy()

    # -- basic algebra ---------------------------------------------------

    def coeff(self, sym: Symbol) -> np.ndarray:
        arr = self.coeffs.get(sym)
        if arr is None:
            return np.zeros(self.grid.shape)
        return arr

    def symbols(self) -> list[Symbol]:
        return [s for s in self.model.structure.symbols if s in self.coeffs]

    def value_at(self, z_idx) -> StructureVector:
        return StructureVector(
            {s: float(a[tuple(z_idx)]) for s, a in self.coeffs.items()}, self.gamma
        )

    def sector(self) -> Sector:
        return Sector(tuple(self.symbols()))

    def truncate(self, gamma_out: float) -> "ModelledDistribution":
        return ModelledDistribution(
            self.model, min(self.gamma, gamma_out), dict(self.coeffs), self.weight
        )

    def with_gamma(self, gamma: float) -> "ModelledDistribution":
        return ModelledDistribution(self.model, gamma, dict(self.coeffs), self.weight)

    def __add__(self, other: "ModelledDistribution") -> "ModelledDistribution":
        out = {s: a.copy() for s, a in self.coeffs.items()}
        for s, a in other.coeffs.items():
            out[s] = out.get(s, 0.0) + a
        return ModelledDistribution(self.model, min(self.gamma, other.gamma), out, self.weight)

    def __sub__(self, other: "ModelledDistribution") -> "ModelledDistribution":
        return self + other.scale(-1.0)

    def scale(self, a: float) -> "ModelledDistribution":
        return ModelledDistribution(
            self.model, self.gamma, {s: a * arr for s, arr in self.coeffs.items()}, self.weight
        )

    def max_abs(self) -> float:
        return max((float(np.max(np.abs(a))) for a in self.coeffs.values()), default=0.0)


def constant_lift(model: DiscreteModel, value: float, gamma: float) -> ModelledDistribution:
    return ModelledDistribution(
        model, gamma, {model.structure.unit: np.full(model.grid.shape, float(value))}
    )


def polynomial_lift_from_field(
    model: DiscreteModel, f: GridFunction, gamma: float
) -> ModelledDistribution:
    """Lift a lattice function into the polynomial sector by its jets.

    Coefficient of X^k is the centered finite-difference derivative
    D^k f / k! (one-sided at the time-window edges), so the coefficient of
    the unit is f itself and reconstruction returns f exactly.
    """
    g = model.grid
    coeffs: dict[Symbol, np.ndarray] = {}
    for sym in model.structure.below(gamma):
        if not sym.is_polynomial:
            continue
        arr = f.values
        fact = 1.0
        for axis, p in enumerate(sym.x):
            for _ in range(p):
                arr = _diff_axis(g, arr, axis)
            fact *= math.factorial(p)
        coeffs[sym] = arr / fact
    return ModelledDistribution(model, gamma, coeffs)


def _diff_axis(grid: Grid, arr: np.ndarray, axis: int) -> np.ndarray:
    h = grid.spacings[axis]
    if axis == 0:
        out = np.empty_like(arr)
        sl = [slice(None)] * arr.ndim

        def at(i):
            s = sl.copy()
            s[0] = i
            return tuple(s)

        out[at(slice(1, -1))] = (arr[at(slice(2, None))] - arr[at(slice(0, -2))]) / (2 * h)
        out[at(0)] = (arr[at(1)] - arr[at(0)]) / h
        out[at(-1)] = (arr[at(-1)] - arr[at(-2)]) / h
        return out
    return (np.roll(arr, -1, axis=axis) - np.roll(arr, 1, axis=axis)) / (2 * h)


# ---------------------------------------------------------------------------
# seminorms
# ---------------------------------------------------------------------------


def _pair_arrays(pairs):
    z_arr = np.array([p[0] for p in pairs], dtype=int)
    y_arr = np.array([p[1] for p in pairs], dtype=int)
    return z_arr, y_arr


def _increment_level_norms(
    f: ModelledDistribution, z_arr, y_arr, other: ModelledDistribution | None = None
):
    """Per-pair level norms of f(z) - Gamma_zy f(y) (minus the same for other)."""
    model = f.model
    idx_y = tuple(y_arr[:, a] for a in range(f.grid.dim))
    idx_z = tuple(z_arr[:, a] for a in range(f.grid.dim))
    coeffs_at_y = {s: f.coeff(s)[idx_y] for s in f.symbols()}
    moved = model.gamma_apply_batch(coeffs_at_y, z_arr, y_arr)
    diff: dict[Symbol, np.ndarray] = {}
    for s in set(list(moved) + f.symbols()):
        diff[s] = f.coeff(s)[idx_z] - moved.get(s, 0.0)
    if other is not None:
        model2 = other.model
        coeffs2 = {s: other.coeff(s)[idx_y] for s in other.symbols()}
        moved2 = model2.gamma_apply_batch(coeffs2, z_arr, y_arr)
        for s in set(list(moved2) + other.symbols()):
            diff[s] = diff.get(s, 0.0) - (other.coeff(s)[idx_z] - moved2.get(s, 0.0))
    levels: dict[float, np.ndarray] = {}
    for s, arr in diff.items():
        lev = round(s.homogeneity, 9)
        cur = levels.get(lev)
        a = np.abs(np.asarray(arr) * np.ones(len(z_arr)))
        levels[lev] = a if cur is None else np.maximum(cur, a)
    return levels


def _pair_distances(grid: Grid, z_arr, y_arr) -> np.ndarray:
    return grid.ds_distance(list(y_arr.T), list(z_arr.T))


def dgamma_seminorm(
    f: ModelledDistribution, gamma: float | None = None, plan: SamplingPlan | None = None
) -> float:
    """The D^gamma norm: large-scale increment ratios plus the small-scale part.

    The direct term sup ||f(z)||_beta is intentionally not included; it is
    available separately via direct_term for diagnostics.
    """
    gamma = f.gamma if gamma is None else gamma
    plan = plan or SamplingPlan(f.grid, seed=0)
    g = f.grid
    total = 0.0
    pairs = plan.pairs(r_min=g.eps)
    if pairs:
        z_arr, y_arr = _pair_arrays(pairs)
        d = _pair_distances(g, z_arr, y_arr)
        levels = _increment_level_norms(f, z_arr, y_arr)
        mask = (d >= g.eps - 1e-12) & (d <= 1.0 + 1e-12)
        for lev, vals in levels.items():
            if lev >= gamma - _HOM_TOL:
                continue
            with np.errstate(divide="ignore"):
                ratios = np.where(mask, vals / d ** (gamma - lev), 0.0)
            total = max(total, float(np.max(ratios, initial=0.0)))
    total = max(total, _small_scale_seminorm(f, gamma, plan))
    return total


def _small_scale_seminorm(f, gamma, plan, other=None) -> float:
    g = f.grid
    pairs = plan.pairs(r_max=SMALL_SCALE_C * g.eps)
    if not pairs:
        return 0.0
    z_arr, y_arr = _pair_arrays(pairs)
    d = _pair_distances(g, z_arr, y_arr)
    levels = _increment_level_norms(f, z_arr, y_arr, other)
    mask = (d > 0) & (d <= SMALL_SCALE_C * g.eps + 1e-12)
    out = 0.0
    for lev, vals in levels.items():
        if lev >= gamma - _HOM_TOL:
            continue
        ratios = np.where(mask, vals * g.eps ** (lev - gamma), 0.0)
        out = max(out, float(np.max(ratios, initial=0.0)))
    return out


def direct_term(f: ModelledDistribution, gamma: float | None = None) -> float:
    gamma = f.gamma if gamma is None else gamma
    out = 0.0
    for s, arr in f.coeffs.items():
        if s.homogeneity < gamma - _HOM_TOL:
            out = max(out, float(np.max(np.abs(arr))))
    return out


def dgamma_distance(
    f: ModelledDistribution,
    g2: ModelledDistribution,
    gamma: float | None = None,
    plan: SamplingPlan | None = None,
) -> float:
    """Distance between modelled distributions (models may differ)."""
    gamma = f.gamma if gamma is None else gamma
    if abs(f.gamma - g2.gamma) > 1e-9:
        raise ValueError("distance requires equal truncation levels")
    plan = plan or SamplingPlan(f.grid, seed=0)
    g = f.grid
    total = 0.0
    pairs = plan.pairs(r_min=g.eps)
    if pairs:
        z_arr, y_arr = _pair_arrays(pairs)
        d = _pair_distances(g, z_arr, y_arr)
        levels = _increment_level_norms(f, z_arr, y_arr, other=g2)
        mask = (d >= g.eps - 1e-12) & (d <= 1.0 + 1e-12)
        for lev, vals in levels.items():
            if lev >= gamma - _HOM_TOL:
                continue
            ratios = np.where(mask, vals / d ** (gamma - lev), 0.0)
            total = max(total, float(np.max(ratios, initial=0.0)))
    total = max(total, _small_scale_seminorm(f, gamma, plan, other=g2))
    return total


# -- weighted versions -------------------------------------------------------


def _p_distance(grid: Grid, idx_arrays) -> np.ndarray:
    """||z||_P = 1 and d_s(z, P) for the time-zero hyperplane."""
    t = grid.axis_coords(0)[idx_arrays[0]]
    return np.minimum(1.0, np.abs(t) ** (1.0 / grid.scaling[0]))


def _weighted_terms(f, g2, gamma, eta, plan):
    g = f.grid
    tol = 1e-12
    # direct term over the full lattice
    tcoord = g.axis_coords(0)
    p_all = np.minimum(1.0, np.abs(tcoord) ** (1.0 / g.scaling[0]))
    direct_large = 0.0
    direct_small = 0.0
    shape = [1] * g.dim
    shape[0] = -1
    p_field = np.broadcast_to(p_all.reshape(shape), g.shape)
    on_p = p_field < tol
    large = (p_field >= g.eps - tol) & ~on_p
    small = (p_field < g.eps) & ~on_p
    p_eps = np.maximum(p_field, g.eps)
    per_level: dict[float, np.ndarray] = {}
    for s in set(f.symbols() + (g2.symbols() if g2 is not None else [])):
        arr = np.abs(f.coeff(s) - (g2.coeff(s) if g2 is not None else 0.0))
        lev = round(s.homogeneity, 9)
        per_level[lev] = np.maximum(per_level.get(lev, 0.0), arr)
    for lev, arr in per_level.items():
        if lev >= gamma - _HOM_TOL:
            continue
        expo = min(eta - lev, 0.0)
        if large.any():
            direct_large = max(direct_large, float(np.max(arr[large] / p_field[large] ** expo)))
        if small.any():
            direct_small = max(direct_small, float(np.max(arr[small] / p_eps[small] ** expo)))

    # increment terms over K_P pairs
    inc_large = 0.0
    inc_small = 0.0
    pairs = plan.pairs()
    if pairs:
        z_arr, y_arr = _pair_arrays(pairs)
        d = _pair_distances(g, z_arr, y_arr)
        pz = _p_distance(g, tuple(z_arr[:, a] for a in range(g.dim)))
        py = _p_distance(g, tuple(y_arr[:, a] for a in range(g.dim)))
        pyz = np.minimum(pz, py)
        in_kp = (pz > tol) & (py > tol) & (d <= pyz + 1e-12) & (d > 0)
        levels = _increment_level_norms(f, z_arr, y_arr, other=g2)
        mask_l = in_kp & (d >= g.eps - 1e-12) & (d <= 1.0 + 1e-12)
        mask_s = in_kp & (d <= SMALL_SCALE_C * g.eps + 1e-12)
        pyz_eps = np.maximum(pyz, g.eps)
        for lev, vals in levels.items():
            if lev >= gamma - _HOM_TOL:
                continue
            with np.errstate(divide="ignore", invalid="ignore"):
                if mask_l.any():
                    r = vals / (d ** (gamma - lev) * pyz ** (eta - gamma))
                    inc_large = max(
                        inc_large, float(np.max(np.where(mask_l, np.nan_to_num(r), 0.0)))
                    )
                if mask_s.any():
                    r = vals / (g.eps ** (gamma - lev) * pyz_eps ** (eta - gamma))
                    inc_small = max(
                        inc_small, float(np.max(np.where(mask_s, np.nan_to_num(r), 0.0)))
                    )
    return direct_large, inc_large, direct_small + inc_small


def weighted_seminorm(
    f: ModelledDistribution,
    gamma: float | None = None,
    eta: float | None = None,
    plan: SamplingPlan | None = None,
) -> float:
    """Norm of the singular space D^{gamma,eta} with P the time-zero plane."""
    gamma = f.gamma if gamma is None else gamma
    if eta is None:
        if f.weight is None:
            raise ValueError("no eta given and no WeightSpec attached")
        eta = f.weight.eta
    if eta > gamma + 1e-12:
        raise ValueError("weighted norms require eta <= gamma")
    plan = plan or SamplingPlan(f.grid, seed=0)
    a, b, c = _weighted_terms(f, None, gamma, eta, plan)
    return max(a, b, c)


def weighted_distance(
    f: ModelledDistribution,
    g2: ModelledDistribution,
    gamma: float,
    eta: float,
    plan: SamplingPlan | None = None,
) -> float:
    plan = plan or SamplingPlan(f.grid, seed=0)
    a, b, c = _weighted_terms(f, g2, gamma, eta, plan)
    return max(a, b, c)


# ---------------------------------------------------------------------------
# local operations
# ---------------------------------------------------------------------------


def symbol_product(structure, s1: Symbol, s2: Symbol) -> Symbol | None:
    """Pointwise product table; None when the target symbol is absent."""
    if s1.is_unit:
        return s2
    if s2.is_unit:
        return s1
    if s1.tag or s2.tag or s1.xi or s2.xi:
        return None
    x = tuple(a + b for a, b in zip(s1.x, s2.x))
    e = tuple(a + b for a, b in zip(s1.e, s2.e))
    ip = s1.i_pow + s2.i_pow
    for s in structure.symbols:
        if not s.tag and not s.xi and s.x == x and s.e == e and s.i_pow == ip:
            return s
    return None


def multiply(
    f: ModelledDistribution, g2: ModelledDistribution, gamma_out: float | None = None
) -> ModelledDistribution:
    """Truncated pointwise product of modelled distributions."""
    if f.model is not g2.model:
        raise ValueError("product requires a common model")
    if gamma_out is None:
        a1 = f.sector().regularity
        a2 = g2.sector().regularity
        gamma_out = min(f.gamma + a2, g2.gamma + a1)
    structure = f.model.structure
    out: dict[Symbol, np.ndarray] = {}
    for s1, c1 in f.coeffs.items():
        for s2, c2 in g2.coeffs.items():
            if s1.homogeneity + s2.homogeneity >= gamma_out - _HOM_TOL:
                continue
            target = symbol_product(structure, s1, s2)
            if target is None:
                raise KeyError(f"product {s1.name} * {s2.name} not in structure")
            out[target] = out.get(target, 0.0) + c1 * c2
    return ModelledDistribution(f.model, gamma_out, out, f.weight)


@dataclass(frozen=True)
class SmoothFunction:
    """Scalar function with enough derivatives for composition."""

    name: str
    derivatives: tuple[Callable[[np.ndarray], np.ndarray], ...]

    def deriv(self, k: int) -> Callable[[np.ndarray], np.ndarray]:
        if k >= len(self.derivatives):
            raise ValueError(f"{self.name} supplies only {len(self.derivatives) - 1} derivatives")
        return self.derivatives[k]


CUBE = SmoothFunction(
    "cube",
    (
        lambda u: u**3,
        lambda u: 3.0 * u**2,
        lambda u: 6.0 * u,
        lambda u: 6.0 * np.ones_like(u),
        lambda u: np.zeros_like(u),
        lambda u: np.zeros_like(u),
        lambda u: np.zeros_like(u),
    ),
)


def compose_smooth(
    F: SmoothFunction, f: ModelledDistribution, gamma: float | None = None
) -> ModelledDistribution:
    """Composition F-hat(f) = sum_k F^(k)(mean) / k! * (f - mean)^k, truncated."""
    gamma = f.gamma if gamma is None else gamma
    if f.coeffs and min(s.homogeneity for s in f.coeffs) < -_HOM_TOL:
        raise ValueError("composition requires a function-like sector")
    unit = f.model.structure.unit
    mean = f.coeff(unit)
    tilde = ModelledDistribution(
        f.model, gamma, {s: a for s, a in f.coeffs.items() if not s.is_unit}, f.weight
    )
    zeta = min((s.homogeneity for s in tilde.coeffs), default=gamma)
    k_max = max(1, int(math.ceil(gamma / max(zeta, 1e-9))))
    F.deriv(k_max)  # raises early when too few derivatives are supplied
    out: dict[Symbol, np.ndarray] = {unit: F.deriv(0)(mean)}
    power = None
    fact = 1.0
    for k in range(1, k_max + 1):
        power = tilde if power is None else multiply(power, tilde, gamma_out=gamma)
        fact *= k
        dk = F.deriv(k)(mean) / fact
        for s, arr in power.coeffs.items():
            out[s] = out.get(s, 0.0) + dk * arr
        if not power.coeffs:
            break
    return ModelledDistribution(f.model, gamma, out, f.weight)


def derivation_column(structure, sym: Symbol, axis: int) -> dict[Symbol, float]:
    """Abstract derivation on one symbol: D X^k = sum binom(k,l) X^l E^{k-l-1}."""
    if sym.xi or sym.i_pow or sym.tag:
        raise KeyError(f"derivation not defined on {sym.name}")
    k = sym.x[axis]
    out: dict[Symbol, float] = {}
    for l in range(k):
        x = list(sym.x)
        x[axis] = l
        e = list(sym.e)
        e[axis] += k - l - 1
        target = None
        for s in structure.symbols:
            if not s.tag and not s.xi and not s.i_pow and s.x == tuple(x) and s.e == tuple(e):
                target = s
                break
        if target is None:
            raise KeyError(
                f"derivation of {sym.name} needs X^{tuple(x)} E^{tuple(e)}; add epsilon letters"
            )
        out[target] = out.get(target, 0.0) + math.comb(k, l)
    return out


def finite_difference(grid: Grid, f: GridFunction, axis: int) -> GridFunction:
    """Forward difference (f(z + h e_axis) - f(z)) / h, the discrete gradient."""
    h = grid.spacings[axis]
    if axis == 0:
        out = np.empty_like(f.values)
        out[:-1] = (f.values[1:] - f.values[:-1]) / h
        out[-1] = out[-2]
        return GridFunction(grid, out)
    return GridFunction(grid, (np.roll(f.values, -1, axis=axis) - f.values) / h)


def compatibility_residual(model: DiscreteModel, axis: int, samples=None, tol_probe: int = 3) -> float:
    """max |D^eps Pi_z tau - Pi_z D tau| over the polynomial+E sector."""
    g = model.grid
    rng = np.random.default_rng(7)
    if samples is None:
        samples = [tuple(int(rng.integers(n)) for n in g.shape) for _ in range(tol_probe)]
    worst = 0.0
    h = g.spacings[axis]
    radius = 0.2 if g.dim == 1 else min(0.25, 0.2 * g.period)
    for sym in model.structure.symbols:
        if sym.xi or sym.i_pow or sym.tag:
            continue
        col = derivation_column(model.structure, sym, axis)
        for z in samples:
            # a local mesh keeps min-image displacements additive under the
            # one-step shift on periodic axes
            mesh = g.ball_box(g.point(z), radius)
            if mesh is None:
                continue
            shifted = list(mesh)
            idx = np.asarray(shifted[axis]) + 1
            if axis == 0:
                keep = idx.reshape(-1) < g.shape[0]
                if not keep.all():
                    mesh = tuple(
                        m if a != 0 else np.compress(keep, m, axis=0) for a, m in enumerate(mesh)
                    )
                    shifted = list(mesh)
                    idx = np.asarray(shifted[axis]) + 1
            else:
                idx = idx % g.shape[axis]
            shifted[axis] = idx
            fd = (model.pi_values(sym, z, tuple(shifted)) - model.pi_values(sym, z, mesh)) / h
            rhs = 0.0
            for s2, c in col.items():
                rhs = rhs + c * model.pi_values(s2, z, mesh)
            worst = max(worst, float(np.max(np.abs(fd - rhs))))
    return worst


def differentiate(
    f: ModelledDistribution, axis: int, check_tol: float = 1e-10
) -> ModelledDistribution:
    """Abstract derivative D_axis f; output level gamma - s_axis.

    Raises when the model fails the compatibility identity
    D^eps Pi_z = Pi_z D on the polynomial+E sector.
    """
    model = f.model
    res = compatibility_residual(model, axis)
    if res > check_tol:
        raise ValueError(f"model incompatible with derivation (residual {res:.3e})")
    out: dict[Symbol, np.ndarray] = {}
    for sym, arr in f.coeffs.items():
        for target, c in derivation_column(model.structure, sym, axis).items():
            out[target] = out.get(target, 0.0) + c * arr
    return ModelledDistribution(model, f.gamma - model.grid.scaling[axis], out, f.weight)
