"""Reconstruction operator and empirical verification of its scaling bounds.

The reconstruction map is the pointwise-evaluation choice
R f(z) = (Pi_z f(z))(z).  The scaling test measures the pairing
|iota(R f - Pi_z f(z))(eta^delta_z)| over dyadic delta and fits the
exponent; the proof's telescoping decomposition over dyadic partitions of
unity is reproduced exactly as an algebraic identity and used as a
cross-check of the partition machinery.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from typing import Sequence

import numpy as np

from .distributions import ModelledDistribution
from .fitting import ExponentFit, fit_exponent
from .grid import (
    Grid,
    GridFunction,
    Profile,
    SamplingPlan,
    TestFunction,
    psi_factor_values,
    testfn_dictionary,
)
from .model import DiscreteModel

__all__ = [
    "ReconstructionReport",
    "reconstruct",
    "pointing_error_pairing",
    "local_bound_check",
    "reconstruction_scaling_test",
    "telescoping_decomposition",
    "weighted_reconstruction_test",
]

_FLOOR = 1e-12


def reconstruct(f: ModelledDistribution) -> GridFunction:
    """R f(z) = (Pi_z f(z))(z), evaluated on the whole lattice."""
    return GridFunction(f.grid, _rec_values(f))


def _rec_values(f: ModelledDistribution) -> np.ndarray:
    vals = np.zeros(f.grid.shape)
    for sym, arr in f.coeffs.items():
        vals += arr * f.model.pi_diag(sym)
    return vals


def pointing_error_pairing(
    f: ModelledDistribution,
    rec: np.ndarray,
    profile: Profile,
    delta: float,
    z_idx,
) -> float:
    """iota(R f - Pi_z f(z))(eta^delta_z) for one test function."""
    g = f.grid
    model = f.model
    tf = TestFunction(profile, g.point(z_idx), delta)
    radii = tf.support_radii(g)
    lo = [tf.center[a] - radii[a] for a in range(g.dim)]
    hi = [tf.center[a] + radii[a] for a in range(g.dim)]
    mesh = g.box_indices(lo, hi)
    if mesh is None:
        return 0.0
    disp = model._disp_mesh(mesh, z_idx)
    phi = tf.evaluate(g, disp)
    local = np.zeros(np.broadcast_shapes(*[np.shape(d) for d in disp]))
    vec = f.value_at(z_idx)
    for sym, c in vec.coefficients.items():
        local = local + c * model.pi_values(sym, z_idx, mesh)
    return float(g.volume_element * np.sum((rec[mesh] - local) * phi))


def local_bound_check(
    f: ModelledDistribution, z_idx, pi_norm: float, gamma: float | None = None
) -> float:
    """Ratio of ||R f - Pi_z f(z)||_{gamma; ball(z, eps); z; eps} to the
    reconstruction assumption's right-hand side (0/0 -> 0)."""
    g = f.grid
    gamma = f.gamma if gamma is None else gamma
    mesh = g.ball_box(g.point(z_idx), g.eps)
    if mesh is None:
        return 0.0
    rec = _rec_values(f)
    local = 0.0
    vec = f.value_at(z_idx)
    for sym, c in vec.coefficients.items():
        local = local + c * f.model.pi_values(sym, z_idx, mesh)
    lhs = g.eps ** (-gamma) * float(np.max(np.abs(rec[mesh] - local)))
    # small-scale seminorm of f over the c*eps neighbourhood of the box
    rhs = pi_norm * _pairwise_small_norm(f, _local_pairs(g, z_idx), gamma)
    if rhs <= _FLOOR:
        return 0.0 if lhs <= _FLOOR else math.inf
    return lhs / rhs


def _local_pairs(g: Grid, z_idx, reach: float | None = None):
    reach = reach if reach is not None else 2 * g.eps
    mesh = g.ball_box(g.point(z_idx), reach)
    idx = np.stack([m.ravel() for m in np.broadcast_arrays(*mesh)], axis=-1)
    pairs = []
    for i in range(len(idx)):
        for j in range(len(idx)):
            if i == j:
                continue
            d = float(g.ds_distance(list(idx[i]), list(idx[j])))
            if 0 < d <= 2 * g.eps + 1e-12:
                pairs.append((tuple(idx[i]), tuple(idx[j]), d))
    return pairs


def _pairwise_small_norm(f: ModelledDistribution, pairs, gamma: float) -> float:
    from .distributions import _increment_level_norms

    if not pairs:
        return 0.0
    z_arr = np.array([p[0] for p in pairs])
    y_arr = np.array([p[1] for p in pairs])
    levels = _increment_level_norms(f, z_arr, y_arr)
    g = f.grid
    out = 0.0
    for lev, vals in levels.items():
        if lev >= gamma - 1e-9:
            continue
        out = max(out, float(np.max(vals)) * g.eps ** (lev - gamma))
    return out


@dataclass
class ReconstructionReport:
    deltas: list[float]
    sup_pairings: list[float]
    fit: ExponentFit | None
    telescoping_residual: float
    exact_plateau: bool
    by_class: dict = dc_field(default_factory=dict)

    def rows(self) -> list[dict]:
        out = []
        for d, v in zip(self.deltas, self.sup_pairings):
            out.append({"delta": d, "sup_pairing": v, "class": "all"})
        for cls, data in self.by_class.items():
            for d, v in zip(data["deltas"], data["sup_pairings"]):
                out.append({"delta": d, "sup_pairing": v, "class": cls})
        return out


def reconstruction_scaling_test(
    f: ModelledDistribution,
    deltas: Sequence[float],
    plan: SamplingPlan | None = None,
    profiles: list[Profile] | None = None,
    telescope_checks: int = 2,
) -> ReconstructionReport:
    """Sup of the reconstruction pairing per scale, with fitted exponent.

    Scales below the exactness floor are excluded from the fit; when every
    scale is exact the report flags a plateau and carries no fit.
    """
    g = f.grid
    deltas = sorted(float(d) for d in deltas)
    if len(deltas) < 3:
        raise ValueError("need at least 3 scales")
    if deltas[0] <= g.eps:
        raise ValueError("scales must exceed eps")
    plan = plan or SamplingPlan(g, seed=0)
    profiles = profiles or testfn_dictionary(g.dim, r=f.model.structure.r)
    rec = _rec_values(f)
    bases = plan.base_indices()
    sups = []
    for d in deltas:
        # keep supports inside the time window so the sweep is not polluted
        # by boundary clipping
        safe = [
            z
            for z in bases
            if g.point(z)[0] - d ** g.scaling[0] >= g.t0 - 1e-12
            and g.point(z)[0] + d ** g.scaling[0] <= g.t1 + 1e-12
        ] or bases
        best = 0.0
        for z in safe:
            for prof in profiles:
                best = max(best, abs(pointing_error_pairing(f, rec, prof, d, z)))
        sups.append(best)
    try:
        fit = fit_exponent(list(zip(deltas, sups)))
        plateau = False
    except ValueError:
        fit = None
        plateau = True
    tele = 0.0
    if telescope_checks:
        prof = profiles[0]
        mids = bases[: max(1, telescope_checks)]
        for z in mids:
            d = deltas[len(deltas) // 2]
            if g.point(z)[0] - d ** g.scaling[0] < g.t0 or g.point(z)[0] + d ** g.scaling[0] > g.t1:
                continue
            direct = pointing_error_pairing(f, rec, prof, d, z)
            parts = telescoping_decomposition(f, rec, prof, d, z)
            tele = max(tele, abs(direct - sum(parts)))
    return ReconstructionReport(deltas, sups, fit, tele, plateau)


# ---------------------------------------------------------------------------
# the dyadic partition decomposition of the pairing
# ---------------------------------------------------------------------------


class _Cell:
    """One partition function eta * Psi_[z_k], stored on full space rows."""

    __slots__ = ("center", "t_lo", "t_hi", "values", "anchor")

    def __init__(self, center, t_lo, t_hi, values, anchor):
        self.center = center
        self.t_lo = t_lo
        self.t_hi = t_hi
        self.values = values  # shape (t_hi - t_lo + 1, n_space...) or (rows,)
        self.anchor = anchor  # lattice index z_{|k}


def _dyadic_centers(g: Grid, level: int, z_point, delta):
    """Level-`level` dyadic points whose Psi support meets [eta^delta_z]."""
    spac = [2.0 ** (-level * s) for s in g.scaling]
    axes = []
    for a in range(g.dim):
        reach = delta ** g.scaling[a] + spac[a]
        lo = z_point[a] - reach
        hi = z_point[a] + reach
        if a == 0:
            lo = max(lo, g.t0 - spac[a])
            hi = min(hi, g.t1 + spac[a])
        kmin = int(math.ceil(lo / spac[a] - 1e-9))
        kmax = int(math.floor(hi / spac[a] + 1e-9))
        vals = [k * spac[a] for k in range(kmin, kmax + 1)]
        if a > 0 and (kmax - kmin + 1) * spac[a] >= g.period - 1e-9:
            nper = int(round(g.period / spac[a])) if spac[a] <= g.period else 1
            vals = [k * spac[a] for k in range(max(nper, 1))]
        axes.append(vals)
    out = []
    for combo in np.ndindex(*[len(v) for v in axes]):
        out.append(tuple(axes[a][combo[a]] for a in range(g.dim)))
    return out


def _support_box(g: Grid, z_point, delta):
    lo = [z_point[a] - delta ** g.scaling[a] for a in range(g.dim)]
    hi = [z_point[a] + delta ** g.scaling[a] for a in range(g.dim)]
    mesh = g.box_indices(lo, hi)
    if mesh is None:
        return None
    return np.stack([m.ravel() for m in np.broadcast_arrays(*mesh)], axis=-1)


def _pick_anchor(g: Grid, support_idx, center) -> tuple[int, ...]:
    """Deterministic z_{|k}: nearest support lattice point, ties by lex order."""
    pts = support_idx
    disp = []
    for a in range(g.dim):
        x = g.axis_coords(a)[pts[:, a]]
        dd = x - center[a]
        if a > 0:
            dd = (dd + g.period / 2) % g.period - g.period / 2
        disp.append(dd)
    dist = g.ds_norm(disp)
    best = np.lexsort((*[pts[:, a] for a in reversed(range(g.dim))], np.round(dist, 12)))[0]
    return tuple(int(v) for v in pts[best])


def _cells_at_level(g: Grid, f_eta_vals, t_range, level, z_point, delta, support_idx):
    """All nonvanishing eta * Psi_[z_k] cells at one dyadic level."""
    t_lo_eta, t_hi_eta = t_range
    cells = []
    for center in _dyadic_centers(g, level, z_point, delta):
        # time rows where Psi's time factor is nonzero
        reach_t = 2.0 ** (-level * g.scaling[0])
        lo = max(t_lo_eta, int(math.ceil((center[0] - reach_t - g.t0) / g.spacings[0] - 1e-9)))
        hi = min(t_hi_eta, int(math.floor((center[0] + reach_t - g.t0) / g.spacings[0] + 1e-9)))
        if lo > hi:
            continue
        rows = np.arange(lo, hi + 1)
        vals = psi_factor_values(g, 0, level, center[0], rows)
        block = f_eta_vals[lo - t_lo_eta : hi - t_lo_eta + 1]
        if g.dim > 1:
            psi_rest = [
                psi_factor_values(g, a, level, center[a], np.arange(g.shape[a]))
                for a in range(1, g.dim)
            ]
            w = vals[:, None] * psi_rest[0][None, :]
            for extra in psi_rest[1:]:
                w = w[..., None] * extra
            block = block * w
        else:
            block = block * vals
        if not np.any(block):
            continue
        anchor = _pick_anchor(g, support_idx, center)
        cells.append(_Cell(center, lo, hi, block, anchor))
    return cells


def telescoping_decomposition(
    f: ModelledDistribution, rec: np.ndarray, profile: Profile, delta: float, z_idx
) -> tuple[float, float, float]:
    """The three groups of terms of the dyadic decomposition of the pairing.

    Term I pairs R f - Pi_{anchor} f(anchor) against the finest partition,
    II telescopes consecutive levels, III compares the coarsest level to
    the base point.  Their sum reproduces the direct pairing exactly, for
    any anchor assignment.
    """
    g = f.grid
    model = f.model
    n0 = max(0, int(math.ceil(-math.log2(delta) - 1e-9)))
    N = int(math.ceil(-math.log2(g.eps) - 1e-9))
    z_point = g.point(z_idx)
    tf = TestFunction(profile, z_point, delta)
    radii = tf.support_radii(g)
    lo_t = max(0, int(math.ceil((z_point[0] - radii[0] - g.t0) / g.spacings[0] - 1e-9)))
    hi_t = min(g.shape[0] - 1, int(math.floor((z_point[0] + radii[0] - g.t0) / g.spacings[0] + 1e-9)))
    rows = np.arange(lo_t, hi_t + 1)
    mesh = np.ix_(rows, *[np.arange(n) for n in g.shape[1:]])
    disp = model._disp_mesh(mesh, z_idx)
    eta_vals = tf.evaluate(g, disp)
    support_idx = _support_box(g, z_point, delta)

    def pi_f_local(anchor, cell):
        cmesh = np.ix_(np.arange(cell.t_lo, cell.t_hi + 1), *[np.arange(n) for n in g.shape[1:]])
        vec = f.value_at(anchor)
        out = 0.0
        for sym, c in vec.coefficients.items():
            out = out + c * model.pi_values(sym, anchor, cmesh)
        return out

    def pair(cell, values_on_cell):
        return float(g.volume_element * np.sum(cell.values * values_on_cell))

    levels = {}
    for k in range(n0, N + 1):
        levels[k] = _cells_at_level(g, eta_vals, (lo_t, hi_t), k, z_point, delta, support_idx)

    term1 = 0.0
    for cell in levels[N]:
        rec_block = rec[cell.t_lo : cell.t_hi + 1]
        term1 += pair(cell, rec_block - pi_f_local(cell.anchor, cell))

    term2 = 0.0
    for k in range(n0, N):
        coarse = levels[k]
        fine = levels[k + 1]
        coarse_pi = [pi_f_local(cc.anchor, cc) for cc in coarse]
        for cf in fine:
            pf = pi_f_local(cf.anchor, cf)
            for cc, pc_full in zip(coarse, coarse_pi):
                lo = max(cf.t_lo, cc.t_lo)
                hi = min(cf.t_hi, cc.t_hi)
                if lo > hi:
                    continue
                wf = cf.values[lo - cf.t_lo : hi - cf.t_lo + 1]
                wc_t = psi_factor_values(g, 0, k, cc.center[0], np.arange(lo, hi + 1))
                if g.dim > 1:
                    wc = wc_t[:, None] * psi_factor_values(
                        g, 1, k, cc.center[1], np.arange(g.shape[1])
                    )[None, :]
                else:
                    wc = wc_t
                prod = wf * wc
                if not np.any(prod):
                    continue
                pc = pc_full[lo - cc.t_lo : hi - cc.t_lo + 1]
                pf_cut = pf[lo - cf.t_lo : hi - cf.t_lo + 1]
                term2 += float(g.volume_element * np.sum(prod * (pf_cut - pc)))

    term3 = 0.0
    vec_z = f.value_at(z_idx)
    for cell in levels[n0]:
        cmesh = np.ix_(np.arange(cell.t_lo, cell.t_hi + 1), *[np.arange(n) for n in g.shape[1:]])
        pz = 0.0
        for sym, c in vec_z.coefficients.items():
            pz = pz + c * model.pi_values(sym, z_idx, cmesh)
        term3 += pair(cell, pi_f_local(cell.anchor, cell) - pz)

    return term1, term2, term3


# ---------------------------------------------------------------------------
# weighted reconstruction
# ---------------------------------------------------------------------------


def weighted_reconstruction_test(
    f: ModelledDistribution,
    deltas_away: Sequence[float],
    deltas_across: Sequence[float],
    plan: SamplingPlan | None = None,
    profiles: list[Profile] | None = None,
    band: tuple[float, float] = (0.25, 0.5),
    c_eps: float = 1.0,
) -> ReconstructionReport:
    """Two fitted exponents for singular modelled distributions.

    'away': |iota(R f - Pi_z f(z))(eta^delta_z)| over z in a band of
    distances to P with d_s(z, P) >= c*eps + 2*delta (expected slope gamma).
    'across': |iota(R f)(eta^delta_z)| with no location constraint
    (expected slope alpha ^ eta).
    """
    if f.weight is None:
        raise ValueError("weighted test needs a WeightSpec on f")
    g = f.grid
    alpha = min(0.0, f.sector().regularity)
    if min(alpha, f.weight.eta) <= -g.scaling[0]:
        raise ValueError("weighted reconstruction requires alpha ^ eta > -codim(P)")
    plan = plan or SamplingPlan(g, seed=0)
    profiles = profiles or testfn_dictionary(g.dim, r=f.model.structure.r)
    rec = _rec_values(f)
    bases = plan.base_indices()

    def p_dist(z):
        return min(1.0, abs(g.point(z)[0]) ** (1.0 / g.scaling[0]))

    report = ReconstructionReport([], [], None, 0.0, False, {})
    away = []
    for d in sorted(deltas_away):
        zs = [
            z
            for z in bases
            if band[0] <= p_dist(z) <= band[1] and p_dist(z) >= c_eps * g.eps + 2 * d
        ]
        best = 0.0
        for z in zs:
            for prof in profiles:
                best = max(best, abs(pointing_error_pairing(f, rec, prof, d, z)))
        away.append(best)
    if not any(v > 0 for v in away):
        pass
    across = []
    for d in sorted(deltas_across):
        best = 0.0
        for z in bases:
            tfc = g.point(z)
            if tfc[0] - d ** g.scaling[0] < g.t0 or tfc[0] + d ** g.scaling[0] > g.t1:
                continue
            for prof in profiles:
                tf = TestFunction(prof, tfc, d)
                val = _pair_field(g, rec, tf, z)
                best = max(best, abs(val))
        across.append(best)
    report.by_class["away"] = {"deltas": sorted(deltas_away), "sup_pairings": away}
    report.by_class["across"] = {"deltas": sorted(deltas_across), "sup_pairings": across}
    try:
        report.by_class["away"]["fit"] = fit_exponent(list(zip(sorted(deltas_away), away)))
    except ValueError:
        report.by_class["away"]["fit"] = None
    try:
        report.by_class["across"]["fit"] = fit_exponent(list(zip(sorted(deltas_across), across)))
    except ValueError:
        report.by_class["across"]["fit"] = None
    return report


def _pair_field(g: Grid, values: np.ndarray, tf: TestFunction, z_idx) -> float:
    radii = tf.support_radii(g)
    lo = [tf.center[a] - radii[a] for a in range(g.dim)]
    hi = [tf.center[a] + radii[a] for a in range(g.dim)]
    mesh = g.box_indices(lo, hi)
    if mesh is None:
        return 0.0
    disp = []
    for a in range(g.dim):
        x = g.axis_coords(a)[mesh[a]]
        d = x - tf.center[a]
        if a > 0:
            d = (d + g.period / 2) % g.period - g.period / 2
        disp.append(d)
    phi = tf.evaluate(g, disp)
    return float(g.volume_element * np.sum(values[mesh] * phi))
