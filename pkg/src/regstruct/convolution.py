"""The abstract convolution K^eps_gamma on modelled distributions.

K_gamma f(z) = I f(z) + sum_zeta (T_zeta Pi_z Q_zeta f(z))(z)
             + (T_gamma (R f - Pi_z f(z)))(z).

Because the Taylor jets are zeta-independent on shared multi-indices, the
polynomial output collapses to

    X^k coeff = (1/k!) K^(k) (R f)  -  sum_tau c_tau jet_tau^k  over tau with
                |tau| + beta <= |k|_s < gamma + beta,

a fixed number of translation-invariant convolutions.  With the model
convention (Pi_z X^k)(z) = 0 the identity R K_gamma f = K R f holds exactly
on the lattice: the verification below recomputes the right side slice by
slice so the reported residual reflects genuinely different summation
paths.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .distributions import ModelledDistribution, dgamma_seminorm, weighted_seminorm
from .fitting import ExponentFit, fit_exponent
from .grid import GridFunction, SamplingPlan
from .kernels import multi_indices_below
from .model import DiscreteModel, _fact_multi
from .reconstruction import reconstruct
from .structure import StructureVector, Symbol, group_apply

__all__ = [
    "convolve_Kgamma",
    "SchauderReport",
    "verify_schauder",
    "commutation_check",
    "increment_exponent",
    "weighted_schauder_test",
]

_HOM_TOL = 1e-9


def _integration_target(model: DiscreteModel, tau: Symbol) -> Symbol | None:
    """I(tau) in the structure, or None when tau is polynomial."""
    if tau.is_polynomial:
        return None
    return model._integrated_symbol(tau)


def convolve_Kgamma(
    f: ModelledDistribution,
    gamma: float | None = None,
    out_trunc: float | None = None,
) -> ModelledDistribution:
    """Apply the abstract convolution; output lives at level gamma + beta.

    out_trunc restricts the stored output symbols (the fixed-point solver
    re-truncates to the solution level); it defaults to gamma + beta.
    """
    model = f.model
    if model.kernel is None:
        raise ValueError("model does not realise a kernel")
    gamma = f.gamma if gamma is None else gamma
    beta = model.kernel.beta
    if abs((gamma + beta) - round(gamma + beta)) < 1e-9:
        raise ValueError("gamma + beta must not be an integer")
    out_level = gamma + beta
    if out_trunc is None:
        out_trunc = out_level
    g = f.grid
    out: dict[Symbol, np.ndarray] = {}

    # abstract integration part
    for tau, arr in f.coeffs.items():
        if tau.is_polynomial:
            continue
        if tau.homogeneity + beta >= min(out_level, out_trunc) - _HOM_TOL:
            continue
        target = _integration_target(model, tau)
        out[target] = out.get(target, 0.0) + arr

    # polynomial part
    rec = reconstruct(f).values
    for k in multi_indices_below(g.scaling, min(out_level, out_trunc)):
        try:
            target = model._poly_e_symbol(k, (0,) * g.dim)
        except KeyError:
            raise KeyError(f"structure lacks X^{k} needed for jets below {out_level:g}")
        coeff = model.kernel.conv(rec, "K", deriv=k) / _fact_multi(k)
        for tau, arr in f.coeffs.items():
            if tau.homogeneity + beta <= sum(
                s * p for s, p in zip(g.scaling, k)
            ) + _HOM_TOL:
                coeff = coeff - arr * model.jet_field(tau, tuple(k))
        out[target] = out.get(target, 0.0) + coeff
    return ModelledDistribution(model, min(out_level, out_trunc), out, f.weight)


@dataclass
class SchauderReport:
    output_seminorm: float
    identity_residual: float
    input_fit: ExponentFit | None
    output_fit: ExponentFit | None
    gain: float | None
    rows: list[dict] = dc_field(default_factory=list)


def increment_exponent(
    f: ModelledDistribution, plan: SamplingPlan, level: float = 0.0
) -> ExponentFit | None:
    """Fitted slope of sup ||f(z) - Gamma_zy f(y)||_level against d_s(y,z)."""
    from .distributions import _increment_level_norms, _pair_arrays, _pair_distances

    sups: dict[float, float] = {}
    pairs = plan.pairs(r_min=2 * f.grid.eps)
    if not pairs:
        return None
    z_arr, y_arr = _pair_arrays(pairs)
    d = _pair_distances(f.grid, z_arr, y_arr)
    levels = _increment_level_norms(f, z_arr, y_arr)
    vals = None
    for lev, arr in levels.items():
        if abs(lev - level) <= 1e-9:
            vals = arr
    if vals is None:
        return None
    shells = sorted(set(p[2] for p in pairs))
    pts = []
    for r in shells:
        mask = (d > r / 2) & (d <= r + 1e-12)
        if mask.any():
            pts.append((r, float(np.max(vals[mask]))))
    try:
        return fit_exponent(pts)
    except ValueError:
        return None


def verify_schauder(
    f: ModelledDistribution,
    gamma: float | None = None,
    plan: SamplingPlan | None = None,
    fit_levels: bool = True,
    out_trunc: float | None = None,
) -> SchauderReport:
    """Measure the Schauder gain and the exact convolution identity.

    identity_residual compares R K_gamma f against the slice-by-slice
    application of K to R f; with the (Pi_z X^k)(z) = 0 convention the two
    agree up to floating-point roundoff.
    """
    model = f.model
    gamma = f.gamma if gamma is None else gamma
    plan = plan or SamplingPlan(f.grid, seed=0)
    kf = convolve_Kgamma(f, gamma, out_trunc=out_trunc)
    rec_kf = reconstruct(kf).values
    rec_f = reconstruct(f).values
    slicewise = np.zeros_like(rec_f)
    for n in range(model.kernel.N + 1):
        slicewise += model.kernel.conv(rec_f, n)
    identity = float(np.max(np.abs(rec_kf - slicewise)))
    out_norm = dgamma_seminorm(kf, kf.gamma, plan)
    fit_in = fit_out = None
    gain = None
    if fit_levels:
        fit_in = increment_exponent(f, plan)
        fit_out = increment_exponent(kf, plan)
        if fit_in and fit_out:
            gain = fit_out.slope - fit_in.slope
    return SchauderReport(out_norm, identity, fit_in, fit_out, gain)


def commutation_check(model: DiscreteModel, a: Symbol, y_idx, z_idx) -> float:
    """Residual of the jet commutation identity

    Gamma_zy (I a + (T_{|a|} Pi_y a)(y)) =
        I Gamma_zy a + sum_zetabar (T_zetabar Pi_z Q_zetabar Gamma_zy a)(z).
    """
    if model.kernel is None:
        raise ValueError("model does not realise a kernel")
    structure = model.structure
    beta = structure.beta
    g = model.grid
    target = _integration_target(model, a)
    if target is None:
        # polynomial a: both sides vanish by the killing assumption
        lhs_vec = {}
        for k in multi_indices_below(g.scaling, a.homogeneity + beta):
            lhs_vec[model._poly_e_symbol(k, (0,) * g.dim)] = model.jet_field(a, k)[tuple(y_idx)]
        vec = StructureVector(lhs_vec)
        moved = group_apply(model.gamma(z_idx, y_idx), vec)
        col = model.gamma(z_idx, y_idx).column(a)
        rhs: dict[Symbol, float] = {}
        for sigma, c in col.items():
            for k in multi_indices_below(g.scaling, sigma.homogeneity + beta):
                tgt = model._poly_e_symbol(k, (0,) * g.dim)
                rhs[tgt] = rhs.get(tgt, 0.0) + c * model.jet_field(sigma, k)[tuple(z_idx)]
        return (moved - StructureVector(rhs)).max_abs()
    # lhs: Gamma_zy (I a + jets at y)
    lhs_coeffs: dict[Symbol, float] = {target: 1.0}
    for k in multi_indices_below(g.scaling, a.homogeneity + beta):
        sym = model._poly_e_symbol(k, (0,) * g.dim)
        lhs_coeffs[sym] = lhs_coeffs.get(sym, 0.0) + model.jet_field(a, k)[tuple(y_idx)]
    gamma_zy = model.gamma(z_idx, y_idx)
    lhs = group_apply(gamma_zy, StructureVector(lhs_coeffs))
    # rhs: I Gamma_zy a + jets of the reexpanded components at z
    rhs_coeffs: dict[Symbol, float] = {}
    for sigma, c in gamma_zy.column(a).items():
        tgt = _integration_target(model, sigma)
        if tgt is not None:
            rhs_coeffs[tgt] = rhs_coeffs.get(tgt, 0.0) + c
        for k in multi_indices_below(g.scaling, sigma.homogeneity + beta):
            sym = model._poly_e_symbol(k, (0,) * g.dim)
            rhs_coeffs[sym] = rhs_coeffs.get(sym, 0.0) + c * model.jet_field(sigma, k)[tuple(z_idx)]
    return (lhs - StructureVector(rhs_coeffs)).max_abs()


def weighted_schauder_test(
    f: ModelledDistribution,
    gamma: float | None = None,
    eta: float | None = None,
    kappa: float = 0.05,
    t_values=(0.125, 0.25, 0.5),
    plan: SamplingPlan | None = None,
) -> dict:
    """Weighted output norm of K_gamma R+ f and the small-time T-sweep.

    The output is measured in D^{gamma+beta, (alpha^eta)+beta-kappa} over
    O_T; the fitted T-slope is compared against kappa / s_1.
    """
    from .solver import time_cutoff

    model = f.model
    if model.kernel is None or not model.kernel.non_anticipative:
        raise ValueError("weighted Schauder requires a non-anticipative kernel")
    gamma = f.gamma if gamma is None else gamma
    if eta is None:
        if f.weight is None:
            raise ValueError("needs eta or a WeightSpec")
        eta = f.weight.eta
    alpha = min(0.0, f.sector().regularity)
    beta = model.kernel.beta
    eta_bar = min(alpha, eta) + beta - kappa
    kf = convolve_Kgamma(time_cutoff(f), gamma)
    g = f.grid
    base_plan = plan or SamplingPlan(g, seed=0)
    rows = []
    pts = []
    for T in sorted(t_values):
        if T > g.t1:
            continue
        sub = base_plan.restricted(t_hi=T)
        val = weighted_seminorm(kf, kf.gamma, eta_bar, sub)
        rows.append({"T": T, "weighted_seminorm": val})
        pts.append((T, val))
    fit = None
    try:
        fit = fit_exponent(pts)
    except ValueError:
        pass
    return {
        "rows": rows,
        "fit": fit,
        "kappa_over_s1": kappa / g.scaling[0],
        "eta_bar": eta_bar,
        "output_level": kf.gamma,
    }
