"""Dyadic kernel decomposition of the discrete heat Green function.

The Green function of the semi-implicit Euler heat scheme on the space
torus is computed Fourier-exactly per time slice, sliced into dyadic
annuli K_n supported in parabolic balls of radius 2^-n, and each slice is
moment-corrected so that it annihilates lattice monomials up to degree
sigma.  All kernels are translation invariant; applications run as padded
FFT convolutions, causal in time and circular in space.
"""

from __future__ import annotations

import hashlib
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grid import Grid, GridFunction, _smoothstep

__all__ = [
    "KernelDecomposition",
    "TaylorJet",
    "heat_green_stencil",
    "decompose_kernel",
    "heat_kernel",
    "taylor_lift",
    "multi_indices_below",
]

ZERO2 = (0, 0)


def multi_indices_below(scaling, bound: float) -> list[tuple[int, ...]]:
    """All multi-indices k with |k|_s < bound, in grading order."""
    out = []
    dims = len(scaling)
    caps = [int(math.ceil(bound / s)) + 1 for s in scaling]

    def rec(prefix):
        if len(prefix) == dims:
            if sum(s * p for s, p in zip(scaling, prefix)) < bound - 1e-9:
                out.append(tuple(prefix))
            return
        for v in range(caps[len(prefix)]):
            rec(prefix + [v])

    rec([])
    return sorted(out, key=lambda k: (sum(s * p for s, p in zip(scaling, k)), k))


def _factorial_multi(k) -> float:
    out = 1.0
    for v in k:
        out *= math.factorial(v)
    return out


def heat_green_stencil(grid: Grid, depth: int | None = None) -> np.ndarray:
    """Green function stencil of u_{m+1} = (I - dt*Lap)^{-1}(u_m + dt*F_m).

    Entry [k, j] is G(k*dt, x_j) with x_j the min-image displacement, so
    that eps^{|s|} * sum_w G(w) F(z - w) is the Duhamel sum of the scheme.
    Strictly causal: the k=0 slice vanishes.
    """
    if grid.dim != 2:
        raise ValueError("heat kernel preset is built for 1+1 dimensional grids")
    dt = grid.spacings[0]
    hx = grid.spacings[1]
    nx = grid.shape[1]
    if depth is None:
        depth = min(grid.shape[0] - 1, int(round(1.0 / dt)))
    m = np.arange(nx // 2 + 1)
    lam = (4.0 / hx**2) * np.sin(np.pi * m / nx) ** 2
    phat = 1.0 / (1.0 + dt * lam)
    ks = np.arange(depth + 1)
    ghat = phat[None, :] ** ks[:, None]
    g = np.fft.irfft(ghat, n=nx, axis=1)
    g[0, :] = 0.0
    # Duhamel: dt * P^{k} row = eps^{|s|} * G(k dt, .) => G = row / (hx)
    return g / hx


def _offset_coords(grid: Grid, depth: int) -> tuple[np.ndarray, np.ndarray]:
    dt = grid.spacings[0]
    hx = grid.spacings[1]
    nx = grid.shape[1]
    wt = dt * np.arange(depth + 1)
    j = np.arange(nx)
    wx = hx * (((j + nx // 2) % nx) - nx // 2)
    return wt, wx


def _parabolic_rho(grid: Grid, depth: int) -> np.ndarray:
    wt, wx = _offset_coords(grid, depth)
    return np.maximum(np.sqrt(wt)[:, None], np.abs(wx)[None, :])


def _cutoff_S(rho: np.ndarray) -> np.ndarray:
    """1 for rho <= 1/2, 0 for rho >= 1, smooth monotone between."""
    return 1.0 - _smoothstep(2.0 * rho - 1.0)


@dataclass
class TaylorJet:
    """Polynomial jet at a base point: multi-index -> coefficient."""

    base: tuple[float, ...]
    coefficients: dict[tuple[int, ...], float]
    boundary_flag: bool = False

    def coeff(self, k) -> float:
        return self.coefficients.get(tuple(k), 0.0)


class KernelDecomposition:
    """Slices K_0..K_N plus remainder R of a causal Green function.

    slices[n] is an offsets-stencil array of shape (depth+1, n_x); the
    remainder is G minus the corrected slices, so resummation is exact by
    construction.
    """

    def __init__(
        self,
        grid: Grid,
        green: np.ndarray,
        beta: float = 2.0,
        sigma: float = 2.0,
        correct_moments: bool = True,
        non_anticipative: bool = True,
    ):
        self.grid = grid
        self.beta = float(beta)
        self.sigma = float(sigma)
        self.non_anticipative = bool(non_anticipative)
        self.green = np.asarray(green, dtype=float)
        self.depth = self.green.shape[0] - 1
        self.N = int(math.ceil(-math.log2(grid.eps) - 1e-9))
        self.correct_moments = bool(correct_moments)
        self._fft_cache: dict = {}
        self._build()

    # -- construction -------------------------------------------------------

    def _build(self) -> None:
        g = self.grid
        rho = _parabolic_rho(g, self.depth)
        weights = []
        for n in range(self.N):
            weights.append(_cutoff_S(2.0**n * rho) - _cutoff_S(2.0 ** (n + 1) * rho))
        weights.append(_cutoff_S(2.0**self.N * rho))
        causal = np.zeros_like(rho)
        causal[1:, :] = 1.0
        self.slices: list[np.ndarray] = []
        self.correction_norms: list[float] = []
        kill_set = multi_indices_below(g.scaling, self.sigma + 1e-9)
        kill_set = [k for k in kill_set] + [
            k for k in _exact_indices(g.scaling, self.sigma) if k not in kill_set
        ]
        for n in range(self.N + 1):
            raw = self.green * weights[n]
            if not self.correct_moments or not raw.any():
                self.slices.append(raw)
                self.correction_norms.append(0.0)
                continue
            corrected, cnorm = self._kill_moments(raw, weights[n] * causal, kill_set, n)
            self.slices.append(corrected)
            self.correction_norms.append(cnorm)
        self.remainder = self.green - sum(self.slices)
        self.K = sum(self.slices)

    def _kill_moments(self, raw, bump, kill_set, n):
        g = self.grid
        wt, wx = _offset_coords(g, self.depth)
        scale_t = 2.0 ** (n * g.scaling[0])
        scale_x = 2.0 ** (n * g.scaling[1])
        wt_n = wt * scale_t
        wx_n = wx * scale_x
        mons = [_mono(wt_n, wx_n, k) for k in kill_set]
        gram = np.array([[float(np.sum(bump * mi * mj)) for mj in mons] for mi in mons])
        rhs = np.array([float(np.sum(raw * mi)) for mi in mons])
        if np.linalg.cond(gram) > 1e12:
            raise ValueError(
                f"moment-correction system singular for slice {n}: annulus holds too few lattice points"
            )
        coef = np.linalg.solve(gram, rhs)
        corrected = raw - sum(c * bump * m for c, m in zip(coef, mons))
        return corrected, float(np.max(np.abs(coef)))

    # -- stencil algebra ----------------------------------------------------

    def stencil(self, which) -> np.ndarray:
        """Base stencil: slice index, 'K' (sum of slices), 'R', or 'G'."""
        if isinstance(which, (int, np.integer)):
            return self.slices[int(which)]
        if which == "K":
            return self.K
        if which == "R":
            return self.remainder
        if which == "G":
            return self.green
        raise KeyError(which)

    def derived_stencil(self, which, deriv=ZERO2, moment=ZERO2) -> tuple[np.ndarray, int]:
        """Stencil D^deriv kappa(w) * (-w)^moment, zero-extended in time.

        Returns (array, off) where row r holds time offset r - off.  With
        this weight, conv(F, ...) at z equals
        eps^{|s|} * sum_y D_1^deriv K(z, y) (y - z)^moment F(y).
        """
        base = self.stencil(which)
        off = deriv[0] + 1
        arr = np.zeros((base.shape[0] + 2 * off, base.shape[1]))
        arr[off : off + base.shape[0], :] = base
        g = self.grid
        dt, hx = g.spacings
        for _ in range(deriv[0]):
            arr = (np.roll(arr, -1, axis=0) - np.roll(arr, 1, axis=0)) / (2 * dt)
        for _ in range(deriv[1]):
            arr = (np.roll(arr, -1, axis=1) - np.roll(arr, 1, axis=1)) / (2 * hx)
        if moment != ZERO2:
            wt = dt * (np.arange(arr.shape[0]) - off)
            _, wx = _offset_coords(g, base.shape[0] - 1)
            weight = np.power(-wt, moment[0])[:, None] * np.power(-wx, moment[1])[None, :]
            arr = arr * weight
        return arr, off

    # -- application --------------------------------------------------------

    def _fft_len(self, extra: int) -> int:
        n = self.grid.shape[0] + self.depth + extra + 2
        return 1 << (n - 1).bit_length()

    def conv(self, values: np.ndarray, which, deriv=ZERO2, moment=ZERO2) -> np.ndarray:
        """Causal-in-time, circular-in-space convolution against a stencil.

        Returns eps^{|s|} * sum_y D^deriv kappa(z - y) (y - z)^moment F(y)
        as an array over the full grid.
        """
        g = self.grid
        key = ("fft", _which_key(which), deriv, moment)
        if key not in self._fft_cache:
            arr, off = self.derived_stencil(which, deriv, moment)
            L = self._fft_len(arr.shape[0])
            shifted = np.zeros((L, g.shape[1]))
            # row r of arr is time offset (r - off); place offset o at index o mod L
            for r in range(arr.shape[0]):
                shifted[(r - off) % L, :] += arr[r, :]
            self._fft_cache[key] = (np.fft.rfftn(shifted, s=(L, g.shape[1])), L)
        khat, L = self._fft_cache[key]
        fpad = np.zeros((L, g.shape[1]))
        fpad[: g.shape[0], :] = values
        out = np.fft.irfftn(np.fft.rfftn(fpad, s=(L, g.shape[1])) * khat, s=(L, g.shape[1]))
        return out[: g.shape[0], :] * g.volume_element

    def apply(self, f: GridFunction, which="K", deriv=ZERO2, moment=ZERO2) -> GridFunction:
        return GridFunction(self.grid, self.conv(f.values, which, deriv, moment))

    def gather(self, values: np.ndarray, z_idx, which, deriv=ZERO2, moment=ZERO2):
        """Direct (non-FFT) evaluation of conv at one point; oracle path."""
        g = self.grid
        arr, off = self.derived_stencil(which, deriv, moment)
        it, ix = z_idx
        total = 0.0
        nx = g.shape[1]
        for r in range(arr.shape[0]):
            k = r - off
            src = it - k
            if src < 0 or src >= g.shape[0]:
                continue
            row = arr[r]
            if not row.any():
                continue
            total += float(np.sum(row * values[src, (ix - np.arange(nx)) % nx]))
        return total * g.volume_element

    # -- diagnostics --------------------------------------------------------

    def slice_depth(self, n: int) -> int:
        rows = np.nonzero(np.any(self.slices[n] != 0.0, axis=1))[0]
        return int(rows.max()) if len(rows) else 0

    def interior_time_index_range(self, n: int | None = None) -> tuple[int, int]:
        """Time indices whose full stencil (all slices if n is None) fits."""
        if n is None:
            d = max(self.slice_depth(m) for m in range(self.N + 1))
        else:
            d = self.slice_depth(n)
        return d, self.grid.shape[0] - 1

    def moment_residual(self, n: int, k, z_idx=None) -> float:
        """|sum_y K_n(z,y) eps^{|s|} (y-z)^k|, stencil-wise or at a point z."""
        g = self.grid
        wt, wx = _offset_coords(g, self.depth)
        mono = _mono(-wt, -wx, k)
        if z_idx is None:
            return abs(float(np.sum(self.slices[n] * mono))) * g.volume_element
        it, ix = z_idx
        total = 0.0
        nx = g.shape[1]
        vals = self.slices[n]
        for r in range(vals.shape[0]):
            if it - r < 0 or it - r >= g.shape[0]:
                # exposes boundary truncation when z is not interior
                continue
            total += float(np.sum(vals[r] * mono[r]))
        return abs(total * g.volume_element)

    def moment_table(self, z_indices=None) -> list[dict]:
        rows = []
        ks = multi_indices_below(self.grid.scaling, self.sigma + 1e-9)
        ks += [k for k in _exact_indices(self.grid.scaling, self.sigma) if k not in ks]
        for n in range(self.N + 1):
            for k in ks:
                if z_indices is None:
                    rows.append(
                        {"slice": n, "k": k, "z": "stencil", "residual": self.moment_residual(n, k)}
                    )
                else:
                    for z in z_indices:
                        rows.append(
                            {"slice": n, "k": k, "z": z, "residual": self.moment_residual(n, k, z)}
                        )
        return rows

    def support_violation(self) -> float:
        """Max |K_n| outside the parabolic ball of radius 2^-n (must be 0)."""
        rho = _parabolic_rho(self.grid, self.depth)
        worst = 0.0
        for n, sl in enumerate(self.slices):
            mask = rho > 2.0 ** (-n) + 1e-12
            if mask.any():
                worst = max(worst, float(np.max(np.abs(sl[mask]), initial=0.0)))
        return worst


def _mono(wt, wx, k):
    return np.power(wt, k[0])[:, None] * np.power(wx, k[1])[None, :]


def _exact_indices(scaling, sigma):
    """Multi-indices with |k|_s == sigma (the kill set is <= sigma)."""
    out = []
    for k in multi_indices_below(scaling, sigma + 1.0 + 1e-9):
        if abs(sum(s * p for s, p in zip(scaling, k)) - sigma) <= 1e-9:
            out.append(k)
    return out


def _which_key(which):
    return f"s{which}" if isinstance(which, (int, np.integer)) else str(which)


def taylor_lift(kernel: KernelDecomposition, F: GridFunction, n: int, zeta: float, z_idx) -> TaylorJet:
    """Jet Q_k = (1/k!) sum_y D_1^k K_n(z, y) F(y) eps^{|s|}, |k|_s < zeta + beta.

    The formula does not involve zeta beyond the index cutoff, so jets for
    different zeta agree on shared multi-indices exactly.
    """
    g = kernel.grid
    depth = kernel.slice_depth(n)
    boundary = z_idx[0] - depth < 0
    coeffs = {}
    for k in multi_indices_below(g.scaling, zeta + kernel.beta):
        val = kernel.gather(F.values, z_idx, n, deriv=k) / _factorial_multi(k)
        coeffs[k] = val
    return TaylorJet(base=g.point(z_idx), coefficients=coeffs, boundary_flag=boundary)


# ---------------------------------------------------------------------------
# cache
# ---------------------------------------------------------------------------


def _scheme_hash(grid: Grid) -> str:
    payload = f"semi-implicit-euler|{grid.shape}|{grid.spacings}|{grid.t0}"
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def heat_kernel(
    grid: Grid,
    beta: float = 2.0,
    sigma: float = 2.0,
    correct_moments: bool = True,
    cache_dir: str | None = None,
) -> KernelDecomposition:
    """Build (or load from cache) the moment-killed heat-kernel decomposition."""
    cache_dir = cache_dir if cache_dir is not None else os.environ.get("REGSTRUCT_CACHE")
    key = None
    if cache_dir:
        key = (
            f"heat_{grid.eps:g}_{'x'.join(map(str, grid.scaling))}_{beta:g}_{sigma:g}"
            f"_{int(correct_moments)}_{_scheme_hash(grid)}.npy"
        )
        path = Path(cache_dir) / key
        if path.exists():
            green = np.load(path)
            return KernelDecomposition(grid, green, beta, sigma, correct_moments)
    green = heat_green_stencil(grid)
    if cache_dir and key:
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
        np.save(Path(cache_dir) / key, green)
    return KernelDecomposition(grid, green, beta, sigma, correct_moments)


def decompose_kernel(
    grid: Grid,
    green: np.ndarray | GridFunction | None = None,
    beta: float = 2.0,
    sigma: float = 2.0,
    correct_moments: bool = True,
) -> KernelDecomposition:
    """Decompose a causal translation-invariant Green stencil (heat by default)."""
    if green is None:
        green = heat_green_stencil(grid)
    if isinstance(green, GridFunction):
        green = green.values
    return KernelDecomposition(grid, green, beta, sigma, correct_moments)
