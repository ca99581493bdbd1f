"""Periodic space-time lattices and the discrete pairing/seminorm backend.

Axis 0 is the distinguished (time) axis and spans a bounded interval; all
other axes are circles of a common period.  Lattice spacings are eps**s_i
per axis, so the nearest-neighbour distance in the parabolic metric d_s is
exactly eps.  For dimension 1 the single axis is the interval axis.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Grid",
    "GridFunction",
    "Profile",
    "TestFunction",
    "DyadicLattice",
    "iota_pair",
    "local_seminorm",
    "dyadic_lattice",
    "partition_psi",
    "testfn_dictionary",
    "white_noise",
    "SamplingPlan",
    "save_grid_function",
    "load_grid_function",
    "export_csv",
]

_MAGIC = b"XEPS"


@dataclass(frozen=True)
class Grid:
    """Uniform lattice with spacings eps**s_i, time interval x spatial torus."""

    eps: float
    scaling: tuple[int, ...] = (2, 1)
    t0: float = -1.0
    t1: float = 3.0
    period: float = 1.0

    def __post_init__(self) -> None:
        if not (0 < self.eps <= 1):
            raise ValueError("eps must lie in (0, 1]")
        object.__setattr__(self, "scaling", tuple(int(s) for s in self.scaling))
        for i, n in enumerate(self.shape):
            if n < 2:
                raise ValueError(f"axis {i} has fewer than 2 lattice points")
        h0 = self.spacings[0]
        if abs((self.t1 - self.t0) / h0 - round((self.t1 - self.t0) / h0)) > 1e-9:
            raise ValueError("time window must be an integer number of lattice steps")
        if self.dim > 1:
            h1 = self.spacings[1]
            if abs(self.period / h1 - round(self.period / h1)) > 1e-9:
                raise ValueError("period must be an integer number of lattice steps")

    @property
    def dim(self) -> int:
        return len(self.scaling)

    @property
    def s_total(self) -> int:
        return sum(self.scaling)

    @property
    def spacings(self) -> tuple[float, ...]:
        return tuple(self.eps ** s for s in self.scaling)

    @property
    def shape(self) -> tuple[int, ...]:
        h = self.spacings
        n0 = int(round((self.t1 - self.t0) / h[0])) + 1
        rest = tuple(int(round(self.period / h[i])) for i in range(1, self.dim))
        return (n0,) + rest

    @property
    def n_points(self) -> int:
        return int(np.prod(self.shape))

    @property
    def volume_element(self) -> float:
        return self.eps ** self.s_total

    def axis_coords(self, axis: int) -> np.ndarray:
        h = self.spacings[axis]
        n = self.shape[axis]
        if axis == 0:
            return self.t0 + h * np.arange(n)
        return h * np.arange(n)

    def point(self, idx: Sequence[int]) -> tuple[float, ...]:
        return tuple(self.axis_coords(a)[int(i)] for a, i in enumerate(idx))

    def index_of(self, point: Sequence[float]) -> tuple[int, ...]:
        """Nearest lattice index to a point (periodic axes wrapped)."""
        out = []
        for a, x in enumerate(point):
            h = self.spacings[a]
            if a == 0:
                j = int(round((x - self.t0) / h))
                j = min(max(j, 0), self.shape[a] - 1)
            else:
                j = int(round(x / h)) % self.shape[a]
            out.append(j)
        return tuple(out)

    def displacement(self, idx_y: Sequence[np.ndarray | int], idx_z: Sequence[np.ndarray | int]):
        """Per-axis physical displacement y - z, min-image on periodic axes."""
        out = []
        for a in range(self.dim):
            d = (np.asarray(idx_y[a]) - np.asarray(idx_z[a])).astype(np.int64)
            if a > 0:
                n = self.shape[a]
                d = (d + n // 2) % n - n // 2
            out.append(d * self.spacings[a])
        return out

    def ds_norm(self, disp: Sequence[np.ndarray | float]) -> np.ndarray:
        """Parabolic distance: max_i |w_i|^(1/s_i)."""
        vals = [np.abs(np.asarray(w, dtype=float)) ** (1.0 / s) for w, s in zip(disp, self.scaling)]
        return np.maximum.reduce(vals)

    def ds_distance(self, idx_y, idx_z) -> np.ndarray:
        return self.ds_norm(self.displacement(idx_y, idx_z))

    def interior_time_indices(self, depth_below: float, depth_above: float = 0.0) -> np.ndarray:
        """Time indices j with t0 + depth_below <= t_j <= t1 - depth_above."""
        t = self.axis_coords(0)
        mask = (t >= self.t0 + depth_below - 1e-12) & (t <= self.t1 - depth_above + 1e-12)
        return np.nonzero(mask)[0]

    def box_indices(self, lo: Sequence[float], hi: Sequence[float]):
        """Index arrays (open meshgrid) of lattice points inside [lo, hi]."""
        per_axis = []
        for a in range(self.dim):
            h = self.spacings[a]
            if a == 0:
                jmin = int(math.ceil((lo[a] - self.t0) / h - 1e-9))
                jmax = int(math.floor((hi[a] - self.t0) / h + 1e-9))
                jmin, jmax = max(jmin, 0), min(jmax, self.shape[0] - 1)
                idx = np.arange(jmin, jmax + 1)
            else:
                n = self.shape[a]
                if hi[a] - lo[a] >= self.period - h / 2:
                    idx = np.arange(n)
                else:
                    jmin = int(math.ceil(lo[a] / h - 1e-9))
                    jmax = int(math.floor(hi[a] / h + 1e-9))
                    idx = np.arange(jmin, jmax + 1) % n
            per_axis.append(idx)
        return np.ix_(*per_axis) if all(len(p) for p in per_axis) else None

    def ball_box(self, center: Sequence[float], radius: float):
        """Bounding box index arrays of the d_s-ball around a point."""
        lo = [center[a] - radius ** self.scaling[a] for a in range(self.dim)]
        hi = [center[a] + radius ** self.scaling[a] for a in range(self.dim)]
        return self.box_indices(lo, hi)


@dataclass
class GridFunction:
    """Real values on the lattice; arithmetic is pointwise."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != self.grid.shape:
            raise ValueError(f"values shape {self.values.shape} != grid shape {self.grid.shape}")

    @staticmethod
    def zeros(grid: Grid) -> "GridFunction":
        return GridFunction(grid, np.zeros(grid.shape))

    @staticmethod
    def from_callable(grid: Grid, fn: Callable[..., np.ndarray]) -> "GridFunction":
        coords = np.meshgrid(*[grid.axis_coords(a) for a in range(grid.dim)], indexing="ij")
        return GridFunction(grid, np.asarray(fn(*coords), dtype=float) * np.ones(grid.shape))

    def copy(self) -> "GridFunction":
        return GridFunction(self.grid, self.values.copy())

    def __add__(self, other):
        return GridFunction(self.grid, self.values + _vals(other))

    def __sub__(self, other):
        return GridFunction(self.grid, self.values - _vals(other))

    def __mul__(self, other):
        return GridFunction(self.grid, self.values * _vals(other))

    __rmul__ = __mul__

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.values))) if self.values.size else 0.0


def _vals(x):
    return x.values if isinstance(x, GridFunction) else x


def white_noise(grid: Grid, seed: int, amplitude: float = 1.0) -> GridFunction:
    """Space-time white noise sample: eps^(-|s|/2) * iid standard normals."""
    rng = np.random.default_rng(seed)
    scale = amplitude * grid.volume_element ** -0.5
    return GridFunction(grid, scale * rng.standard_normal(grid.shape))


# ---------------------------------------------------------------------------
# test functions
# ---------------------------------------------------------------------------


def _bump(u: np.ndarray) -> np.ndarray:
    out = np.zeros_like(u, dtype=float)
    inside = np.abs(u) < 1.0
    ui = u[inside]
    out[inside] = np.exp(-1.0 / (1.0 - ui * ui))
    return out


@dataclass(frozen=True)
class Profile:
    """Smooth template on the unit d_s-ball (= unit box), C^r norm <= 1."""

    name: str
    fn: Callable[[list[np.ndarray]], np.ndarray]
    norm_const: float

    def __call__(self, coords: list[np.ndarray]) -> np.ndarray:
        return self.fn(coords) / self.norm_const


@dataclass(frozen=True)
class TestFunction:
    """Scaled and centred profile phi^lambda_z."""

    profile: Profile
    center: tuple[float, ...]
    scale: float

    def support_radii(self, grid: Grid) -> list[float]:
        return [self.scale ** s for s in grid.scaling]

    def evaluate(self, grid: Grid, disp: list[np.ndarray]) -> np.ndarray:
        lam = self.scale
        coords = [w / lam ** s for w, s in zip(disp, grid.scaling)]
        return self.profile(coords) * lam ** (-grid.s_total)


def _estimate_cr_norm(fn, dim: int, r: int, n: int = 161) -> float:
    """Max over a dense sample of all derivatives of total order <= r."""
    axes = [np.linspace(-1.0, 1.0, n) for _ in range(dim)]
    coords = np.meshgrid(*axes, indexing="ij")
    base = fn(list(coords))
    h = axes[0][1] - axes[0][0]
    worst = float(np.max(np.abs(base)))
    layer = {(): base}
    for _ in range(r):
        next_layer = {}
        for key, arr in layer.items():
            for ax in range(dim):
                d = np.gradient(arr, h, axis=ax)
                next_layer[key + (ax,)] = d
                worst = max(worst, float(np.max(np.abs(d))))
        layer = next_layer
    return worst


_PROFILE_CACHE: dict[tuple[int, int, int], list[Profile]] = {}


def testfn_dictionary(grid_or_dim, r: int = 2, count: int = 8) -> list[Profile]:
    """Finite surrogate for the sup over all C^r test profiles.

    Returns at least `count` profiles: the standard product bump plus
    shifted, modulated and odd variants, each normalized so the sampled
    C^r norm is <= 1.  Odd-in-one-axis members guarantee nonvanishing
    first moments in every direction.
    """
    dim = grid_or_dim.dim if isinstance(grid_or_dim, Grid) else int(grid_or_dim)
    if r < 1:
        raise ValueError("r must be >= 1")
    key = (dim, r, count)
    if key in _PROFILE_CACHE:
        return _PROFILE_CACHE[key]

    def product_bump(coords, widths=None, centers=None):
        out = 1.0
        for a, u in enumerate(coords):
            w = 1.0 if widths is None else widths[a]
            c = 0.0 if centers is None else centers[a]
            out = out * _bump((u - c) / w)
        return out

    raw: list[tuple[str, Callable]] = [
        ("bump", lambda U: product_bump(U)),
        ("sharp", lambda U: product_bump(U) ** 2),
        ("shift+", lambda U: product_bump(U, widths=[0.6] * dim, centers=[0.3] * dim)),
        ("shift-", lambda U: product_bump(U, widths=[0.6] * dim, centers=[-0.3] * dim)),
        ("wave", lambda U: product_bump(U) * np.cos(3.0 * U[-1])),
    ]
    for a in range(dim):
        raw.append((f"odd{a}", lambda U, a=a: product_bump(U) * U[a]))
    k = 0
    while len(raw) < count:
        k += 1
        raw.append((f"mod{k}", lambda U, k=k: product_bump(U) * np.cos((k + 3.0) * U[0])))

    profiles = []
    for name, fn in raw[: max(count, len(raw))]:
        c = _estimate_cr_norm(fn, dim, r)
        profiles.append(Profile(name, fn, c * (1.0 + 1e-3)))
    _PROFILE_CACHE[key] = profiles
    return profiles


def _support_data(grid: Grid, tf: TestFunction):
    """Index mesh and displacements covering the support of tf (time-clipped)."""
    radii = tf.support_radii(grid)
    lo = [tf.center[a] - radii[a] for a in range(grid.dim)]
    hi = [tf.center[a] + radii[a] for a in range(grid.dim)]
    mesh = grid.box_indices(lo, hi)
    if mesh is None:
        return None, None
    disp = []
    for a in range(grid.dim):
        x = grid.axis_coords(a)[mesh[a]]
        d = x - tf.center[a]
        if a > 0:
            d = (d + grid.period / 2) % grid.period - grid.period / 2
        disp.append(d)
    return mesh, disp


def iota_pair(f: GridFunction, tf: TestFunction) -> float:
    """The inclusion pairing: eps^{|s|} * sum_z f(z) phi(z)."""
    grid = f.grid
    mesh, disp = _support_data(grid, tf)
    if mesh is None:
        return 0.0
    phi = tf.evaluate(grid, disp)
    return float(grid.volume_element * np.sum(f.values[mesh] * phi))


def pair_callable(f: GridFunction, fn: Callable[[list[np.ndarray]], np.ndarray]) -> float:
    """iota pairing against an arbitrary callable of the coordinates."""
    grid = f.grid
    coords = np.meshgrid(*[grid.axis_coords(a) for a in range(grid.dim)], indexing="ij")
    return float(grid.volume_element * np.sum(f.values * fn(list(coords))))


def local_seminorm(f: GridFunction, alpha: float, lo: Sequence[float], hi: Sequence[float]) -> float:
    """Small-scale seminorm eps^(-alpha) sup |f| over a box of d_s-diameter <= 2 eps."""
    grid = f.grid
    diam = max((hi[a] - lo[a]) ** (1.0 / grid.scaling[a]) for a in range(grid.dim))
    if diam > 2 * grid.eps + 1e-12:
        raise ValueError(f"box d_s-diameter {diam:g} exceeds 2*eps={2 * grid.eps:g}")
    mesh = grid.box_indices(lo, hi)
    if mesh is None:
        return 0.0
    vals = f.values[mesh]
    if vals.size == 0:
        return 0.0
    return float(grid.eps ** (-alpha) * np.max(np.abs(vals)))


# ---------------------------------------------------------------------------
# dyadic lattices and the partition of unity
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DyadicLattice:
    """The scaled lattice with per-axis spacings 2^(-n s_i)."""

    level: int
    scaling: tuple[int, ...]

    @property
    def spacings(self) -> tuple[float, ...]:
        return tuple(2.0 ** (-self.level * s) for s in self.scaling)

    def points_in_box(self, lo: Sequence[float], hi: Sequence[float]) -> np.ndarray:
        axes = []
        for a in range(len(self.scaling)):
            h = self.spacings[a]
            kmin = int(math.ceil(lo[a] / h - 1e-9))
            kmax = int(math.floor(hi[a] / h + 1e-9))
            axes.append(h * np.arange(kmin, kmax + 1))
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)


def dyadic_lattice(n: int, scaling: Sequence[int]) -> DyadicLattice:
    if n < 0:
        raise ValueError("level must be >= 0")
    return DyadicLattice(int(n), tuple(int(s) for s in scaling))


def _smoothstep(x: np.ndarray) -> np.ndarray:
    """C-infinity step: 0 for x<=0, 1 for x>=1, theta(x)+theta(1-x)=1."""
    x = np.asarray(x, dtype=float)

    def sigma(v):
        out = np.zeros_like(v)
        pos = v > 0
        out[pos] = np.exp(-1.0 / v[pos])
        return out

    a = sigma(x)
    b = sigma(1.0 - x)
    return a / (a + b + 1e-300)


def psi_template(x: np.ndarray) -> np.ndarray:
    """Smooth bump with supp in [-1,1], Psi(0)=1 and sum_k Psi(x+k)=1."""
    x = np.asarray(x, dtype=float)
    return _smoothstep(x + 1.0) - _smoothstep(x)


def psi_factor_values(grid: Grid, axis: int, n: int, z_coord: float, idx: np.ndarray) -> np.ndarray:
    """Values of Psi(2^(n s_a) (y_a - z_a)) on lattice indices of one axis."""
    y = grid.axis_coords(axis)[idx]
    d = y - z_coord
    scale = 2.0 ** (n * grid.scaling[axis])
    if axis > 0:
        # fold all periodic images whose support reaches the window
        out = np.zeros_like(d)
        reach = 1.0 / scale
        m_max = int(math.ceil((reach + grid.period / 2) / grid.period))
        for m in range(-m_max, m_max + 1):
            out += psi_template(scale * (d + m * grid.period))
        return out
    return psi_template(scale * d)


def partition_psi(grid: Grid, n: int, z_n: Sequence[float]) -> GridFunction:
    """Rescaled partition function centred at a level-n dyadic point."""
    lat = DyadicLattice(n, grid.scaling)
    for a, h in enumerate(lat.spacings):
        if abs(z_n[a] / h - round(z_n[a] / h)) > 1e-9:
            raise ValueError(f"z_n coordinate {z_n[a]} not on the level-{n} lattice (axis {a})")
    out = np.ones(grid.shape)
    for a in range(grid.dim):
        fac = psi_factor_values(grid, a, n, z_n[a], np.arange(grid.shape[a]))
        shape = [1] * grid.dim
        shape[a] = -1
        out = out * fac.reshape(shape)
    return GridFunction(grid, out)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def save_grid_function(f: GridFunction, path: str) -> None:
    g = f.grid
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", 1, g.dim))
        fh.write(struct.pack(f"<{g.dim}q", *g.scaling))
        fh.write(struct.pack("<dddd", g.eps, g.t0, g.t1, g.period))
        fh.write(struct.pack(f"<{g.dim}q", *g.shape))
        fh.write(np.ascontiguousarray(f.values, dtype="<f8").tobytes())


def load_grid_function(path: str) -> GridFunction:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError("not a grid-function file")
        _, dim = struct.unpack("<II", fh.read(8))
        scaling = struct.unpack(f"<{dim}q", fh.read(8 * dim))
        eps, t0, t1, period = struct.unpack("<dddd", fh.read(32))
        shape = struct.unpack(f"<{dim}q", fh.read(8 * dim))
        grid = Grid(eps=eps, scaling=scaling, t0=t0, t1=t1, period=period)
        if grid.shape != shape:
            raise ValueError("stored shape inconsistent with grid header")
        data = np.frombuffer(fh.read(), dtype="<f8").reshape(shape)
        return GridFunction(grid, data.copy())


def export_csv(f: GridFunction, path: str) -> None:
    import csv

    g = f.grid
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{a}" for a in range(g.dim)] + ["value"])
        coords = [g.axis_coords(a) for a in range(g.dim)]
        for idx in np.ndindex(*g.shape):
            row = [format(coords[a][idx[a]], ".12g") for a in range(g.dim)]
            row.append(format(f.values[idx], ".12g"))
            w.writerow(row)


# ---------------------------------------------------------------------------
# deterministic sampling plans
# ---------------------------------------------------------------------------


@dataclass
class SamplingPlan:
    """Seeded, reproducible choice of base points and separated pairs.

    All sups in the verification harness run over this finite plan, a
    documented surrogate for the continuum suprema.  Pairs are grouped in
    dyadic shells r, eps <= r <= r_max, with canonical axis/diagonal
    offsets plus seeded extras per shell.
    """

    grid: Grid
    seed: int = 0
    n_base: int = 32
    partners_per_shell: int = 8
    r_max: float = 1.0
    time_margin: float = 0.0
    t_lo: float | None = None
    t_hi: float | None = None

    def __post_init__(self) -> None:
        self._rng = np.random.default_rng(self.seed)
        if self.grid.dim > 1:
            self.r_max = min(self.r_max, 0.49 * self.grid.period)

    def restricted(self, t_lo: float | None = None, t_hi: float | None = None) -> "SamplingPlan":
        return SamplingPlan(
            self.grid,
            self.seed,
            self.n_base,
            self.partners_per_shell,
            self.r_max,
            self.time_margin,
            t_lo if t_lo is not None else self.t_lo,
            t_hi if t_hi is not None else self.t_hi,
        )

    def base_indices(self) -> list[tuple[int, ...]]:
        g = self.grid
        tidx = g.interior_time_indices(self.time_margin, self.time_margin)
        t = g.axis_coords(0)
        if self.t_lo is not None:
            tidx = tidx[t[tidx] >= self.t_lo - 1e-12]
        if self.t_hi is not None:
            tidx = tidx[t[tidx] <= self.t_hi + 1e-12]
        if len(tidx) == 0:
            tidx = np.array([g.shape[0] // 2])
        rng = np.random.default_rng(self.seed + 1)
        out = []
        for k in range(self.n_base):
            it = int(tidx[int(rng.integers(len(tidx)))])
            rest = [int(rng.integers(g.shape[a])) for a in range(1, g.dim)]
            out.append((it, *rest))
        return sorted(set(out))

    def shells(self) -> list[float]:
        g = self.grid
        out = []
        r = g.eps
        while r <= self.r_max + 1e-12:
            out.append(r)
            r *= 2.0
        return out

    def shell_offsets(self, r: float) -> list[tuple[int, ...]]:
        """Index offsets with d_s length in (r/2, r], canonical + seeded."""
        g = self.grid
        steps = [max(1, int(round(r ** g.scaling[a] / g.spacings[a]))) for a in range(g.dim)]
        cands: set[tuple[int, ...]] = set()
        for a in range(g.dim):
            for sgn in (+1, -1):
                off = [0] * g.dim
                off[a] = sgn * steps[a]
                cands.add(tuple(off))
        cands.add(tuple(steps))
        cands.add(tuple(-v for v in steps))
        rng = np.random.default_rng(self.seed + int(round(math.log2(r / g.eps))) + 17)
        tries = 0
        while len(cands) < self.partners_per_shell and tries < 50:
            tries += 1
            off = []
            full_axis = int(rng.integers(g.dim))
            for a in range(g.dim):
                if a == full_axis:
                    off.append(int(rng.choice([-1, 1])) * steps[a])
                else:
                    off.append(int(rng.integers(-steps[a], steps[a] + 1)))
            cands.add(tuple(off))
        out = []
        for off in sorted(cands):
            d = g.ds_norm([off[a] * g.spacings[a] for a in range(g.dim)])
            if r / 2 - 1e-12 < d <= r + 1e-12:
                out.append(off)
        return out

    def apply_offset(self, idx: tuple[int, ...], off: tuple[int, ...]) -> tuple[int, ...] | None:
        g = self.grid
        out = []
        for a in range(g.dim):
            j = idx[a] + off[a]
            if a == 0:
                if j < 0 or j >= g.shape[0]:
                    return None
                t = g.axis_coords(0)[j]
                if self.t_lo is not None and t < self.t_lo - 1e-12:
                    return None
                if self.t_hi is not None and t > self.t_hi + 1e-12:
                    return None
            else:
                j %= g.shape[a]
            out.append(j)
        return tuple(out)

    def pairs(self, r_min: float | None = None, r_max: float | None = None):
        """List of (idx_z, idx_y, r) with d_s(y, z) in (eps-shells within range)."""
        out = []
        for r in self.shells():
            if r_min is not None and r < r_min - 1e-12:
                continue
            if r_max is not None and r > r_max + 1e-12:
                continue
            offs = self.shell_offsets(r)
            for z in self.base_indices():
                for off in offs:
                    y = self.apply_offset(z, off)
                    if y is not None:
                        out.append((z, y, r))
        return out

    def triples(self, count: int = 24, radius: float = 0.25):
        """(x, y, z) triples with pairwise d_s distances <= radius.

        Kept local so that min-image displacements compose additively on
        periodic axes.
        """
        g = self.grid
        rng = np.random.default_rng(self.seed + 5)
        bases = self.base_indices()
        out = []
        steps = [max(1, int(round(radius ** g.scaling[a] / g.spacings[a]))) for a in range(g.dim)]
        k = 0
        while len(out) < count and k < 10 * count:
            k += 1
            x = bases[int(rng.integers(len(bases)))]
            offs = []
            for _ in range(2):
                offs.append(tuple(int(rng.integers(-steps[a], steps[a] + 1)) for a in range(g.dim)))
            y = self.apply_offset(x, offs[0])
            z = self.apply_offset(x, offs[1])
            if y is None or z is None:
                continue
            out.append((x, y, z))
        return out
