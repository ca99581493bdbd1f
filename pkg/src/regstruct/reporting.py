"""Suite reporting: RFC-4180 CSV tables, run manifests, and figures.

CSV bodies are byte-reproducible under a fixed seed: rows are emitted in a
stable order and floats use a fixed %.12g format.  Timestamps go to a
separate file so they never perturb the diffable artifacts.  Exponent fits
are rendered as log-log figures next to the tables.
"""

from __future__ import annotations

import csv
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .fitting import ExponentFit

__all__ = [
    "Assertion",
    "SuiteResult",
    "write_csv",
    "write_manifest",
    "render_fit_figure",
    "render_field_figure",
    "parallel_map",
]


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".12g")
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def write_csv(path, rows: list[dict], columns: list[str] | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if columns is None:
        columns = []
        for r in rows:
            for k in r:
                if k not in columns:
                    columns.append(k)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c, "")) for c in columns])


@dataclass
class Assertion:
    name: str
    value: float
    threshold: float
    op: str  # "<=", ">=", "monotone-decreasing", ...

    @property
    def passed(self) -> bool:
        if self.op == "<=":
            return self.value <= self.threshold
        if self.op == ">=":
            return self.value >= self.threshold
        raise ValueError(f"unknown assertion op {self.op}")

    def row(self) -> dict:
        return {
            "assertion": self.name,
            "value": self.value,
            "op": self.op,
            "threshold": self.threshold,
            "pass": self.passed,
        }


@dataclass
class SuiteResult:
    suite: str
    rows: list[dict] = field(default_factory=list)
    assertions: list[Assertion] = field(default_factory=list)
    fits: dict[str, ExponentFit] = field(default_factory=dict)
    fields: dict[str, object] = field(default_factory=dict)  # name -> GridFunction
    columns: list[str] | None = None

    @property
    def exit_code(self) -> int:
        return 0 if all(a.passed for a in self.assertions) else 1

    def require(self, name: str, value: float, op: str, threshold: float) -> None:
        self.assertions.append(Assertion(name, float(value), float(threshold), op))

    def save(self, out_dir, config: dict | None = None, plot: bool = True) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / f"{self.suite}.csv", self.rows, self.columns)
        write_csv(
            out / "assertions.csv",
            [a.row() for a in self.assertions],
            ["assertion", "value", "op", "threshold", "pass"],
        )
        if config is not None:
            write_manifest(out, self.suite, config)
        if plot:
            for name, fit in self.fits.items():
                if fit is not None:
                    render_fit_figure(out / f"{self.suite}_{name}.png", fit, name)
            for name, gf in self.fields.items():
                render_field_figure(out / f"{self.suite}_{name}.png", gf, name)
        return out


def write_manifest(out_dir, suite: str, config: dict) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"suite": suite, "config": config}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))
    with open(out / "timestamps.txt", "a", encoding="utf-8") as fh:
        fh.write(f"{suite} {time.strftime('%Y-%m-%dT%H:%M:%S')}\n")


def render_fit_figure(path, fit: ExponentFit, title: str) -> None:
    fig, ax = plt.subplots(figsize=(4.2, 3.2))
    xs = np.array([p[0] for p in fit.points])
    ys = np.array([p[1] for p in fit.points])
    keep = ys > 0
    ax.loglog(xs[keep], ys[keep], "o", ms=5, color="#20639b", label="measured")
    if keep.any():
        xx = np.linspace(np.log2(xs[keep].min()), np.log2(xs[keep].max()), 32)
        ax.loglog(
            2**xx,
            2 ** (fit.slope * xx + fit.intercept),
            "-",
            color="#ed553b",
            label=f"slope {fit.slope:.3f}",
        )
    ax.set_xlabel("scale")
    ax.set_ylabel("sup / mean pairing")
    ax.set_title(title, fontsize=9)
    ax.legend(fontsize=8, frameon=False)
    ax.grid(True, which="both", alpha=0.25)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def render_field_figure(path, gf, title: str) -> None:
    fig, ax = plt.subplots(figsize=(4.6, 3.4))
    vals = gf.values
    if vals.ndim == 1:
        ax.plot(gf.grid.axis_coords(0), vals, lw=1.0)
        ax.set_xlabel("x")
    else:
        im = ax.imshow(
            vals,
            aspect="auto",
            origin="lower",
            extent=[0, gf.grid.period, gf.grid.t0, gf.grid.t1],
            cmap="RdBu_r",
        )
        fig.colorbar(im, ax=ax, shrink=0.85)
        ax.set_xlabel("x")
        ax.set_ylabel("t")
    ax.set_title(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def parallel_map(fn, items, threads: int = 1):
    """Deterministic map: results ordered by item position regardless of pool."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
