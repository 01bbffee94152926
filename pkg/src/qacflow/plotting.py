"""SVG figures from results tables: metric vs NFE, metric vs codebook size, trajectory overlays."""
from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .experiment import ResultRow, read_results  # noqa: E402

log = logging.getLogger(__name__)

# fixed ids and no timestamp, so identical inputs give identical bytes
plt.rcParams["svg.hashsalt"] = "qacflow"
_SVG_META = {"Date": None, "Creator": "qacflow"}


@dataclass(frozen=True)
class PlotSpec:
    kind: str = "nfe"          # nfe | codebook
    metrics: tuple[str, ...] = ()
    solver: str = ""
    collection: str = ""
    label_contains: str = ""

    def select(self, rows: list[ResultRow]) -> list[ResultRow]:
        out = []
        for r in rows:
            if self.metrics and r.metric not in self.metrics:
                continue
            if self.solver and r.solver != self.solver:
                continue
            if self.collection and r.collection != self.collection:
                continue
            if self.label_contains and self.label_contains not in r.label:
                continue
            out.append(r)
        return out


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)
    return path


def line_plot(rows: list[ResultRow], metric: str, path: Path) -> Path:
    """Metric vs NFE, one line per (d, solver, collection)."""
    groups: dict[tuple, list[ResultRow]] = defaultdict(list)
    for r in rows:
        groups[(r.d, r.solver, r.collection)].append(r)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for (d, solver, coll), rs in sorted(groups.items()):
        rs = sorted(rs, key=lambda r: r.nfe)
        ax.errorbar([r.nfe for r in rs], [r.value for r in rs], yerr=[r.error for r in rs],
                    marker="o", capsize=2, label=f"d={d} {solver} {coll}".strip())
    ax.set_xlabel("NFE")
    ax.set_ylabel(metric)
    ax.set_xscale("log", base=2)
    ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def bar_plot(rows: list[ResultRow], metric: str, path: Path) -> Path:
    """Metric vs codebook size L^d (bars labelled by d), grouped by NFE."""
    nfes = sorted({r.nfe for r in rows})
    ds = sorted({r.d for r in rows})
    fig, ax = plt.subplots(figsize=(5, 3.5))
    width = 0.8 / max(len(nfes), 1)
    for j, nfe in enumerate(nfes):
        vals, errs = [], []
        for d in ds:
            match = [r for r in rows if r.d == d and r.nfe == nfe]
            vals.append(np.mean([r.value for r in match]) if match else np.nan)
            errs.append(np.mean([r.error for r in match]) if match else 0.0)
        ax.bar(np.arange(len(ds)) + j * width, vals, width, yerr=errs, capsize=2, label=f"NFE {nfe}")
    ax.set_xticks(np.arange(len(ds)) + 0.4 - width / 2)
    ax.set_xticklabels([f"d={d}" for d in ds])
    ax.set_ylabel(metric)
    ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def trajectory_plot(states: list[np.ndarray], times: np.ndarray, path: Path,
                    reference: np.ndarray | None = None, max_points: int = 512) -> Path:
    """Scatter of intermediate 2-D states along a sampling run, one panel per grid time."""
    n = len(states)
    fig, axes = plt.subplots(1, n, figsize=(2.2 * n, 2.4), squeeze=False)
    for ax, x, t in zip(axes[0], states, times):
        x = np.asarray(x)[:max_points]
        if reference is not None:
            ax.scatter(reference[:max_points, 0], reference[:max_points, 1], s=2, c="0.8")
        ax.scatter(x[:, 0], x[:, 1], s=2)
        ax.set_title(f"t={t:.3g}", fontsize=8)
        ax.set_xticks([])
        ax.set_yticks([])
        ax.set_aspect("equal")
    fig.tight_layout()
    return _save(fig, path)


def emit_plots(results_csv: str | Path, out_dir: str | Path, spec: PlotSpec | None = None) -> list[Path]:
    """One SVG per metric. An empty selection writes nothing and logs a warning."""
    spec = spec or PlotSpec()
    rows = spec.select(read_results(results_csv))
    if not rows:
        log.warning("no result rows match the plot filter; nothing written")
        return []
    out_dir = Path(out_dir)
    paths = []
    for metric in sorted({r.metric for r in rows}):
        sel = [r for r in rows if r.metric == metric]
        if spec.kind == "codebook":
            paths.append(bar_plot(sel, metric, out_dir / f"{metric}_vs_codebook.svg"))
        else:
            paths.append(line_plot(sel, metric, out_dir / f"{metric}_vs_nfe.svg"))
    return paths
