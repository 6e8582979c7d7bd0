"""CSV and SVG rendering of a phase grid."""
from __future__ import annotations

import csv
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import LogNorm  # noqa: E402
from matplotlib.patches import Patch, Rectangle  # noqa: E402

from .sweep import PhaseGrid  # noqa: E402

HEATMAP_COLUMNS = ("log10_eta", "mean_test_loss", "any_diverged", "n_seeds")
X_LABELS = {"gamma": r"BatchNorm $\gamma$", "sigma_w_sq": r"$\sigma_w^2$"}

# byte-stable SVG: fixed element ids, text kept as text, no timestamp
_RC = {"svg.hashsalt": "bnfisher", "svg.fonttype": "none", "font.size": 9}
_META = {"Date": None, "Creator": None}


def write_grid_csv(grid: PhaseGrid, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow((grid.x_name,) + HEATMAP_COLUMNS)
        for s in grid.summaries():
            loss = "" if s.mean_test_loss is None else repr(s.mean_test_loss)
            w.writerow([repr(s.x), repr(s.log10_eta), loss, int(s.any_diverged), s.n_seeds])


def _edges(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.size == 1:
        return np.array([v[0] - 0.5, v[0] + 0.5])
    mid = (v[1:] + v[:-1]) / 2
    return np.concatenate([[2 * v[0] - mid[0]], mid, [2 * v[-1] - mid[-1]]])


def render_svg(grid: PhaseGrid, path) -> None:
    nx, ny = grid.shape
    loss = np.full((ny, nx), np.nan)
    diverged = np.zeros((ny, nx), dtype=bool)
    for i in range(nx):
        for j in range(ny):
            s = grid.summary(i, j)
            diverged[j, i] = s.any_diverged
            if s.mean_test_loss is not None and math.isfinite(s.mean_test_loss) and not s.any_diverged:
                loss[j, i] = s.mean_test_loss
    xe, ye = _edges(grid.x_values), _edges(grid.log10_etas)
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5.2, 3.8))
        finite = loss[np.isfinite(loss) & (loss > 0)]
        if finite.size:
            lo, hi = float(finite.min()), float(finite.max())
            if hi <= lo:
                hi = lo * 10
            mesh = ax.pcolormesh(xe, ye, np.ma.masked_invalid(loss), cmap="viridis_r",
                                 norm=LogNorm(lo, hi), shading="flat")
            fig.colorbar(mesh, ax=ax, label="test loss (epoch end)")
        for i in range(nx):
            for j in range(ny):
                if diverged[j, i]:
                    ax.add_patch(Rectangle((xe[i], ye[j]), xe[i + 1] - xe[i], ye[j + 1] - ye[j],
                                           facecolor="white", edgecolor="0.6", hatch="///",
                                           linewidth=0.3))
        if grid.eta_star:
            xs = np.asarray(grid.x_values)
            star = np.log10(np.asarray(grid.eta_star))
            ax.plot(xs, star, color="crimson", lw=1.5, label=r"theory $\eta^*$")
            ax.plot(xs, star - math.log10(2), color="crimson", lw=1.0, ls="--",
                    label=r"$\eta^*/2$")
        handles, labels = ax.get_legend_handles_labels()
        handles.append(Patch(facecolor="white", edgecolor="0.6", hatch="///"))
        labels.append("diverged")
        ax.legend(handles, labels, loc="lower left", fontsize=7, frameon=True)
        ax.set_xlim(xe[0], xe[-1])
        ax.set_ylim(ye[0], ye[-1])
        ax.set_xlabel(X_LABELS.get(grid.x_name, grid.x_name))
        ax.set_ylabel(r"$\log_{10}\eta$")
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata=_META)
        plt.close(fig)


def emit_heatmap(grid: PhaseGrid, csv_path, svg_path) -> tuple[Path, Path]:
    """Write the aggregated grid as CSV and as an SVG heatmap with the eta* overlay."""
    csv_path, svg_path = Path(csv_path), Path(svg_path)
    write_grid_csv(grid, csv_path)
    render_svg(grid, svg_path)
    return csv_path, svg_path
