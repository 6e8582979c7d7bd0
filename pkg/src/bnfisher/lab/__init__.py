"""Training experiments: data loading, momentum GD and learning-rate phase diagrams."""
from .data import (Dataset, IdxFormatError, load_idx, load_mnist, read_idx, synthetic_gaussian,
                   synthetic_split)
from .sweep import CellSummary, PhaseGrid, baseline_sweep, parse_grid, phase_sweep
from .train import EXPLODE, RunOutcome, momentum_gd, quadratic_diverges, train

__all__ = [
    "Dataset", "IdxFormatError", "load_idx", "load_mnist", "read_idx", "synthetic_gaussian",
    "synthetic_split", "CellSummary", "PhaseGrid", "baseline_sweep", "parse_grid", "phase_sweep",
    "EXPLODE", "RunOutcome", "momentum_gd", "quadratic_diverges", "train", "emit_heatmap",
]


def emit_heatmap(grid, csv_path, svg_path):
    # imported lazily so matplotlib is only loaded when a figure is written
    from .plot import emit_heatmap as _emit
    return _emit(grid, csv_path, svg_path)
