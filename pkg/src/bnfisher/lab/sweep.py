"""Learning-rate phase diagrams over (gamma, log10 eta) or (sigma_w^2, log10 eta)."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..arch import ArchSpec
from ..eigenbound import predict
from .data import Dataset
from .train import RunOutcome, train

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CellSummary:
    x: float
    log10_eta: float
    mean_test_loss: float | None
    any_diverged: bool
    n_seeds: int
    n_errors: int = 0


@dataclass
class PhaseGrid:
    x_name: str                      # "gamma" or "sigma_w_sq"
    x_values: tuple[float, ...]
    log10_etas: tuple[float, ...]
    seeds: tuple[int, ...]
    outcomes: list[RunOutcome]       # ordered (x, eta, seed)
    eta_star: tuple[float, ...] = field(default=())

    def __post_init__(self):
        expect = len(self.x_values) * len(self.log10_etas) * len(self.seeds)
        if len(self.outcomes) != expect:
            raise ValueError(f"grid needs {expect} outcomes, got {len(self.outcomes)}")

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.x_values), len(self.log10_etas)

    def cell(self, i: int, j: int) -> list[RunOutcome]:
        n = len(self.seeds)
        start = (i * len(self.log10_etas) + j) * n
        return self.outcomes[start:start + n]

    def summary(self, i: int, j: int) -> CellSummary:
        runs = self.cell(i, j)
        ok = [r.final_test_loss for r in runs if not r.diverged and r.error is None]
        return CellSummary(self.x_values[i], self.log10_etas[j],
                           float(np.mean(ok)) if ok else None,
                           any(r.diverged for r in runs), len(runs),
                           sum(r.error is not None for r in runs))

    def summaries(self) -> list[CellSummary]:
        return [self.summary(i, j) for i in range(self.shape[0]) for j in range(self.shape[1])]

    def largest_stable_log10_eta(self) -> list[float | None]:
        """Per x, the largest grid eta at which no seed diverged."""
        out = []
        for i in range(self.shape[0]):
            stable = [self.log10_etas[j] for j in range(self.shape[1])
                      if not self.summary(i, j).any_diverged and self.summary(i, j).n_errors == 0]
            out.append(max(stable) if stable else None)
        return out

    def boundary_log10_eta(self) -> list[float | None]:
        """Per x, the largest stable eta that lies below the first divergent one."""
        out = []
        for i in range(self.shape[0]):
            last = None
            for j in range(self.shape[1]):
                if self.summary(i, j).any_diverged:
                    break
                last = self.log10_etas[j]
            out.append(last)
        return out

    def monotonicity_violations(self) -> list[tuple[int, int, int]]:
        """(x index, seed, eta index) where a run converged above a diverged one."""
        bad = []
        for i in range(self.shape[0]):
            for s_idx, seed in enumerate(self.seeds):
                seen_div = False
                for j in range(self.shape[1]):
                    r = self.cell(i, j)[s_idx]
                    if r.diverged:
                        seen_div = True
                    elif seen_div and r.error is None:
                        bad.append((i, seed, j))
        return bad


def parse_grid(text: str) -> list[float]:
    """``"a:b:step"`` (inclusive of b up to round-off) or a comma list."""
    text = text.strip()
    if "," in text or ":" not in text:
        vals = [float(v) for v in text.split(",") if v.strip()]
    else:
        parts = text.split(":")
        if len(parts) != 3:
            raise ValueError(f"grid {text!r} must look like a:b:step")
        a, b, step = (float(p) for p in parts)
        if step <= 0 or b < a:
            raise ValueError(f"grid {text!r}: need step > 0 and b >= a")
        n = int(math.floor((b - a) / step + 1e-9)) + 1
        vals = [round(a + k * step, 10) for k in range(n)]
    if not vals:
        raise ValueError("grid is empty")
    return vals


# worker state for the process pool; set once per worker
_DATA: tuple[Dataset, Dataset] | None = None


def _init_worker(train_set: Dataset, test_set: Dataset) -> None:
    global _DATA
    _DATA = (train_set, test_set)


def _run_cell(job) -> RunOutcome:
    spec, eta, seed, epochs, batch_size, x_name, x = job
    train_set, test_set = _DATA
    try:
        out = train(spec, train_set, test_set, eta, epochs, seed=seed, batch_size=batch_size)
    except Exception as exc:  # recorded, not raised
        gamma = x if x_name == "gamma" else None
        out = RunOutcome(gamma, eta, seed, None, False, 0, spec.init.sigma_w_sq, (), f"{type(exc).__name__}: {exc}")
    return out


def _sweep(x_name: str, specs: list[ArchSpec], x_values, log_eta_grid, seeds, train_set: Dataset,
           test_set: Dataset, epochs: int, batch_size: int | None, jobs: int,
           progress: Callable[[int, int], None] | None) -> list[RunOutcome]:
    jobs_list = [(spec, 10.0 ** le, int(seed), epochs, batch_size, x_name, x)
                 for spec, x in zip(specs, x_values) for le in log_eta_grid for seed in seeds]
    total = len(jobs_list)
    results: list[RunOutcome] = []
    if jobs <= 1:
        _init_worker(train_set, test_set)
        for k, job in enumerate(jobs_list, start=1):
            results.append(_run_cell(job))
            if progress:
                progress(k, total)
        return results
    with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker,
                             initargs=(train_set, test_set)) as pool:
        # map keeps submission order, so the grid layout is deterministic
        for k, res in enumerate(pool.map(_run_cell, jobs_list, chunksize=1), start=1):
            results.append(res)
            if progress:
                progress(k, total)
    return results


def phase_sweep(spec_template: ArchSpec, gamma_grid, log_eta_grid, seeds, train_set: Dataset,
                test_set: Dataset, *, epochs: int = 5, batch_size: int | None = None, jobs: int = 1,
                progress=None) -> PhaseGrid:
    """Train every (gamma, eta, seed) cell and attach the eta*(gamma) overlay."""
    gammas = tuple(float(g) for g in gamma_grid)
    etas = tuple(float(e) for e in log_eta_grid)
    seeds = tuple(int(s) for s in seeds)
    if not gammas or not etas or not seeds:
        raise ValueError("grids and seed list must be nonempty")
    specs = [spec_template.with_gamma(g) for g in gammas]
    outcomes = _sweep("gamma", specs, gammas, etas, seeds, train_set, test_set, epochs, batch_size,
                      jobs, progress)
    overlay = tuple(predict(s).eta_star for s in specs)
    return PhaseGrid("gamma", gammas, etas, seeds, outcomes, overlay)


def baseline_sweep(spec_template: ArchSpec, sigma_w_sq_grid, log_eta_grid, seeds, train_set: Dataset,
                   test_set: Dataset, *, epochs: int = 5, batch_size: int | None = None, jobs: int = 1,
                   progress=None) -> PhaseGrid:
    """Same as :func:`phase_sweep` for a network without BatchNorm, varying sigma_w^2."""
    spec_template = spec_template.vanilla()
    xs = tuple(float(v) for v in sigma_w_sq_grid)
    etas = tuple(float(e) for e in log_eta_grid)
    seeds = tuple(int(s) for s in seeds)
    if not xs or not etas or not seeds:
        raise ValueError("grids and seed list must be nonempty")
    if min(xs) <= 0:
        raise ValueError("sigma_w^2 must be positive")
    specs = [spec_template.with_init(sigma_w_sq=v) for v in xs]
    outcomes = _sweep("sigma_w_sq", specs, xs, etas, seeds, train_set, test_set, epochs, batch_size,
                      jobs, progress)
    overlay = tuple(predict(s).eta_star for s in specs)
    return PhaseGrid("sigma_w_sq", xs, etas, seeds, outcomes, overlay)
