"""Lower bound on the top Fisher eigenvalue and the critical learning rate."""
from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from .arch import ArchSpec
from .meanfield import OrderParamProfile, run_profile

SWEEP_COLUMNS = ("gamma", "lambda_bound", "eta_star", "eta_opt", "variant")


class DegenerateSpectrumError(ArithmeticError):
    pass


@dataclass(frozen=True)
class SpectralReport:
    f_per_layer: tuple[float, ...]
    lambda_bound: float
    eta_star: float
    eta_opt: float
    momentum: float


@dataclass(frozen=True)
class SweepRow:
    gamma: float
    lambda_bound: float
    eta_star: float
    eta_opt: float
    variant: str


def critical_learning_rate(lambda_max: float, momentum: float) -> float:
    """Largest stable step of momentum GD on a quadratic with curvature lambda_max."""
    return 2.0 * (1.0 + momentum) / lambda_max


def layer_contribution(profile: OrderParamProfile, l: int) -> float:
    """Contribution f_l of layer ``l`` (1-based) to the eigenvalue bound."""
    spec = profile.arch
    if not 1 <= l <= spec.depth:
        raise IndexError(f"layer index {l} outside 1..{spec.depth}")
    lay = spec.layers[l - 1]
    below, here = profile[l - 1], profile[l]
    if here.delta_tilde is None or below.h_tilde is None:
        raise ValueError(f"layer {l}: profile is incomplete")
    if not lay.is_conv:
        return lay.fan_in * below.h_tilde * here.delta_tilde
    if here.delta_hat is None or below.h_hat is None:
        raise ValueError(f"layer {l}: conv layer needs H_hat and Delta_hat")
    k1 = lay.spatial_sites - 1
    return lay.fan_in * (k1 * here.delta_hat + here.delta_tilde) * (k1 * below.h_hat + below.h_tilde)


def spectral_report(profile: OrderParamProfile, momentum: float | None = None) -> SpectralReport:
    if momentum is None:
        momentum = profile.arch.init.momentum
    f = tuple(layer_contribution(profile, l) for l in range(1, profile.arch.depth + 1))
    lam = sum(f)
    if not lam > 0:
        raise DegenerateSpectrumError("degenerate spectrum: eigenvalue bound is zero")
    eta = critical_learning_rate(lam, momentum)
    return SpectralReport(f, lam, eta, eta / 2, momentum)


def predict(spec: ArchSpec, **profile_kw) -> SpectralReport:
    return spectral_report(run_profile(spec, **profile_kw))


def _row(spec: ArchSpec, gamma: float, variant: str, momentum: float, profile_kw: dict) -> SweepRow:
    rep = spectral_report(run_profile(spec, **profile_kw), momentum)
    return SweepRow(float(gamma), rep.lambda_bound, rep.eta_star, rep.eta_opt, variant)


def gamma_sweep(spec: ArchSpec, gamma_grid, momentum: float | None = None, *,
                include_vanilla: bool = True, jobs: int = 1, **profile_kw) -> list[SweepRow]:
    """Evaluate the bound for every BN gamma in ``gamma_grid``.

    The BN rows come first in grid order, followed (if requested) by one
    vanilla row per grid point so the two curves can be plotted together.
    """
    grid = [float(g) for g in gamma_grid]
    if not grid:
        raise ValueError("gamma grid is empty")
    hidden = spec.layers[:-1]
    if not hidden or not all(lay.batch_norm for lay in hidden):
        raise ValueError("gamma sweep needs BatchNorm on every hidden layer")
    if momentum is None:
        momentum = spec.init.momentum
    specs = [spec.with_gamma(g) for g in grid]
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        rows = list(pool.map(lambda sg: _row(sg[0], sg[1], "bn", momentum, profile_kw),
                             zip(specs, grid)))
    if include_vanilla:
        van = _row(spec.vanilla(), grid[0], "vanilla", momentum, profile_kw)
        rows += [SweepRow(g, van.lambda_bound, van.eta_star, van.eta_opt, "vanilla") for g in grid]
    return rows


def sweep_to_csv(rows: list[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for r in rows:
        w.writerow([repr(r.gamma), repr(r.lambda_bound), repr(r.eta_star), repr(r.eta_opt), r.variant])
    return buf.getvalue()
