"""Monte-Carlo checks of the mean-field predictions on sampled networks.

Order parameters are estimated literally from their definitions: averages
over units (and sites), over inputs, over input pairs ``x != x'`` for the
tilde quantities and over site pairs ``alpha != beta`` for the hat
quantities, then over independently sampled networks.  Pair sums use
``sum_{i != j} <a_i, a_j> = |sum a|^2 - sum |a_i|^2`` so every estimate is
linear in the batch size.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .arch import ArchSpec
from .eigenbound import spectral_report
from .meanfield import run_profile
from .nnkernel import (FROZEN, FULL, MIN_BN_BATCH, forward, output_jacobian_tapes, param_grads,
                       per_example_rows, sample_network, substream)

log = logging.getLogger(__name__)

Sampler = Callable[[int, np.random.Generator], np.ndarray]

FORWARD_QUANTITIES = ("Gamma", "Gamma_tilde", "Gamma_hat", "H", "H_tilde", "H_hat")
BACKWARD_QUANTITIES = ("Delta", "Delta_tilde", "Delta_hat")
REPORT_COLUMNS = ("quantity", "layer", "theory", "empirical", "std_error", "z")


class PowerIterationError(RuntimeError):
    def __init__(self, rayleigh: float, residual: float, iterations: int):
        self.rayleigh = rayleigh
        self.residual = residual
        self.iterations = iterations
        super().__init__(f"power iteration did not converge after {iterations} iterations "
                         f"(Rayleigh quotient {rayleigh:.10g}, residual {residual:.3g})")


@dataclass(frozen=True)
class McEstimate:
    mean: float
    std_error: float
    n_samples: int

    @classmethod
    def from_samples(cls, values) -> McEstimate:
        v = np.asarray(values, dtype=float)
        if v.size < 2:
            raise ValueError("need at least 2 samples for a standard error")
        return cls(float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size)), int(v.size))


@dataclass(frozen=True)
class EmpiricalSpectrum:
    lambda_max_empirical: float
    v_statistic: float
    per_layer_f: tuple[float, ...]
    iterations: int = 0


def gaussian_inputs(m: int, rng: np.random.Generator, dim: int) -> np.ndarray:
    return rng.standard_normal((m, dim))


def _sampler_for(spec: ArchSpec, data: Sampler | None) -> Sampler:
    if data is not None:
        return data
    return lambda m, rng: gaussian_inputs(m, rng, spec.input_units)


# ---------------------------------------------------------------------------
# order parameter estimators

def _flat_units(a: np.ndarray) -> np.ndarray:
    """View activations as (m, sites, channels); FC layers get a single site."""
    return a[:, None, :] if a.ndim == 2 else a


def _pair_moments(a: np.ndarray) -> tuple[float, float, float | None]:
    """Per-channel second moment, cross-example and cross-site-cross-example means.

    ``a`` has shape (m, sites, channels); all three are averaged over
    channels.  The third entry is None for single-site tensors.
    """
    m, K, _ = a.shape
    same = float((a ** 2).mean())
    col = a.sum(axis=0)                                   # (K, C)
    sq = (a ** 2).sum(axis=0)                             # (K, C)
    tilde = float(((col ** 2 - sq) / (m * (m - 1))).mean())
    if K < 2:
        return same, tilde, None
    per_x = a.sum(axis=1)                                 # (m, C)
    all_pairs = per_x.sum(axis=0) ** 2 - (per_x ** 2).sum(axis=0)     # x != x', any sites
    same_site = (col ** 2 - sq).sum(axis=0)                              # x != x', alpha == beta
    hat = float(((all_pairs - same_site) / (m * (m - 1) * K * (K - 1))).mean())
    return same, tilde, hat


def _delta_moments(d: np.ndarray) -> tuple[float, float, float | None]:
    """Backward moments: summed over channels/units, averaged over sites."""
    a = _flat_units(d)
    n_ch = a.shape[2] if d.ndim == 3 else d.shape[1]
    same, tilde, hat = _pair_moments(a)
    return same * n_ch, tilde * n_ch, None if hat is None else hat * n_ch


def _one_replicate(spec: ArchSpec, seed: int, replicate: int, m: int, sampler: Sampler,
                   components, stats_mode: str = FROZEN) -> dict[tuple[str, int], float]:
    net = sample_network(spec, int(substream(seed, 1, replicate).integers(2 ** 63)))
    x = sampler(m, substream(seed, 2, replicate))
    tape = forward(net, x)
    out: dict[tuple[str, int], float] = {}
    for l in range(spec.depth + 1):
        h_same, h_tilde, h_hat = _pair_moments(_flat_units(tape.h[l]))
        out[("H", l)] = h_same
        out[("H_tilde", l)] = h_tilde
        if h_hat is not None and (l == 0 and spec.layers[0].is_conv or l > 0 and spec.layers[l - 1].is_conv):
            out[("H_hat", l)] = h_hat
        if l == 0:
            continue
        g_same, g_tilde, g_hat = _pair_moments(_flat_units(tape.z[l]))
        out[("Gamma", l)] = g_same
        out[("Gamma_tilde", l)] = g_tilde
        if g_hat is not None:
            out[("Gamma_hat", l)] = g_hat
    acc: dict[tuple[str, int], list[float]] = {}
    for _, jt in output_jacobian_tapes(net, tape, components, stats_mode):
        for l in range(1, spec.depth + 1):
            d_same, d_tilde, d_hat = _delta_moments(jt.delta[l])
            acc.setdefault(("Delta", l), []).append(d_same)
            acc.setdefault(("Delta_tilde", l), []).append(d_tilde)
            if d_hat is not None:
                acc.setdefault(("Delta_hat", l), []).append(d_hat)
    out.update({k: float(np.mean(v)) for k, v in acc.items()})
    return out


def estimate_order_params(spec: ArchSpec, n_nets: int, m: int, data: Sampler | None = None,
                          seed: int = 0, jobs: int = 1, components=None,
                          stats_mode: str = FROZEN) -> dict[tuple[str, int], McEstimate]:
    """Monte-Carlo estimates keyed by ``(quantity, layer)``.

    ``data(m, rng)`` must return zero-mean, unit-variance inputs; the default
    draws i.i.d. standard normals.  Backward quantities are averaged over the
    output components in ``components`` (all of them by default) and use
    frozen BN statistics unless ``stats_mode="full"``.
    """
    if m < MIN_BN_BATCH:
        raise ValueError(f"batch size must be at least {MIN_BN_BATCH}")
    if n_nets < 2:
        raise ValueError("need at least 2 replicate networks")
    sampler = _sampler_for(spec, data)
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        reps = list(pool.map(lambda r: _one_replicate(spec, seed, r, m, sampler, components, stats_mode),
                             range(n_nets)))
    return {k: McEstimate.from_samples([r[k] for r in reps]) for k in reps[0]}


# ---------------------------------------------------------------------------
# spectrum

def power_iteration(A, tol: float = 1e-8, max_iter: int = 10_000, seed: int = 0,
                    restarts: int = 1) -> tuple[float, np.ndarray, int]:
    """Top eigenpair of a symmetric PSD matrix (array or matvec callable).

    Runs from a fixed seeded start plus ``restarts`` random restarts and
    keeps the largest Rayleigh quotient.  Converged when the Rayleigh
    quotient changes by less than ``tol`` (relative) and the residual
    ``|Av - lambda v|`` is below ``sqrt(tol) * lambda``.
    """
    matvec = A if callable(A) else (lambda v: A @ v)
    n = A.shape[0] if not callable(A) else None
    rng = substream(seed, 7)
    best = None
    total = 0
    for attempt in range(1 + restarts):
        if n is None:
            raise ValueError("callable operators need an explicit dimension; pass an array")
        v = rng.standard_normal(n)
        v /= np.linalg.norm(v)
        w = matvec(v)
        lam = float(v @ w)
        for it in range(1, max_iter + 1):
            norm = np.linalg.norm(w)
            if norm == 0.0:
                lam, res = 0.0, 0.0
                break
            v = w / norm
            w = matvec(v)
            new = float(v @ w)
            res = float(np.linalg.norm(w - new * v))
            done = abs(new - lam) <= tol * abs(new) and res <= math.sqrt(tol) * abs(new)
            lam = new
            if done:
                break
        else:
            raise PowerIterationError(lam, res, max_iter)
        total += it
        if best is None or lam > best[0]:
            best = (lam, v)
    return best[0], best[1], total


def _v_statistic_parts(net, tape, components=None) -> tuple[float, tuple[float, ...]]:
    """(1/m^2)|sum_i grad f_k(x_i)|^2 averaged over k, total and weight-only per layer."""
    m = tape.output.shape[0]
    totals, per_layer = [], []
    for _, jt in output_jacobian_tapes(net, tape, components):
        grads = param_grads(net, jt)
        totals.append(sum(float((a ** 2).sum()) for g in grads for a in g.values()) / m ** 2)
        per_layer.append([float((g["W"] ** 2).sum()) / m ** 2 for g in grads])
    return float(np.mean(totals)), tuple(np.mean(per_layer, axis=0))


def empirical_v_statistic(spec: ArchSpec, seed: int, m: int, data: Sampler | None = None,
                          components=None) -> tuple[float, tuple[float, ...]]:
    """Plug-in bound without forming the Gram matrix (cheap at large width)."""
    net = sample_network(spec, seed)
    x = _sampler_for(spec, data)(m, substream(seed, 3))
    return _v_statistic_parts(net, forward(net, x), components)


def gram_matrix(spec: ArchSpec, seed: int, m: int, data: Sampler | None = None,
                max_rows: int = 20_000) -> tuple[np.ndarray, object, object]:
    net = sample_network(spec, seed)
    x = _sampler_for(spec, data)(m, substream(seed, 3))
    rows_total = m * spec.n_outputs
    if rows_total > max_rows:
        raise ValueError(f"Gram matrix would have {rows_total} rows (limit {max_rows})")
    tape = forward(net, x, min_batch=1 if not spec.has_batch_norm else MIN_BN_BATCH)
    # rows ordered (example, component)
    blocks = [per_example_rows(net, jt) for _, jt in output_jacobian_tapes(net, tape)]
    B = np.stack(blocks, axis=1).reshape(rows_total, -1)
    return B @ B.T / m, net, tape


def empirical_fim_lambda_max(spec: ArchSpec, seed: int, m: int, data: Sampler | None = None,
                             tol: float = 1e-8, max_iter: int = 10_000) -> EmpiricalSpectrum:
    """Top eigenvalue of the empirical Fisher matrix via its (m N_L)^2 Gram matrix."""
    G, net, tape = gram_matrix(spec, seed, m, data)
    lam, _, iters = power_iteration(G, tol=tol, max_iter=max_iter, seed=seed)
    v, per_layer = _v_statistic_parts(net, tape)
    return EmpiricalSpectrum(lam, v, per_layer, iters)


# ---------------------------------------------------------------------------
# theory vs. experiment

@dataclass
class ValidateConfig:
    n_nets: int = 8
    m: int = 4096
    seed: int = 0
    z_threshold: float = 3.0
    order_margin: float = 0.10
    bound_margin: float = 0.20
    include_bound: bool = True
    jobs: int = 1
    hat_seed: str = "zero"
    bn_scale: str = "second_moment"
    site_norm: str = "per_site"
    data: Sampler | None = None
    # add report-only Delta rows measured with back-propagation through the BN statistics
    full_bn_rows: bool = False
    # fault-injection hook: multiplies every theory value
    theory_scale: float = 1.0


@dataclass
class DiscrepancyRow:
    quantity: str
    layer: int
    theory: float
    empirical: float
    std_error: float
    margin: float
    z_threshold: float
    asserted: bool = True

    @property
    def z(self) -> float:
        if self.std_error > 0:
            return (self.empirical - self.theory) / self.std_error
        return 0.0 if self.empirical == self.theory else math.copysign(math.inf, self.empirical - self.theory)

    @property
    def passed(self) -> bool:
        if not self.asserted:
            return True
        tol = self.z_threshold * self.std_error + self.margin * abs(self.theory)
        return abs(self.empirical - self.theory) <= tol


def _status(r: DiscrepancyRow) -> str:
    if not r.asserted:
        return "info"
    return "ok" if r.passed else "FAIL"


@dataclass
class DiscrepancyReport:
    rows: list[DiscrepancyRow] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)

    @property
    def exit_code(self) -> int:
        return 0 if self.passed else 1

    def failures(self) -> list[DiscrepancyRow]:
        return [r for r in self.rows if not r.passed]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in self.rows:
            w.writerow([r.quantity, r.layer, repr(r.theory), repr(r.empirical), repr(r.std_error),
                        repr(r.z)])
        return buf.getvalue()

    def summary(self) -> str:
        lines = [f"{'quantity':<18} {'layer':>5} {'theory':>12} {'empirical':>12} "
                 f"{'std_err':>10} {'z':>8}  status"]
        for r in self.rows:
            lines.append(f"{r.quantity:<18} {r.layer:>5} {r.theory:>12.6g} {r.empirical:>12.6g} "
                         f"{r.std_error:>10.3g} {r.z:>8.2f}  {_status(r)}")
        n_fail = len(self.failures())
        n_checked = sum(r.asserted for r in self.rows)
        lines.append(f"{n_checked - n_fail}/{n_checked} checks passed")
        return "\n".join(lines)


def v_statistic_samples(spec: ArchSpec, config: ValidateConfig) -> list[float]:
    """One V-statistic per replicate network, seeded from ``config.seed``."""
    return [empirical_v_statistic(spec, int(substream(config.seed, 4, r).integers(2 ** 63)), config.m,
                                  config.data)[0] for r in range(config.n_nets)]


def compare_theory_vs_empirical(spec: ArchSpec, config: ValidateConfig | None = None, *,
                                estimates: dict | None = None,
                                v_samples: list[float] | None = None) -> DiscrepancyReport:
    """Tabulate theory against Monte-Carlo estimates.

    ``estimates`` (from :func:`estimate_order_params`) and ``v_samples``
    (per-network V-statistics) may be passed in to compare one set of
    samples against several theory variants.
    """
    cfg = config or ValidateConfig()
    profile = run_profile(spec, hat_seed=cfg.hat_seed, bn_scale=cfg.bn_scale, site_norm=cfg.site_norm)
    est = estimates if estimates is not None else estimate_order_params(spec, cfg.n_nets, cfg.m, cfg.data,
                                                                         cfg.seed, cfg.jobs)
    report = DiscrepancyReport()
    for (qty, l), e in sorted(est.items(), key=lambda kv: (kv[0][1], kv[0][0])):
        theory = profile[l].as_row().get(qty)
        if theory is None:
            continue
        if l == 0 or (l == spec.depth and qty in BACKWARD_QUANTITIES):
            continue  # base cases, not predictions
        report.rows.append(DiscrepancyRow(qty, l, theory * cfg.theory_scale, e.mean, e.std_error,
                                          cfg.order_margin, cfg.z_threshold))
    if cfg.full_bn_rows and spec.has_batch_norm:
        # the theory ignores gradients through the batch statistics; show, do not judge
        full = estimate_order_params(spec, cfg.n_nets, cfg.m, cfg.data, cfg.seed, cfg.jobs, stats_mode=FULL)
        for (qty, l), e in sorted(full.items(), key=lambda kv: (kv[0][1], kv[0][0])):
            theory = profile[l].as_row().get(qty)
            if qty in BACKWARD_QUANTITIES and theory is not None and l < spec.depth:
                report.rows.append(DiscrepancyRow(f"{qty}[full]", l, theory * cfg.theory_scale, e.mean,
                                                  e.std_error, cfg.order_margin, cfg.z_threshold, False))
    if cfg.include_bound:
        lam = spectral_report(profile).lambda_bound
        vs = v_samples if v_samples is not None else v_statistic_samples(spec, cfg)
        e = McEstimate.from_samples(vs)
        report.rows.append(DiscrepancyRow("lambda_bound", 0, lam * cfg.theory_scale, e.mean,
                                          e.std_error, cfg.bound_margin, cfg.z_threshold))
    log.info("validated %d quantities, %d failing", len(report.rows), len(report.failures()))
    return report
