"""Command-line entry point: ``bnfisher {predict,sweep,validate,phase,baseline}``.

Exit status: 0 success or pass, 1 statistical failure, 2 usage or config error.
Data files go to ``--out``; tables go to stdout; progress goes to stderr.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .arch import ArchSpec, ConfigError, load_arch, mnist_fc
from .eigenbound import DegenerateSpectrumError, gamma_sweep, spectral_report, sweep_to_csv
from .meanfield import BN_SCALES, HAT_SEEDS, SITE_NORMS, DegenerateLayerError, profile_to_csv, run_profile

log = logging.getLogger("bnfisher")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
SMALL_WIDTH = 64
DESK_WIDTH = 256


class UsageError(Exception):
    pass


@dataclass
class CommandConfig:
    command: str
    arch: ArchSpec
    arch_path: str | None
    out: Path
    seed: int = 0
    jobs: int = 1
    overrides: dict = field(default_factory=dict)


def _grid(text: str, what: str) -> list[float]:
    from .lab.sweep import parse_grid
    try:
        return parse_grid(text)
    except ValueError as exc:
        raise UsageError(f"--{what}: {exc}") from None


def _load(path: str | None, default: ArchSpec | None) -> ArchSpec:
    if path is None:
        if default is None:
            raise UsageError("--arch is required")
        return default
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"architecture file not found: {p}")
    try:
        return load_arch(p)
    except ConfigError as exc:
        raise UsageError(f"{p}: {exc}") from None


def _outdir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}") from None
    return out


def _profile_kw(args) -> dict:
    return {"hat_seed": args.hat_seed, "bn_scale": args.bn_scale, "site_norm": args.site_norm}


def _fmt(v) -> str:
    return "-" if v is None else f"{v:.6g}"


# ---------------------------------------------------------------------------

def cmd_predict(cfg: CommandConfig, args) -> int:
    spec = cfg.arch
    if args.gamma is not None:
        spec = spec.with_gamma(args.gamma)
    profile = run_profile(spec, **_profile_kw(args))
    rep = spectral_report(profile, args.momentum)
    show_gamma = spec.has_batch_norm
    cols = ["layer"] + (["gamma"] if show_gamma else []) + ["Gamma", "Gamma_tilde", "H", "H_tilde",
                                                             "Delta", "Delta_tilde", "f"]
    if any(lay.is_conv for lay in spec.layers):
        cols[cols.index("H_tilde") + 1:cols.index("H_tilde") + 1] = ["H_hat"]
        cols.insert(cols.index("f"), "Delta_hat")
    print("  ".join(f"{c:>11}" for c in cols))
    for l, p in enumerate(profile.per_layer):
        row = p.as_row()
        vals = {"layer": l, "f": rep.f_per_layer[l - 1] if l else None}
        if show_gamma:
            vals["gamma"] = spec.layers[l - 1].gamma if l and spec.layers[l - 1].batch_norm else None
        cells = []
        for c in cols:
            v = vals[c] if c in vals else row.get(c)
            cells.append(f"{v:>11}" if c == "layer" else f"{_fmt(v):>11}")
        print("  ".join(cells))
    print(f"lambda_bound = {rep.lambda_bound:.10g}")
    print(f"eta_star     = {rep.eta_star:.10g}   (momentum {rep.momentum:g})")
    print(f"eta_opt      = {rep.eta_opt:.10g}")
    (cfg.out / "profile.csv").write_text(profile_to_csv(profile))
    with open(cfg.out / "spectral.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["quantity", "value"])
        for l, v in enumerate(rep.f_per_layer, start=1):
            w.writerow([f"f_{l}", repr(v)])
        for k in ("lambda_bound", "eta_star", "eta_opt", "momentum"):
            w.writerow([k, repr(getattr(rep, k))])
    log.info("wrote %s and %s", cfg.out / "profile.csv", cfg.out / "spectral.csv")
    return EXIT_OK


def cmd_sweep(cfg: CommandConfig, args) -> int:
    grid = _grid(args.gamma_grid, "gamma-grid")
    if not all(lay.batch_norm for lay in cfg.arch.layers[:-1]):
        raise UsageError("sweep needs an architecture with BatchNorm on every hidden layer")
    rows = gamma_sweep(cfg.arch, grid, args.momentum, jobs=cfg.jobs, **_profile_kw(args))
    path = cfg.out / "sweep.csv"
    path.write_text(sweep_to_csv(rows))
    van = next(r for r in rows if r.variant == "vanilla")
    print(f"{'gamma':>8} {'lambda_bound':>14} {'eta_star':>12}")
    for r in rows:
        if r.variant == "bn":
            print(f"{r.gamma:>8.3g} {r.lambda_bound:>14.6g} {r.eta_star:>12.6g}")
    print(f"vanilla  {van.lambda_bound:>14.6g} {van.eta_star:>12.6g}")
    log.info("wrote %s", path)
    return EXIT_OK


def cmd_validate(cfg: CommandConfig, args) -> int:
    from .oracle import ValidateConfig, compare_theory_vs_empirical
    spec = cfg.arch if args.width is None else cfg.arch.with_width(args.width)
    hidden = [lay.width for lay in spec.layers[:-1]]
    if hidden and min(hidden) < SMALL_WIDTH:
        log.warning("hidden width %d is below %d: finite-width effects are large and the "
                    "systematic margins may fail", min(hidden), SMALL_WIDTH)
    vc = ValidateConfig(n_nets=args.nets, m=args.batch, seed=cfg.seed, jobs=cfg.jobs,
                        z_threshold=args.z, include_bound=not args.no_bound, full_bn_rows=args.full_bn,
                        theory_scale=args.theory_scale, **_profile_kw(args))
    log.info("sampling %d networks with %d inputs each", vc.n_nets, vc.m)
    report = compare_theory_vs_empirical(spec, vc)
    (cfg.out / "validate.csv").write_text(report.to_csv())
    print(report.summary())
    return report.exit_code


def _datasets(args, spec: ArchSpec):
    from .lab.data import load_mnist, synthetic_split
    if args.mnist_dir:
        d = Path(args.mnist_dir)
        if not d.is_dir():
            raise UsageError(f"MNIST directory not found: {d}")
        try:
            return load_mnist(d, args.subset, args.test_subset)
        except (OSError, ValueError) as exc:
            raise UsageError(f"{d}: {exc}") from None
    log.info("no --mnist-dir given: using synthetic Gaussian data")
    return synthetic_split(args.subset, args.test_subset, spec.input_units, spec.n_outputs, cfg_seed(args))


def cfg_seed(args) -> int:
    return int(args.seed) & (2 ** 63 - 1)


def _progress(done: int, total: int) -> None:
    if done == total or done % max(1, total // 20) == 0:
        log.info("%d/%d cells", done, total)


def _phase_like(cfg: CommandConfig, args, which: str) -> int:
    from .lab import emit_heatmap
    from .lab.sweep import baseline_sweep, phase_sweep
    etas = _grid(args.eta_grid, "eta-grid")
    seeds = [cfg.seed + k for k in range(args.n_seeds)]
    spec = cfg.arch if args.width is None else cfg.arch.with_width(args.width)
    train_set, test_set = _datasets(args, spec)
    if which == "phase":
        if not spec.has_batch_norm:
            raise UsageError("phase needs a BatchNorm architecture (use baseline for vanilla nets)")
        xs = _grid(args.gamma_grid, "gamma-grid")
        grid = phase_sweep(spec, xs, etas, seeds, train_set, test_set, epochs=args.epochs,
                           batch_size=args.batch_size, jobs=cfg.jobs, progress=_progress)
    else:
        xs = _grid(args.sigma_grid, "sigma-grid")
        grid = baseline_sweep(spec, xs, etas, seeds, train_set, test_set, epochs=args.epochs,
                              batch_size=args.batch_size, jobs=cfg.jobs, progress=_progress)
    csv_path, svg_path = emit_heatmap(grid, cfg.out / f"{which}.csv", cfg.out / f"{which}.svg")
    print(f"{grid.x_name:>10} {'eta*':>10} {'largest stable eta':>20}")
    for x, star, b in zip(grid.x_values, grid.eta_star, grid.largest_stable_log10_eta()):
        print(f"{x:>10.4g} {star:>10.4g} {'-' if b is None else f'{10 ** b:.4g}':>20}")
    log.info("wrote %s and %s", csv_path, svg_path)
    return EXIT_OK


def cmd_phase(cfg: CommandConfig, args) -> int:
    return _phase_like(cfg, args, "phase")


def cmd_baseline(cfg: CommandConfig, args) -> int:
    return _phase_like(cfg, args, "baseline")


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bnfisher", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--arch", metavar="PATH", help="architecture YAML document")
    common.add_argument("--out", metavar="DIR", default="out", help="output directory (default: out)")
    common.add_argument("--seed", type=int, default=0, metavar="U64")
    common.add_argument("--jobs", type=int, default=1, metavar="N", help="worker bound")
    common.add_argument("-q", "--quiet", action="store_true", help="no progress on stderr")

    theory = argparse.ArgumentParser(add_help=False)
    theory.add_argument("--momentum", type=float, default=None, help="override the config momentum")
    theory.add_argument("--hat-seed", choices=HAT_SEEDS, default="zero",
                        help="cross-site backward seed at a conv/FC boundary")
    theory.add_argument("--bn-scale", choices=BN_SCALES, default="second_moment",
                        help="what the BN backward rules divide by")
    theory.add_argument("--site-norm", choices=SITE_NORMS, default="per_site",
                        help="conv backward quantities as site averages or site sums")

    train = argparse.ArgumentParser(add_help=False)
    train.add_argument("--eta-grid", default="-3.5:-0.5:0.25", metavar="A:B:STEP",
                       help="log10 learning-rate grid")
    train.add_argument("--epochs", type=int, default=5, metavar="N")
    train.add_argument("--subset", type=int, default=2048, metavar="N", help="training examples")
    train.add_argument("--test-subset", type=int, default=512, metavar="N")
    train.add_argument("--mnist-dir", metavar="PATH", help="directory with MNIST IDX files "
                       "(synthetic Gaussian data if omitted)")
    train.add_argument("--n-seeds", type=int, default=3, metavar="N")
    train.add_argument("--batch-size", type=int, default=None, metavar="N",
                       help="minibatch size (full batch if omitted)")
    train.add_argument("--width", type=int, default=None, help="override hidden widths")

    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("predict", parents=[common, theory], help="order parameters and eta*")
    p.add_argument("--gamma", type=float, default=None, help="apply gamma to every BN layer")
    p = sub.add_parser("sweep", parents=[common, theory], help="eta*(gamma) curve")
    p.add_argument("--gamma-grid", default="0.1:4:0.1", metavar="A:B:STEP")
    p = sub.add_parser("validate", parents=[common, theory], help="Monte-Carlo check of the theory")
    p.add_argument("--nets", type=int, default=8, help="replicate networks")
    p.add_argument("--batch", type=int, default=4096, help="inputs per network (m)")
    p.add_argument("--width", type=int, default=None, help="override hidden widths")
    p.add_argument("--z", type=float, default=3.0, help="standard errors allowed")
    p.add_argument("--no-bound", action="store_true", help="skip the eigenvalue-bound check")
    p.add_argument("--full-bn", action="store_true",
                   help="also report (not check) Delta measured through the BN batch statistics")
    p.add_argument("--theory-scale", type=float, default=1.0, help=argparse.SUPPRESS)
    p = sub.add_parser("phase", parents=[common, train], help="(gamma, log10 eta) training grid")
    p.add_argument("--gamma-grid", default="0.5:4.5:0.5", metavar="A:B:STEP")
    p = sub.add_parser("baseline", parents=[common, train], help="(sigma_w^2, log10 eta) grid, no BN")
    p.add_argument("--sigma-grid", default="1:3:0.25", metavar="A:B:STEP", help="sigma_w^2 grid")
    return ap


COMMANDS = {"predict": cmd_predict, "sweep": cmd_sweep, "validate": cmd_validate,
            "phase": cmd_phase, "baseline": cmd_baseline}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(message)s" if args.quiet else "%(message)s", force=True)
    try:
        if args.jobs < 1:
            raise UsageError("--jobs must be at least 1")
        default = mnist_fc(1.0, True, width=DESK_WIDTH) if args.command in ("phase", "baseline") else None
        spec = _load(args.arch, default)
        cfg = CommandConfig(args.command, spec, args.arch, _outdir(args.out), cfg_seed(args), args.jobs)
        return COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        print(f"bnfisher {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DegenerateLayerError, DegenerateSpectrumError, ValueError) as exc:
        print(f"bnfisher {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
