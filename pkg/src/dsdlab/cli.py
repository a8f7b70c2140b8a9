"""Command-line driver.

Exit codes: 0 success, 1 runtime failure, 2 configuration error, 3 the
lossless check found a nonzero divergence in relaxed mode (informative).
"""

from __future__ import annotations

import argparse
import itertools
import logging
import sys
from pathlib import Path

import numpy as np

from . import runner
from .config import ExperimentConfig, load_config
from .errors import ConfigError, DSDError, EnumerationTooLargeError, InfeasibleBudgetError
from .latency import ClusterConfig, SpeedModelInput, in_regime, r_comm, speedup, t_dsd, t_std
from .metrics import emit_csv, format_value, write_table

log = logging.getLogger("dsdlab")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_DIVERGENT = 0, 1, 2, 3

ANALYTIC_HEADER = ("n_nodes", "t0_ms", "t1_ms", "k", "rho", "gamma", "t_std", "t_dsd", "r_comm", "speedup", "in_regime")
VARIANCE_HEADER = ("parameter", "value", "n_seeds") + tuple(f"{c}_std" for c in runner.SPREAD_COLUMNS)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(args) -> ExperimentConfig:
    return runner.with_seed(load_config(args.config), args.seed)


def _print_summary(rows) -> None:
    for r in rows:
        print(
            f"{r.run_id}: rho={format_value(r.rho)} avg_len={format_value(r.avg_accepted_len)} "
            f"tokens={format_value(r.total_tokens)} syncs={format_value(r.sync_rounds)} "
            f"speedup measured={format_value(r.measured_speedup)} analytic={format_value(r.analytic_speedup)}"
        )


def cmd_run(args) -> int:
    cfg = _load(args)
    outcomes = runner.run_experiment(cfg, args.workers)
    out = _out_dir(args)
    emit_csv([t for o in outcomes for t in o.traces], out / "trace.csv", "trace")
    emit_csv([o.summary for o in outcomes], out / "summary.csv", "summary")
    _print_summary(o.summary for o in outcomes)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load(args)
    if cfg.sweep is None:
        raise ConfigError("sweep: section required for the sweep command", None, args.config or "<default>")
    res = runner.run_sweep(cfg, args.workers)
    out = _out_dir(args)
    emit_csv([t for o in res.outcomes for t in o.traces], out / "trace.csv", "trace")
    emit_csv(res.summary_rows(), out / "summary.csv", "summary")
    write_table(out / "sweep_variance.csv", VARIANCE_HEADER, res.spreads)
    _print_summary(res.aggregates)
    return EXIT_OK


def cmd_verify_lossless(args) -> int:
    cfg = _load(args)
    try:
        runner.check_lossless_guard(cfg)
    except EnumerationTooLargeError as exc:
        raise ConfigError(str(exc), None, args.config or "<default>") from exc
    results = runner.verify_lossless(cfg)
    out = _out_dir(args)
    write_table(
        out / "lossless.csv",
        ("instance", "vocab_size", "gamma", "horizon", "tau", "total_variation"),
        [(r.name, r.vocab_size, r.gamma, r.horizon, r.tau, r.tv) for r in results],
    )
    worst = max(r.tv for r in results)
    print(f"instances={len(results)} tau={format_value(cfg.tau)} max_total_variation={worst:.3e}")
    if worst <= runner.LOSSLESS_TOL:
        return EXIT_OK
    if cfg.tau > 0:
        print("relaxed verification diverges from the target distribution (expected for tau > 0)")
        return EXIT_DIVERGENT
    print("strict verification is not lossless", file=sys.stderr)
    return EXIT_RUNTIME


def cmd_calibrate(args) -> int:
    cfg = _load(args)
    if cfg.calibration is None:
        raise ConfigError("calibration: section required for the calibrate command", None, args.config or "<default>")
    try:
        res = runner.run_calibration(cfg, args.workers)
    except EnumerationTooLargeError as exc:
        raise ConfigError(f"calibration: {exc}", None, args.config or "<default>") from exc
    except InfeasibleBudgetError as exc:
        print(f"calibration infeasible: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    out = _out_dir(args)
    budget = cfg.calibration.budget
    write_table(
        out / "calibration_grid.csv",
        ("lambda1", "lambda2", "lambda3", "top_m", "avg_accepted_len", "divergence", "feasible"),
        [
            (g.criteria.lambda1, g.criteria.lambda2, g.criteria.lambda3, g.criteria.top_m,
             g.avg_accepted_length, g.divergence, g.divergence <= budget)
            for g in res.grid_log
        ],
    )
    c = res.criteria
    write_table(
        out / "calibration.csv",
        ("lambda1", "lambda2", "lambda3", "top_m", "avg_accepted_len", "divergence", "budget"),
        [(c.lambda1, c.lambda2, c.lambda3, c.top_m, res.avg_accepted_length, res.divergence, budget)],
    )
    print(
        f"lambda1={format_value(c.lambda1)} lambda2={format_value(c.lambda2)} lambda3={format_value(c.lambda3)} "
        f"avg_accepted_len={format_value(res.avg_accepted_length)} divergence={format_value(res.divergence)} "
        f"(budget {format_value(budget)}, {len(res.grid_log)} grid points)"
    )
    return EXIT_OK


def parse_values(text: str, *, integer: bool = False) -> list:
    """Comma-separated numbers; ``lo:hi:step`` expands to an inclusive range."""
    vals = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if ":" in part:
            bits = part.split(":")
            if len(bits) != 3:
                raise ValueError(f"range {part!r} must look like lo:hi:step")
            lo, hi, step = (float(b) for b in bits)
            if step <= 0 or hi < lo:
                raise ValueError(f"range {part!r} must have step > 0 and hi >= lo")
            n = int(np.floor((hi - lo) / step + 1e-9)) + 1
            vals.extend(round(lo + i * step, 12) for i in range(n))
        else:
            vals.append(float(part))
    if not vals:
        raise ValueError(f"no values in {text!r}")
    if integer:
        if any(v != int(v) for v in vals):
            raise ValueError(f"expected integers in {text!r}")
        return [int(v) for v in vals]
    return vals


def analytic_rows(n_nodes, t0s, t1s, ks, rhos, gamma) -> list[tuple]:
    rows = []
    for n, t0, t1, k in itertools.product(n_nodes, t0s, t1s, ks):
        c = ClusterConfig(n, t0, t1)
        for rho in rhos if rhos is not None else [k / (gamma + 1)]:
            rows.append(
                (n, t0, t1, k, rho, gamma, t_std(k, c), t_dsd(k, c), r_comm(k, c),
                 speedup(SpeedModelInput(rho, k, gamma), c), in_regime(c))
            )
    return rows


def cmd_analytic(args) -> int:
    try:
        n_nodes = parse_values(args.n_nodes, integer=True)
        t0s = parse_values(args.t0)
        t1s = parse_values(args.t1)
        ks = parse_values(args.k)
        rhos = parse_values(args.rho) if args.rho is not None else None
        if args.gamma < 1:
            raise ValueError("gamma must be >= 1")
        if any(k > args.gamma + 1 for k in ks) and rhos is None:
            raise ValueError("k cannot exceed gamma + 1 when rho is derived from k")
        rows = analytic_rows(n_nodes, t0s, t1s, ks, rhos, args.gamma)
    except ValueError as exc:
        raise ConfigError(str(exc), None, "analytic") from exc
    print("  ".join(f"{h:>9}" for h in ANALYTIC_HEADER))
    for row in rows:
        print("  ".join(f"{format_value(v):>9}" for v in row))
    if args.out is not None:
        write_table(_out_dir(args) / "analytic.csv", ANALYTIC_HEADER, rows)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dsdlab", description="Decentralized speculative decoding lab")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default="out"):
        sp.add_argument("--config", help="JSON experiment config (built-in defaults if omitted)")
        sp.add_argument("--out", default=out_default, help="output directory")
        sp.add_argument("--seed", type=int, help="replace the configured seeds with this one")
        sp.add_argument("--workers", type=int, default=1, help="parallel worker processes")

    for name, fn, help_ in (
        ("run", cmd_run, "generate, simulate and summarize each seed"),
        ("sweep", cmd_sweep, "run the config's sweep over seeds"),
        ("verify-lossless", cmd_verify_lossless, "compare exact output distribution with the target"),
        ("calibrate", cmd_calibrate, "grid-calibrate key-token thresholds"),
    ):
        sp = sub.add_parser(name, help=help_)
        common(sp)
        sp.set_defaults(func=fn)

    sp = sub.add_parser("analytic", help="closed-form latency table")
    common(sp, out_default=None)
    sp.add_argument("--n-nodes", default="4", help="values, e.g. 2,4,8 or 2:16:1")
    sp.add_argument("--t0", default="1", help="local compute per step, ms")
    sp.add_argument("--t1", default="5", help="link latency, ms")
    sp.add_argument("--k", default="4", help="tokens per synchronization round")
    sp.add_argument("--rho", default=None, help="acceptance ratio (default k/(gamma+1))")
    sp.add_argument("--gamma", type=int, default=8)
    sp.set_defaults(func=cmd_analytic)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "workers", 1) < 1:
        print("--workers must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DSDError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
