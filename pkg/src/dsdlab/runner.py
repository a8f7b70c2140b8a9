"""Seeded experiment execution behind the command-line subcommands."""

from __future__ import annotations

import logging
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields, replace
from typing import Sequence

import numpy as np

from .calibrate import CalibrationResult, calibrate_thresholds
from .config import ExperimentConfig
from .latency import SpeedModelInput, speedup
from .metrics import RunStats, SummaryRow, TraceRow, compute_stats, format_value, trace_rows
from .netsim import measured_speedup, simulate_dsd, simulate_standard
from .token_model import TokenModel
from .verifier import (
    _check_guard,
    enumerate_output_distribution,
    enumerate_target_distribution,
    generate,
    total_variation,
)

log = logging.getLogger(__name__)

LOSSLESS_TOL = 1e-9


@dataclass(frozen=True)
class SeedOutcome:
    run_id: str
    stats: RunStats
    summary: SummaryRow
    traces: tuple[TraceRow, ...]


def _streams(seed: int) -> tuple[np.random.Generator, np.random.Generator, np.random.Generator]:
    gen, dsd, std = np.random.SeedSequence(seed).spawn(3)
    return np.random.default_rng(gen), np.random.default_rng(dsd), np.random.default_rng(std)


def analytic_speedup(stats: RunStats, cfg: ExperimentConfig) -> float:
    """Closed-form speedup at the run's measured rho and tokens per sync round.

    Returns 0.0 when no draft token was ever accepted (rho = 0).
    """
    if stats.rho <= 0:
        return 0.0
    m = SpeedModelInput(rho=min(stats.rho, 1.0), k=stats.avg_accepted_len, gamma=cfg.gamma)
    return speedup(m, cfg.cluster)


def run_seed(cfg: ExperimentConfig, seed: int, run_id: str) -> SeedOutcome:
    rng_gen, rng_dsd, rng_std = _streams(seed)
    gen = generate(cfg.draft, cfg.target, cfg.prompt, cfg.max_new, cfg.gamma, cfg.tau, cfg.criteria, rng_gen)
    dsd = simulate_dsd(cfg.cluster, gen.rounds, cfg.sampler, rng_dsd, total_tokens=cfg.max_new)
    std = simulate_standard(cfg.cluster, cfg.max_new, cfg.sampler, rng_std)
    # stats describe the rounds that contributed tokens
    rounds = gen.rounds[: len(dsd.traces)]
    stats = compute_stats(rounds, cfg.gamma, dsd)
    summary = SummaryRow(
        run_id=run_id,
        rho=stats.rho,
        avg_accepted_len=stats.avg_accepted_len,
        total_tokens=stats.total_tokens,
        sync_rounds=dsd.total_sync_rounds,
        tokens_per_ms=stats.tokens_per_ms,
        key_token_fraction=stats.key_token_fraction,
        analytic_speedup=analytic_speedup(stats, cfg),
        measured_speedup=measured_speedup(std, dsd),
    )
    traces = trace_rows(run_id, dsd, rounds, cfg.gamma, cfg.tau, cfg.cluster)
    return SeedOutcome(run_id, stats, summary, tuple(traces))


def _run_job(job):
    return run_seed(*job)


def _map(jobs: list, workers: int) -> list[SeedOutcome]:
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_run_job, jobs))
    return [_run_job(j) for j in jobs]


def run_experiment(cfg: ExperimentConfig, workers: int = 1) -> list[SeedOutcome]:
    jobs = [(cfg, s, f"{cfg.run_id}/seed={s}") for s in cfg.seeds]
    return _map(jobs, workers)


@dataclass(frozen=True)
class SweepResult:
    parameter: str
    values: tuple
    outcomes: tuple[SeedOutcome, ...]
    aggregates: tuple[SummaryRow, ...]
    spreads: tuple[tuple, ...]

    def summary_rows(self) -> list[SummaryRow]:
        """Per-seed rows for each value followed by that value's mean row."""
        n = len(self.outcomes) // len(self.values)
        rows = []
        for i, agg in enumerate(self.aggregates):
            rows.extend(o.summary for o in self.outcomes[i * n : (i + 1) * n])
            rows.append(agg)
        return rows


SPREAD_COLUMNS = ("rho", "avg_accepted_len", "tokens_per_ms", "analytic_speedup", "measured_speedup")


def _aggregate(run_id: str, rows: Sequence[SummaryRow]) -> SummaryRow:
    vals = {}
    for f in fields(SummaryRow):
        if f.name == "run_id":
            continue
        col = [getattr(r, f.name) for r in rows]
        if any(v is None for v in col):
            vals[f.name] = None
            continue
        mean = statistics.fmean(col)
        vals[f.name] = int(mean) if f.type == "int" and mean == int(mean) else mean
    return SummaryRow(run_id=run_id, **vals)


def run_sweep(cfg: ExperimentConfig, workers: int = 1) -> SweepResult:
    if cfg.sweep is None:
        raise ValueError("config has no sweep section")
    param, values = cfg.sweep.parameter, cfg.sweep.values
    jobs = []
    for v in values:
        point = cfg.with_parameter(param, v)
        tag = f"{cfg.run_id}/{param}={format_value(v)}"
        jobs.extend((point, s, f"{tag}/seed={s}") for s in cfg.seeds)
    outcomes = _map(jobs, workers)
    n = len(cfg.seeds)
    aggregates, spreads = [], []
    for i, v in enumerate(values):
        group = [o.summary for o in outcomes[i * n : (i + 1) * n]]
        tag = f"{cfg.run_id}/{param}={format_value(v)}"
        aggregates.append(_aggregate(f"{tag}/mean", group))
        spread = [param, v, n]
        for col in SPREAD_COLUMNS:
            xs = [getattr(r, col) for r in group]
            spread.append(None if None in xs else statistics.pstdev(xs))
        spreads.append(tuple(spread))
    return SweepResult(param, values, tuple(outcomes), tuple(aggregates), tuple(spreads))


# --- lossless check ----------------------------------------------------------


@dataclass(frozen=True)
class LosslessInstance:
    name: str
    vocab_size: int
    gamma: int
    horizon: int
    tau: float
    tv: float


def random_model(rng: np.random.Generator, vocab_size: int) -> TokenModel:
    if rng.random() < 0.5:
        return TokenModel.iid(rng.dirichlet(np.ones(vocab_size)))
    return TokenModel.markov(rng.dirichlet(np.ones(vocab_size), size=vocab_size), rng.dirichlet(np.ones(vocab_size)))


def lossless_instances(cfg: ExperimentConfig) -> list[tuple[str, TokenModel, TokenModel, tuple]]:
    out = [("config", cfg.draft, cfg.target, cfg.prompt)]
    v = cfg.verify
    if v.random_instances:
        rng = np.random.default_rng(cfg.seeds[0])
        for i in range(v.random_instances):
            out.append((f"random-{i}", random_model(rng, v.random_vocab), random_model(rng, v.random_vocab), (0,)))
    return out


def check_lossless_guard(cfg: ExperimentConfig) -> None:
    v = cfg.verify
    gamma = v.gamma or cfg.gamma
    _check_guard(cfg.target.vocab_size, v.horizon, gamma)
    if v.random_instances:
        _check_guard(v.random_vocab, v.horizon, gamma)


def verify_lossless(cfg: ExperimentConfig) -> list[LosslessInstance]:
    """Total variation between the configured decoding and the target itself."""
    check_lossless_guard(cfg)
    v = cfg.verify
    gamma = v.gamma or cfg.gamma
    out = []
    for name, draft, target, prompt in lossless_instances(cfg):
        got = enumerate_output_distribution(draft, target, prompt, v.horizon, gamma, cfg.tau, cfg.criteria)
        want = enumerate_target_distribution(target, prompt, v.horizon)
        out.append(LosslessInstance(name, target.vocab_size, gamma, v.horizon, cfg.tau, total_variation(got, want)))
    return out


def run_calibration(cfg: ExperimentConfig, workers: int = 1) -> CalibrationResult:
    cal = cfg.calibration
    if cal is None:
        raise ValueError("config has no calibration section")
    tau = cfg.tau if cal.tau is None else cal.tau
    return calibrate_thresholds(cal.items, tau, cal.budget, cal.grid, cal.gamma, workers)


def with_seed(cfg: ExperimentConfig, seed: int | None) -> ExperimentConfig:
    return cfg if seed is None else replace(cfg, seeds=(seed,))
