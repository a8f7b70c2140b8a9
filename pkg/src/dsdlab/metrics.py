"""Run statistics and the CSV layer every experiment writes through."""

from __future__ import annotations

import csv
import os
from dataclasses import astuple, dataclass, fields
from typing import Sequence

from .latency import ClusterConfig
from .netsim import SimReport
from .verifier import VerificationResult

TRACE_HEADER = (
    "run_id,round_index,gamma,tau,n_nodes,t0_ms,t1_ms,k_accepted,key_count,"
    "compute_ms,comm_ms,total_ms,sync_rounds"
)
SUMMARY_HEADER = (
    "run_id,rho,avg_accepted_len,total_tokens,sync_rounds,tokens_per_ms,"
    "key_token_fraction,analytic_speedup,measured_speedup"
)


@dataclass(frozen=True)
class RunStats:
    rho: float
    avg_accepted_len: float
    total_tokens: int
    sync_rounds: int
    tokens_per_ms: float | None
    key_token_fraction: float


def compute_stats(
    results: Sequence[VerificationResult], gamma: int, report: SimReport | None = None
) -> RunStats:
    """Aggregate per-round verification results.

    ``avg_accepted_len`` counts the extra token, so it is ``mean(k) + 1``.
    Throughput and the token total come from ``report`` when given, since a
    simulated run may have trimmed its final round.
    """
    if not results:
        raise ValueError("need at least one verification result")
    mean_k = sum(r.accepted_count for r in results) / len(results)
    n_decisions = sum(len(r.decisions) for r in results)
    n_key = sum(r.key_count for r in results)
    if report is not None:
        total_tokens = report.total_tokens
        tokens_per_ms = report.total_tokens / report.total_time
    else:
        total_tokens = sum(r.accepted_count + 1 for r in results)
        tokens_per_ms = None
    return RunStats(
        rho=mean_k / (gamma + 1),
        avg_accepted_len=mean_k + 1,
        total_tokens=total_tokens,
        sync_rounds=len(results),
        tokens_per_ms=tokens_per_ms,
        key_token_fraction=n_key / n_decisions,
    )


@dataclass(frozen=True)
class TraceRow:
    run_id: str
    round_index: int
    gamma: int
    tau: float
    n_nodes: int
    t0_ms: float
    t1_ms: float
    k_accepted: int
    key_count: int
    compute_ms: float
    comm_ms: float
    total_ms: float
    sync_rounds: int


@dataclass(frozen=True)
class SummaryRow:
    run_id: str
    rho: float
    avg_accepted_len: float
    total_tokens: int
    sync_rounds: int
    tokens_per_ms: float | None
    key_token_fraction: float
    analytic_speedup: float
    measured_speedup: float


assert ",".join(f.name for f in fields(TraceRow)) == TRACE_HEADER
assert ",".join(f.name for f in fields(SummaryRow)) == SUMMARY_HEADER


def trace_rows(
    run_id: str,
    report: SimReport,
    results: Sequence[VerificationResult],
    gamma: int,
    tau: float,
    cluster: ClusterConfig,
) -> list[TraceRow]:
    return [
        TraceRow(
            run_id=run_id,
            round_index=tr.round_index,
            gamma=gamma,
            tau=tau,
            n_nodes=cluster.n_nodes,
            t0_ms=cluster.compute_per_step,
            t1_ms=cluster.link_latency,
            k_accepted=res.accepted_count,
            key_count=res.key_count,
            compute_ms=tr.compute_time,
            comm_ms=tr.comm_time,
            total_ms=tr.total_time,
            sync_rounds=tr.sync_rounds,
        )
        for tr, res in zip(report.traces, results)
    ]


def format_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return format(v, ".6g")
    return str(v)


def emit_csv(rows: Sequence, destination, schema: str | None = None) -> None:
    """Write ``rows`` (TraceRow or SummaryRow) under the matching exact header.

    Trace rows are ordered by round index, then run id. Summary rows keep the
    caller's order. ``schema`` ("trace" or "summary") is only needed for an
    empty row list.
    """
    if schema is None:
        if not rows:
            raise ValueError("schema is required when there are no rows")
        schema = "trace" if isinstance(rows[0], TraceRow) else "summary"
    header = {"trace": TRACE_HEADER, "summary": SUMMARY_HEADER}[schema]
    if schema == "trace":
        rows = sorted(rows, key=lambda r: (r.round_index, r.run_id))
    write_table(destination, header.split(","), [astuple(r) for r in rows])


def write_table(destination, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    try:
        with open(destination, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([format_value(v) for v in row])
    except OSError as exc:
        raise OSError(f"cannot write {os.fspath(destination)}: {exc.strerror or exc}") from exc
