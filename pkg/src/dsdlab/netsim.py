"""Discrete-event simulation of a linear N-shard inference pipeline.

Each synchronization round is a compute interval followed by ``N - 1``
sequential link traversals, one per pipeline hop. Standard decoding runs one
round per token; speculative decoding runs one round per verified window and
spends ``k * t0`` of compute on it, where ``k`` is the number of tokens the
window commits. Draft-model compute is assumed to be folded into ``t0``.
"""

from __future__ import annotations

import heapq
import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

from .errors import IncomparableReportsError
from .latency import ClusterConfig
from .verifier import VerificationResult

DETERMINISTIC = "deterministic"
UNIFORM_JITTER = "uniform-jitter"


@dataclass(frozen=True)
class LatencySampler:
    kind: str = DETERMINISTIC
    base: float = 0.0
    jitter_halfwidth: float = 0.0

    def __post_init__(self):
        if self.kind not in (DETERMINISTIC, UNIFORM_JITTER):
            raise ValueError(f"unknown sampler kind {self.kind!r}")
        if not self.base >= 0:
            raise ValueError(f"base latency must be >= 0, got {self.base}")
        if not self.jitter_halfwidth >= 0:
            raise ValueError(f"jitter_halfwidth must be >= 0, got {self.jitter_halfwidth}")
        if self.kind == DETERMINISTIC and self.jitter_halfwidth != 0:
            raise ValueError("deterministic sampler cannot have jitter")
        if self.jitter_halfwidth > self.base:
            raise ValueError("jitter_halfwidth larger than base would allow negative latency")

    @classmethod
    def for_cluster(cls, c: ClusterConfig, jitter_halfwidth: float = 0.0) -> LatencySampler:
        kind = UNIFORM_JITTER if jitter_halfwidth > 0 else DETERMINISTIC
        return cls(kind, c.link_latency, jitter_halfwidth)

    def draw(self, rng) -> float:
        if self.kind == DETERMINISTIC:
            return self.base
        return float(rng.uniform(self.base - self.jitter_halfwidth, self.base + self.jitter_halfwidth))


@dataclass(frozen=True)
class RoundTrace:
    round_index: int
    tokens_committed: int
    compute_time: float
    comm_time: float
    total_time: float
    sync_rounds: int = 1


@dataclass(frozen=True)
class SimReport:
    traces: tuple[RoundTrace, ...]
    total_time: float
    total_tokens: int
    total_sync_rounds: int


class EventLoop:
    """Minimal event queue ordered by (time, insertion sequence)."""

    def __init__(self):
        self.now = 0.0
        self._queue: list = []
        self._seq = itertools.count()

    def schedule(self, delay: float, handler: Callable, *args) -> None:
        heapq.heappush(self._queue, (self.now + delay, next(self._seq), handler, args))

    def run(self) -> None:
        while self._queue:
            t, _, handler, args = heapq.heappop(self._queue)
            self.now = t
            handler(*args)


def _simulate(c: ClusterConfig, tokens_per_round: Sequence[int], s: LatencySampler, rng) -> SimReport:
    loop = EventLoop()
    hops = c.n_nodes - 1
    traces: list[RoundTrace] = []
    state = {"start": 0.0, "compute": 0.0, "comm": 0.0}

    def start_round(r: int) -> None:
        if r == len(tokens_per_round):
            return
        state["start"] = loop.now
        state["comm"] = 0.0
        state["compute"] = tokens_per_round[r] * c.compute_per_step
        loop.schedule(state["compute"], compute_done, r)

    def compute_done(r: int) -> None:
        if hops == 0:
            finish_round(r)
        else:
            send(r, 1)

    def send(r: int, hop: int) -> None:
        lat = s.draw(rng)
        state["comm"] += lat
        loop.schedule(lat, hop_done, r, hop)

    def hop_done(r: int, hop: int) -> None:
        if hop < hops:
            send(r, hop + 1)
        else:
            finish_round(r)

    def finish_round(r: int) -> None:
        traces.append(
            RoundTrace(
                round_index=r,
                tokens_committed=tokens_per_round[r],
                compute_time=state["compute"],
                comm_time=state["comm"],
                total_time=loop.now - state["start"],
            )
        )
        start_round(r + 1)

    loop.schedule(0.0, start_round, 0)
    loop.run()
    return SimReport(
        traces=tuple(traces),
        total_time=loop.now,
        total_tokens=sum(tokens_per_round),
        total_sync_rounds=len(traces),
    )


def simulate_standard(c: ClusterConfig, n_tokens: int, s: LatencySampler, rng=None) -> SimReport:
    """One synchronization per generated token."""
    if n_tokens < 1:
        raise ValueError(f"n_tokens must be >= 1, got {n_tokens}")
    return _simulate(c, [1] * n_tokens, s, rng)


def simulate_dsd(
    c: ClusterConfig,
    rounds: Sequence[VerificationResult],
    s: LatencySampler,
    rng=None,
    total_tokens: int | None = None,
) -> SimReport:
    """One synchronization per verification round.

    A round commits its accepted tokens plus the extra token. ``total_tokens``
    trims the tail so the report covers exactly the tokens a truncated
    generation kept (rounds that contribute nothing are dropped).
    """
    if not rounds:
        raise ValueError("need at least one verification round")
    sizes = [r.accepted_count + 1 for r in rounds]
    if total_tokens is not None:
        trimmed, left = [], total_tokens
        for n in sizes:
            if left <= 0:
                break
            trimmed.append(min(n, left))
            left -= trimmed[-1]
        sizes = trimmed
    return _simulate(c, sizes, s, rng)


def simulate_windows(c: ClusterConfig, tokens_per_round: Sequence[int], s: LatencySampler, rng=None) -> SimReport:
    """Like :func:`simulate_dsd` but from raw per-round token counts."""
    if not tokens_per_round or min(tokens_per_round) < 1:
        raise ValueError("every round must commit at least one token")
    return _simulate(c, list(tokens_per_round), s, rng)


def measured_speedup(std: SimReport, dsd: SimReport) -> float:
    if std.total_tokens != dsd.total_tokens:
        raise IncomparableReportsError(
            f"reports cover different token counts ({std.total_tokens} vs {dsd.total_tokens})"
        )
    return std.total_time / dsd.total_time
