"""Closed-form latency model for pipelined multi-node decoding.

All times are milliseconds. ``k`` is the number of tokens committed in one
synchronization round and may be a fractional mean.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class ClusterConfig:
    n_nodes: int
    compute_per_step: float  # t0, ms
    link_latency: float  # t1, ms

    def __post_init__(self):
        if int(self.n_nodes) != self.n_nodes or self.n_nodes < 1:
            raise ValueError(f"n_nodes must be an integer >= 1, got {self.n_nodes}")
        if not self.compute_per_step > 0:
            raise ValueError(f"compute_per_step must be > 0, got {self.compute_per_step}")
        if not self.link_latency >= 0:
            raise ValueError(f"link_latency must be >= 0, got {self.link_latency}")

    @property
    def comm_per_sync(self) -> float:
        """Cost of one synchronization across the pipeline, (N-1)*t1."""
        return (self.n_nodes - 1) * self.link_latency


@dataclass(frozen=True)
class SpeedModelInput:
    rho: float
    k: float
    gamma: int

    def __post_init__(self):
        if not 0 < self.rho <= 1:
            raise ValueError(f"rho must be in (0, 1], got {self.rho}")
        if not self.k >= 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.gamma < 1:
            raise ValueError(f"gamma must be >= 1, got {self.gamma}")


def _check_k(k: float) -> None:
    if not k >= 1:
        raise ValueError(f"k must be >= 1, got {k}")


def t_std(k: float, c: ClusterConfig) -> float:
    """Time for ``k`` tokens when every token pays a full synchronization."""
    _check_k(k)
    return k * (c.compute_per_step + c.comm_per_sync)


def t_dsd(k: float, c: ClusterConfig) -> float:
    """Time for ``k`` tokens verified together in one synchronization."""
    _check_k(k)
    return k * c.compute_per_step + c.comm_per_sync


def r_comm(k: float, c: ClusterConfig) -> float:
    """Fraction of standard-decoding time removed by amortizing the sync."""
    _check_k(k)
    comm = c.comm_per_sync
    return comm * (k - 1) / (k * (c.compute_per_step + comm))


def speedup(m: SpeedModelInput, c: ClusterConfig) -> float:
    t0, comm = c.compute_per_step, c.comm_per_sync
    return (t0 + comm) / (t0 / m.rho + comm / m.k)


def in_regime(c: ClusterConfig) -> bool:
    """True for 3 <= N <= 8 and 3*t0 < t1 < 10*t0."""
    t0, t1 = c.compute_per_step, c.link_latency
    return 3 <= c.n_nodes <= 8 and 3 * t0 < t1 < 10 * t0
