"""Grid calibration of key-token thresholds against exact enumeration.

Each grid point is scored on a validation set by two exact quantities: the
expected tokens committed by a round started at the item's prompt, and the
total variation between the adaptive output distribution and the strict one.
The winner maximizes the first subject to a budget on the second.
"""

from __future__ import annotations

import itertools
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

from .errors import InfeasibleBudgetError
from .token_model import TokenModel
from .verifier import (
    KeyCriteria,
    enumerate_output_distribution,
    expected_round_length,
    total_variation,
    _check_guard,
)

DEFAULT_BUDGET = 0.05


@dataclass(frozen=True)
class ValidationItem:
    prompt: tuple[int, ...]
    draft: TokenModel
    target: TokenModel
    horizon: int


@dataclass(frozen=True)
class ThresholdGrid:
    lambda1: tuple[float, ...] = (1.2, 1.5, 2.0, 3.0)
    lambda2: tuple[float, ...] = (0.05, 0.1, 0.2, 0.4)
    lambda3: tuple[float, ...] = (0.1, 0.3, 0.5, 0.8)
    top_m: int = 10

    def __post_init__(self):
        if not (self.lambda1 and self.lambda2 and self.lambda3):
            raise ValueError("every threshold axis needs at least one value")

    def points(self) -> list[KeyCriteria]:
        return [
            KeyCriteria(l1, l2, l3, self.top_m)
            for l1, l2, l3 in itertools.product(self.lambda1, self.lambda2, self.lambda3)
        ]

    def strictest(self) -> KeyCriteria:
        """Point that flags the most tokens: lowest ratio and gap, highest overlap bar."""
        return KeyCriteria(min(self.lambda1), min(self.lambda2), max(self.lambda3), self.top_m)


@dataclass(frozen=True)
class GridPoint:
    criteria: KeyCriteria
    avg_accepted_length: float
    divergence: float


@dataclass(frozen=True)
class CalibrationResult:
    criteria: KeyCriteria
    avg_accepted_length: float
    divergence: float
    grid_log: tuple[GridPoint, ...] = field(repr=False)


def _strict_reference(items: Sequence[ValidationItem], gamma: int) -> list[dict]:
    strict = KeyCriteria.none_key()
    return [
        enumerate_output_distribution(it.draft, it.target, it.prompt, it.horizon, gamma, 0.0, strict)
        for it in items
    ]


def evaluate_point(
    items: Sequence[ValidationItem],
    references: Sequence[dict],
    criteria: KeyCriteria,
    gamma: int,
    tau: float,
) -> GridPoint:
    lengths, divs = [], []
    for it, ref in zip(items, references):
        lengths.append(expected_round_length(it.draft, it.target, it.prompt, gamma, tau, criteria))
        adaptive = enumerate_output_distribution(
            it.draft, it.target, it.prompt, it.horizon, gamma, tau, criteria
        )
        divs.append(total_variation(adaptive, ref))
    return GridPoint(criteria, sum(lengths) / len(lengths), sum(divs) / len(divs))


def _evaluate(args):
    return evaluate_point(*args)


def _lex(c: KeyCriteria) -> tuple[float, float, float]:
    return (c.lambda1, c.lambda2, c.lambda3)


def select(log: Sequence[GridPoint], budget: float) -> GridPoint | None:
    """Highest accepted length within budget; ties by divergence, then thresholds."""
    feasible = [g for g in log if g.divergence <= budget]
    if not feasible:
        return None
    return min(feasible, key=lambda g: (-g.avg_accepted_length, g.divergence, _lex(g.criteria)))


def calibrate_thresholds(
    items: Sequence[ValidationItem],
    tau: float,
    budget: float = DEFAULT_BUDGET,
    grid: ThresholdGrid | None = None,
    gamma: int = 3,
    workers: int = 1,
) -> CalibrationResult:
    if not 0 < budget < 1:
        raise ValueError(f"budget must be in (0, 1), got {budget}")
    if not items:
        raise ValueError("validation set is empty")
    grid = grid or ThresholdGrid()
    for it in items:
        _check_guard(it.target.vocab_size, it.horizon, gamma)
    refs = _strict_reference(items, gamma)
    jobs = [(items, refs, c, gamma, tau) for c in grid.points()]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            log = list(pool.map(_evaluate, jobs))
    else:
        log = [_evaluate(j) for j in jobs]
    best = select(log, budget)
    if best is None:
        strict = grid.strictest()
        strict_point = next(g for g in log if g.criteria == strict)
        raise InfeasibleBudgetError(
            f"no grid point has divergence <= {budget}; strictest point "
            f"{_lex(strict)} reaches {strict_point.divergence:.6g}",
            strict_point,
        )
    return CalibrationResult(best.criteria, best.avg_accepted_length, best.divergence, tuple(log))
