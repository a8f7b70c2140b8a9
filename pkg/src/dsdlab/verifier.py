"""Draft/verify rounds with adaptive, key-token-aware acceptance.

A round drafts ``gamma`` tokens from the draft model, then walks them in
order. Each position is classified as key or non-key; key positions are
checked against the target distribution, non-key positions against a
geometric blend of target and draft controlled by ``tau``. Acceptance is the
usual speculative sampling rule ``min(1, p_eff / p_d)`` and the first
rejection ends the round with a draw from the positive residual. A fully
accepted window earns one bonus token from the target.

Random stream consumption per round, in order: ``gamma`` draft draws, one
uniform per evaluated position, one draw for the extra token. Positions past
the first rejection are drafted but never evaluated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .errors import (
    DegenerateMixtureError,
    DraftingContractError,
    EmptyResidualError,
    EnumerationTooLargeError,
)
from .token_model import Distribution, TokenModel, UniformStream, next_distribution, sample

BONUS = "bonus-from-target"
RESAMPLE = "residual-resample"

CE_GUARD = 1e-12
DEFAULT_TAU = 0.2
DEFAULT_TOP_M = 10

MAX_ENUM_VOCAB = 8
MAX_ENUM_HORIZON = 4
MAX_ENUM_GAMMA = 4


@dataclass(frozen=True)
class KeyCriteria:
    """Thresholds deciding which drafted tokens are verified strictly.

    ``lambda1`` may be ``math.inf`` to switch the entropy-ratio clause off.
    """

    lambda1: float = 2.0
    lambda2: float = 0.2
    lambda3: float = 0.3
    top_m: int = DEFAULT_TOP_M

    def __post_init__(self):
        if not self.lambda1 > 0:
            raise ValueError(f"lambda1 must be > 0, got {self.lambda1}")
        if not 0 <= self.lambda2 <= 1:
            raise ValueError(f"lambda2 must be in [0, 1], got {self.lambda2}")
        if not 0 <= self.lambda3 <= 1:
            raise ValueError(f"lambda3 must be in [0, 1], got {self.lambda3}")
        if int(self.top_m) != self.top_m or self.top_m < 1:
            raise ValueError(f"top_m must be a positive integer, got {self.top_m}")

    @classmethod
    def none_key(cls) -> KeyCriteria:
        """Criteria under which no token is ever key."""
        return cls(lambda1=math.inf, lambda2=1.0, lambda3=0.0)


@dataclass(frozen=True)
class DraftWindow:
    tokens: tuple[int, ...]
    draft_dists: tuple[Distribution, ...]

    def __post_init__(self):
        if len(self.tokens) < 1 or len(self.tokens) != len(self.draft_dists):
            raise ValueError("draft window needs gamma >= 1 tokens, one distribution each")
        for y, d in zip(self.tokens, self.draft_dists):
            if d[y] <= 0:
                raise DraftingContractError(f"drafted token {y} has zero draft probability")

    @property
    def gamma(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class TokenDecision:
    token: int
    is_key: bool
    tau_used: float
    accept_prob: float
    accepted: bool
    replacement: int | None = None


@dataclass(frozen=True)
class VerificationResult:
    decisions: tuple[TokenDecision, ...]
    accepted_count: int
    extra_token: int
    extra_source: str

    @property
    def accepted_tokens(self) -> tuple[int, ...]:
        return tuple(d.token for d in self.decisions[: self.accepted_count])

    @property
    def committed(self) -> tuple[int, ...]:
        """Tokens this round appends to the sequence: accepted drafts plus the extra token."""
        return self.accepted_tokens + (self.extra_token,)

    @property
    def key_count(self) -> int:
        return sum(d.is_key for d in self.decisions)


@dataclass(frozen=True)
class GenerationResult:
    tokens: tuple[int, ...]
    rounds: tuple[VerificationResult, ...]


def draft_window(draft: TokenModel, ctx: Sequence[int], gamma: int, rng: UniformStream) -> DraftWindow:
    if gamma < 1:
        raise ValueError(f"gamma must be >= 1, got {gamma}")
    prefix = list(ctx)
    tokens, dists = [], []
    for _ in range(gamma):
        d = next_distribution(draft, prefix)
        y = sample(d, rng)
        tokens.append(y)
        dists.append(d)
        prefix.append(y)
    return DraftWindow(tuple(tokens), tuple(dists))


def token_cross_entropy(d: Distribution, y: int) -> float:
    """Surprisal ``-ln d[y]``; ``math.inf`` when the token is unsupported."""
    p = d[y]
    if p <= 0.0:
        return math.inf
    return -math.log(p)


def top_m_ids(d: Distribution, m: int) -> np.ndarray:
    # stable sort on -p keeps lower ids first among ties
    return np.argsort(-d.probs, kind="stable")[:m]


def norm_match(p_t: Distribution, p_d: Distribution, top_m: int) -> float:
    """Fraction of shared ids among the two distributions' top-m tokens.

    ``top_m`` is clamped to the vocabulary size.
    """
    m = min(int(top_m), p_t.vocab_size)
    shared = np.intersect1d(top_m_ids(p_t, m), top_m_ids(p_d, m), assume_unique=True)
    return shared.size / m


def entropy_ratio(p_t: Distribution, p_d: Distribution, y: int) -> float:
    """Draft-over-target surprisal ratio at ``y``, with a guard for certain targets.

    When the target surprisal is below ``CE_GUARD`` the ratio is 1.0 if the
    draft is also (numerically) certain and ``inf`` otherwise.
    """
    h_t = token_cross_entropy(p_t, y)
    h_d = token_cross_entropy(p_d, y)
    if h_t < CE_GUARD:
        return 1.0 if h_d < CE_GUARD else math.inf
    return h_d / h_t


def is_key(p_t: Distribution, p_d: Distribution, y: int, criteria: KeyCriteria) -> bool:
    if entropy_ratio(p_t, p_d, y) > criteria.lambda1:
        return True
    if abs(p_t[y] - p_d[y]) > criteria.lambda2:
        return True
    return norm_match(p_t, p_d, criteria.top_m) < criteria.lambda3


def soften(p_t: Distribution, p_d: Distribution, tau: float) -> Distribution:
    """Renormalized ``p_t ** (1 - tau) * p_d ** tau``.

    The endpoints return the inputs unchanged so strict verification is
    bit-identical to plain speculative sampling.
    """
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must be in [0, 1], got {tau}")
    if tau == 0.0:
        return p_t
    if tau == 1.0 or p_t == p_d:
        return p_d
    w = np.power(p_t.probs, 1.0 - tau) * np.power(p_d.probs, tau)
    z = w.sum()
    if z <= 0.0:
        raise DegenerateMixtureError("target and draft supports are disjoint; softened mass is zero")
    return Distribution(w / z)


def accept_prob(p_eff: Distribution, p_d: Distribution, y: int) -> float:
    q = p_d[y]
    if q <= 0.0:
        raise DraftingContractError(f"token {y} was verified but has zero draft probability")
    return min(1.0, p_eff[y] / q)


def residual_distribution(p_eff: Distribution, p_d: Distribution) -> Distribution:
    r = np.maximum(p_eff.probs - p_d.probs, 0.0)
    z = r.sum()
    if z <= 0.0:
        raise EmptyResidualError("effective and draft distributions coincide; nothing to resample")
    return Distribution(r / z)


def _verdict(p_t, p_d, y, tau, criteria):
    """Key flag, tau used, acceptance probability and rejection residual at one position.

    A rejection branch whose residual is numerically empty (p_eff equals p_d
    up to rounding) cannot occur, so acceptance is snapped to 1.
    """
    key = is_key(p_t, p_d, y, criteria)
    tau_used = 0.0 if key else tau
    p_eff = soften(p_t, p_d, tau_used)
    a = accept_prob(p_eff, p_d, y)
    residual = None
    if a < 1.0:
        try:
            residual = residual_distribution(p_eff, p_d)
        except EmptyResidualError:
            a = 1.0
    return key, tau_used, a, residual


def verify_round(
    draft: TokenModel,
    target: TokenModel,
    ctx: Sequence[int],
    gamma: int,
    tau: float,
    criteria: KeyCriteria,
    rng: UniformStream,
) -> VerificationResult:
    """Run one draft/verify round and return its decisions and extra token."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must be in [0, 1], got {tau}")
    window = draft_window(draft, ctx, gamma, rng)
    prefix = list(ctx)
    decisions = []
    for y, p_d in zip(window.tokens, window.draft_dists):
        p_t = next_distribution(target, prefix)
        key, tau_used, a, residual = _verdict(p_t, p_d, y, tau, criteria)
        if rng.random() < a:
            decisions.append(TokenDecision(y, key, tau_used, a, True))
            prefix.append(y)
            continue
        z = sample(residual, rng)
        decisions.append(TokenDecision(y, key, tau_used, a, False, replacement=z))
        return VerificationResult(tuple(decisions), len(decisions) - 1, z, RESAMPLE)
    bonus = sample(next_distribution(target, prefix), rng)
    return VerificationResult(tuple(decisions), gamma, bonus, BONUS)


def generate(
    draft: TokenModel,
    target: TokenModel,
    prompt: Sequence[int],
    max_new: int,
    gamma: int,
    tau: float,
    criteria: KeyCriteria,
    rng: UniformStream,
) -> GenerationResult:
    """Repeat rounds until ``max_new`` tokens are committed (last round truncated)."""
    if max_new < 1:
        raise ValueError(f"max_new must be >= 1, got {max_new}")
    ctx = list(prompt)
    out: list[int] = []
    rounds = []
    while len(out) < max_new:
        res = verify_round(draft, target, ctx, gamma, tau, criteria, rng)
        rounds.append(res)
        out.extend(res.committed)
        ctx.extend(res.committed)
    return GenerationResult(tuple(out[:max_new]), tuple(rounds))


# --- exact enumeration -------------------------------------------------------


def _check_guard(vocab_size: int, horizon: int | None, gamma: int) -> None:
    if vocab_size > MAX_ENUM_VOCAB or gamma > MAX_ENUM_GAMMA or (
        horizon is not None and horizon > MAX_ENUM_HORIZON
    ):
        raise EnumerationTooLargeError(
            f"enumeration limited to V<={MAX_ENUM_VOCAB}, horizon<={MAX_ENUM_HORIZON}, "
            f"gamma<={MAX_ENUM_GAMMA}; got V={vocab_size}, horizon={horizon}, gamma={gamma}"
        )


def _round_branches(
    draft: TokenModel,
    target: TokenModel,
    ctx: tuple[int, ...],
    gamma: int,
    tau: float,
    criteria: KeyCriteria,
    need: int | None,
) -> Iterator[tuple[float, tuple[int, ...], int | None]]:
    """Yield ``(probability, committed tokens, k)`` for every branch of one round.

    Drafting and verification are interleaved: a position's verdict only
    depends on the tokens before it, and draft samples past a rejection
    marginalize out. With ``need`` set, a branch stops as soon as it has
    committed that many tokens (``k`` is then None).
    """

    def expand(acc: tuple[int, ...], prob: float, j: int):
        if need is not None and len(acc) >= need:
            yield prob, acc, None
            return
        prefix = ctx + acc
        p_t = next_distribution(target, prefix)
        if j == gamma:
            for z in p_t.support():
                yield prob * p_t[z], acc + (z,), j
            return
        p_d = next_distribution(draft, prefix)
        for y in p_d.support():
            _, _, a, r = _verdict(p_t, p_d, y, tau, criteria)
            branch = prob * p_d[y]
            if a > 0.0:
                yield from expand(acc + (y,), branch * a, j + 1)
            if r is not None:
                for z in r.support():
                    yield branch * (1.0 - a) * r[z], acc + (z,), j

    yield from expand((), 1.0, 0)


def enumerate_output_distribution(
    draft: TokenModel,
    target: TokenModel,
    prompt: Sequence[int],
    horizon: int,
    gamma: int,
    tau: float,
    criteria: KeyCriteria,
) -> dict[tuple[int, ...], float]:
    """Exact distribution of the first ``horizon`` tokens produced by :func:`generate`."""
    _check_guard(target.vocab_size, horizon, gamma)
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    prompt = tuple(prompt)
    done: dict[tuple[int, ...], float] = {}
    frontier = {(): 1.0}
    while frontier:
        nxt: dict[tuple[int, ...], float] = {}
        for seq, p in frontier.items():
            need = horizon - len(seq)
            for q, toks, _ in _round_branches(draft, target, prompt + seq, gamma, tau, criteria, need):
                full = seq + toks[:need]
                bucket = done if len(full) == horizon else nxt
                bucket[full] = bucket.get(full, 0.0) + p * q
        frontier = nxt
    return done


def enumerate_target_distribution(
    target: TokenModel, prompt: Sequence[int], horizon: int
) -> dict[tuple[int, ...], float]:
    """Plain autoregressive distribution of the target over ``horizon`` tokens."""
    _check_guard(target.vocab_size, horizon, 1)
    out = {(): 1.0}
    for _ in range(horizon):
        nxt = {}
        for seq, p in out.items():
            d = next_distribution(target, tuple(prompt) + seq)
            for z in d.support():
                nxt[seq + (z,)] = p * d[z]
        out = nxt
    return out


def expected_round_length(
    draft: TokenModel,
    target: TokenModel,
    ctx: Sequence[int],
    gamma: int,
    tau: float,
    criteria: KeyCriteria,
) -> float:
    """Exact E[k + 1] for a single round started at ``ctx``."""
    _check_guard(target.vocab_size, None, gamma)
    return sum(
        q * (k + 1)
        for q, _, k in _round_branches(draft, target, tuple(ctx), gamma, tau, criteria, None)
    )


def total_variation(p: dict, q: dict) -> float:
    keys = set(p) | set(q)
    return 0.5 * sum(abs(p.get(s, 0.0) - q.get(s, 0.0)) for s in keys)
