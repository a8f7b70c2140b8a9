"""Synthetic draft/target models with exact next-token distributions.

Two model families are supported: a context-free categorical model and a
first-order Markov chain. Both expose the exact distribution they would
sample from, which is what makes exhaustive enumeration of the speculative
decoding process possible.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .errors import InvalidContextError, InvalidDistributionError

NORM_TOL = 1e-9

IID = "categorical-iid"
MARKOV = "markov-order-1"
MODEL_KINDS = (IID, MARKOV)


class UniformStream(Protocol):
    """Anything that yields uniform floats in [0, 1); numpy Generators qualify."""

    def random(self) -> float: ...


@dataclass(frozen=True, eq=False)
class Distribution:
    """Probability vector over a vocabulary of at least two tokens."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.array(self.probs, dtype=np.float64)
        if p.ndim != 1 or p.size < 2:
            raise InvalidDistributionError(f"need a 1-D vector of length >= 2, got shape {p.shape}")
        if not np.all(np.isfinite(p)) or np.any(p < 0):
            raise InvalidDistributionError("probabilities must be finite and non-negative")
        total = float(p.sum())
        if abs(total - 1.0) > NORM_TOL:
            raise InvalidDistributionError(f"probabilities sum to {total!r}, not 1")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @classmethod
    def from_weights(cls, weights) -> Distribution:
        w = np.asarray(weights, dtype=np.float64)
        return cls(w / w.sum())

    @property
    def vocab_size(self) -> int:
        return self.probs.size

    def __len__(self) -> int:
        return self.probs.size

    def __getitem__(self, token: int) -> float:
        return float(self.probs[token])

    def support(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.probs > 0)]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Distribution):
            return NotImplemented
        return bool(np.array_equal(self.probs, other.probs))

    def __hash__(self) -> int:
        return hash(self.probs.tobytes())

    def __repr__(self) -> str:
        return f"Distribution({np.array2string(self.probs, precision=4)})"


def temperature_scale(d: Distribution, temperature: float) -> Distribution:
    """Rescale ``d`` by temperature.

    T=1 returns ``d`` itself, T=0 returns the argmax one-hot (ties go to the
    lowest token id), anything else is proportional to ``d_i ** (1/T)``.
    """
    if temperature < 0:
        raise ValueError(f"temperature must be >= 0, got {temperature}")
    if temperature == 1.0:
        return d
    p = d.probs
    if temperature == 0.0:
        onehot = np.zeros_like(p)
        onehot[int(np.argmax(p))] = 1.0  # argmax returns the first maximum
        return Distribution(onehot)
    out = np.zeros_like(p)
    nz = p > 0
    # work relative to the max so tiny temperatures do not underflow everything
    logp = np.log(p[nz])
    out[nz] = np.exp((logp - logp.max()) / temperature)
    return Distribution(out / out.sum())


def sample(d: Distribution, rng: UniformStream) -> int:
    """Inverse-CDF draw over ascending token ids; consumes one uniform."""
    u = rng.random()
    cdf = np.cumsum(d.probs)
    idx = int(np.searchsorted(cdf, u, side="right"))
    if idx >= d.vocab_size:
        # u landed above a cdf that rounded to just under 1
        idx = int(np.flatnonzero(d.probs > 0)[-1])
    return idx


def _validate_rows(matrix: np.ndarray) -> None:
    for r, row in enumerate(matrix):
        try:
            Distribution(row)
        except InvalidDistributionError as exc:
            raise InvalidDistributionError(f"markov row {r}: {exc}") from None


@dataclass(frozen=True, eq=False)
class TokenModel:
    """A draft or target model over a fixed vocabulary.

    Use :meth:`iid` or :meth:`markov` rather than the raw constructor.
    Temperature is applied once at construction; ``next_distribution`` only
    indexes the pre-scaled table.
    """

    kind: str
    probs: np.ndarray | None = None
    matrix: np.ndarray | None = None
    initial: np.ndarray | None = None
    temperature: float = 1.0
    _rows: tuple = field(init=False, repr=False)
    _start: Distribution = field(init=False, repr=False)

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {MODEL_KINDS}")
        if not self.temperature >= 0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")
        if self.kind == IID:
            if self.probs is None:
                raise ValueError("categorical-iid model needs probs")
            base = temperature_scale(Distribution(self.probs), self.temperature)
            object.__setattr__(self, "_start", base)
            object.__setattr__(self, "_rows", ())
        else:
            if self.matrix is None or self.initial is None:
                raise ValueError("markov-order-1 model needs matrix and initial")
            m = np.asarray(self.matrix, dtype=np.float64)
            if m.ndim != 2 or m.shape[0] != m.shape[1]:
                raise InvalidDistributionError(f"markov matrix must be square, got shape {m.shape}")
            _validate_rows(m)
            init = Distribution(self.initial)
            if init.vocab_size != m.shape[0]:
                raise InvalidDistributionError("initial distribution size does not match matrix")
            rows = tuple(temperature_scale(Distribution(row), self.temperature) for row in m)
            object.__setattr__(self, "_rows", rows)
            object.__setattr__(self, "_start", temperature_scale(init, self.temperature))

    @classmethod
    def iid(cls, probs: Sequence[float], temperature: float = 1.0) -> TokenModel:
        return cls(IID, probs=np.asarray(probs, dtype=np.float64), temperature=temperature)

    @classmethod
    def markov(cls, matrix, initial, temperature: float = 1.0) -> TokenModel:
        return cls(
            MARKOV,
            matrix=np.asarray(matrix, dtype=np.float64),
            initial=np.asarray(initial, dtype=np.float64),
            temperature=temperature,
        )

    @property
    def vocab_size(self) -> int:
        return self._start.vocab_size

    def to_dict(self) -> dict:
        if self.kind == IID:
            return {"kind": IID, "probs": self.probs.tolist(), "temperature": self.temperature}
        return {
            "kind": MARKOV,
            "matrix": np.asarray(self.matrix).tolist(),
            "initial": np.asarray(self.initial).tolist(),
            "temperature": self.temperature,
        }


def check_context(ctx: Sequence[int], vocab_size: int) -> None:
    if ctx and (min(ctx) < 0 or max(ctx) >= vocab_size):
        bad = next(t for t in ctx if t < 0 or t >= vocab_size)
        raise InvalidContextError(f"token id {bad} outside vocabulary [0, {vocab_size})")


def next_distribution(model: TokenModel, ctx: Sequence[int]) -> Distribution:
    """Exact, temperature-scaled next-token distribution of ``model`` after ``ctx``."""
    check_context(ctx, model.vocab_size)
    if model.kind == IID or not ctx:
        return model._start
    return model._rows[ctx[-1]]
