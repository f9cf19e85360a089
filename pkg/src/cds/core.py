"""Vocabulary, token distributions, and the strategy-independent probability algebra.

Everything here is an immutable value or a pure function; decoding strategies are
built on top of these primitives. Probabilities live in linear space as 64-bit
floats (vocabularies are small enough that underflow is not a concern), entropies
are in nats, and all randomness flows through an explicit ``numpy.random.Generator``
passed by the caller.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "TokenId",
    "Vocabulary",
    "TokenDistribution",
    "MixtureWeights",
    "DecisionLabel",
    "PrefixTriple",
    "TraceStep",
    "TraceCounters",
    "GenerationTrace",
    "softmax_with_temperature",
    "entropy",
    "mix",
    "sample",
    "argmax",
]

# Tokens are plain integer indices into a Vocabulary.
TokenId = int

#: Sum-to-one tolerance shared by TokenDistribution and MixtureWeights.
PROBABILITY_TOLERANCE = 1e-9


def _as_probability_vector(values: Iterable[float], what: str) -> np.ndarray:
    vec = np.asarray(list(values) if not isinstance(values, np.ndarray) else values,
                     dtype=np.float64)
    if vec.ndim != 1 or vec.size == 0:
        raise ValueError(f"{what} must be a non-empty 1-d vector")
    if not np.all(np.isfinite(vec)):
        raise ValueError(f"{what} contains non-finite entries")
    if np.any(vec < 0.0):
        raise ValueError(f"{what} contains negative entries")
    total = float(vec.sum())
    if abs(total - 1.0) > PROBABILITY_TOLERANCE:
        raise ValueError(f"{what} sums to {total!r}, expected 1 within {PROBABILITY_TOLERANCE}")
    vec.flags.writeable = False
    return vec


@dataclass(frozen=True)
class Vocabulary:
    """An ordered set of unique token strings plus the designated STOP token ids.

    The stop set must be non-empty: every vocabulary carries at least an
    end-of-sequence token so generation can terminate.
    """

    tokens: tuple[str, ...]
    stop_ids: frozenset[TokenId]

    def __post_init__(self) -> None:
        if not self.tokens:
            raise ValueError("vocabulary must contain at least one token")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")
        if not self.stop_ids:
            raise ValueError("vocabulary must designate at least one STOP token")
        for sid in self.stop_ids:
            if not (0 <= sid < len(self.tokens)):
                raise ValueError(f"stop id {sid} is not a valid token id")

    @classmethod
    def from_tokens(cls, tokens: Iterable[str], stop_tokens: Iterable[str] = ("</s>",)) -> "Vocabulary":
        """Build a vocabulary from token strings, appending missing stop tokens."""
        toks = list(dict.fromkeys(tokens))
        stops = list(dict.fromkeys(stop_tokens))
        for s in stops:
            if s not in toks:
                toks.append(s)
        index = {t: i for i, t in enumerate(toks)}
        return cls(tokens=tuple(toks), stop_ids=frozenset(index[s] for s in stops))

    @cached_property
    def _index(self) -> dict[str, int]:
        return {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def id_of(self, token: str) -> TokenId:
        try:
            return self._index[token]
        except KeyError:
            raise ValueError(f"token {token!r} is not in the vocabulary") from None

    def token_of(self, token_id: TokenId) -> str:
        if not (0 <= token_id < len(self.tokens)):
            raise ValueError(f"token id {token_id} is out of range for vocabulary of size {len(self)}")
        return self.tokens[token_id]

    def tokens_of(self, token_ids: Sequence[TokenId]) -> list[str]:
        return [self.token_of(t) for t in token_ids]

    def validate_ids(self, token_ids: Sequence[TokenId]) -> None:
        for t in token_ids:
            if not (0 <= t < len(self.tokens)):
                raise ValueError(f"token id {t} is out of range for vocabulary of size {len(self)}")


@dataclass(frozen=True)
class TokenDistribution:
    """A probability vector over a vocabulary: non-negative, sums to one within 1e-9."""

    probs: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "probs", _as_probability_vector(self.probs, "distribution"))

    def __len__(self) -> int:
        return int(self.probs.size)

    @classmethod
    def one_hot(cls, token_id: TokenId, size: int) -> "TokenDistribution":
        if not (0 <= token_id < size):
            raise ValueError(f"one-hot index {token_id} out of range for size {size}")
        vec = np.zeros(size, dtype=np.float64)
        vec[token_id] = 1.0
        return cls(vec)

    @classmethod
    def uniform(cls, size: int) -> "TokenDistribution":
        if size < 1:
            raise ValueError("uniform distribution needs a positive size")
        return cls(np.full(size, 1.0 / size, dtype=np.float64))

    @classmethod
    def from_weights(cls, weights: Iterable[float]) -> "TokenDistribution":
        """Normalize arbitrary non-negative weights into a distribution."""
        vec = np.asarray(list(weights), dtype=np.float64)
        total = vec.sum()
        if total <= 0 or not np.isfinite(total):
            raise ValueError("weights must have a positive finite sum")
        return cls(vec / total)


@dataclass(frozen=True)
class MixtureWeights:
    """Normalized per-model weights for a distribution mixture."""

    weights: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "weights", _as_probability_vector(self.weights, "mixture weights"))

    def __len__(self) -> int:
        return int(self.weights.size)


class DecisionLabel(enum.Enum):
    """Binary router decision: Yes means the token is critical."""

    YES = "Yes"
    NO = "No"

    @classmethod
    def from_string(cls, value: str) -> "DecisionLabel":
        for label in cls:
            if label.value == value:
                return label
        raise ValueError(f"unknown decision label {value!r}")


@dataclass(frozen=True)
class PrefixTriple:
    """The three synchronized contexts: pretrained, aligned, and classifier.

    After every accepted token the token is the final element of all three
    sequences; :meth:`push` returns the extended triple.
    """

    pretrained: tuple[TokenId, ...] = ()
    aligned: tuple[TokenId, ...] = ()
    classifier: tuple[TokenId, ...] = ()

    def push(
        self,
        token: TokenId,
        *,
        pretrained_token: TokenId | None = None,
        classifier_token: TokenId | None = None,
    ) -> "PrefixTriple":
        """Append an accepted token to all three contexts.

        In cross-vocabulary mode the pretrained context may receive a different
        id for the same token string; shared-vocabulary callers pass one id.
        """
        p = token if pretrained_token is None else pretrained_token
        c = token if classifier_token is None else classifier_token
        return PrefixTriple(
            pretrained=self.pretrained + (p,),
            aligned=self.aligned + (token,),
            classifier=self.classifier + (c,),
        )


@dataclass(frozen=True)
class TraceStep:
    """One generation step: what the router decided and which model supplied the token."""

    position: int
    decision: DecisionLabel
    source: str  # "aligned" | "pretrained"
    aligned_entropy: float
    accepted_token: TokenId
    # Whether each model ran a forward pass at this step; cost accounting reads these.
    aligned_forward: bool = True
    pretrained_forward: bool = False


@dataclass(frozen=True)
class TraceCounters:
    aligned_tokens: int = 0
    pretrained_tokens: int = 0
    classifier_calls: int = 0
    pretrained_context_charges: int = 0


@dataclass(frozen=True)
class GenerationTrace:
    steps: tuple[TraceStep, ...] = ()
    counters: TraceCounters = field(default_factory=TraceCounters)


def softmax_with_temperature(logits: Sequence[float], temperature: float) -> TokenDistribution:
    """Temperature softmax over raw logits; order-preserving for any T > 0."""
    if not (isinstance(temperature, (int, float)) and math.isfinite(temperature) and temperature > 0):
        raise ValueError(f"temperature must be a positive finite real, got {temperature!r}")
    vec = np.asarray(list(logits) if not isinstance(logits, np.ndarray) else logits,
                     dtype=np.float64)
    if vec.ndim != 1 or vec.size == 0:
        raise ValueError("logits must be a non-empty 1-d vector")
    if not np.all(np.isfinite(vec)):
        raise ValueError("logits contain non-finite entries")
    shifted = (vec - vec.max()) / float(temperature)
    expd = np.exp(shifted)
    return TokenDistribution(expd / expd.sum())


def entropy(dist: TokenDistribution) -> float:
    """Shannon entropy in nats, with 0 * ln 0 taken as 0."""
    p = dist.probs
    nz = p[p > 0.0]
    return float(-(nz * np.log(nz)).sum())


def mix(dists: Sequence[TokenDistribution], weights: MixtureWeights) -> TokenDistribution:
    """Pointwise weighted sum of distributions over a shared vocabulary.

    The accumulation is an ordered left fold so that the result is bit-for-bit
    reproducible against a plain loop computing w0*p0[i] + w1*p1[i] + ...
    """
    if len(dists) != len(weights):
        raise ValueError(f"got {len(dists)} distributions but {len(weights)} weights")
    if len(dists) == 0:
        raise ValueError("mix requires at least one distribution")
    size = len(dists[0])
    for d in dists[1:]:
        if len(d) != size:
            raise ValueError("all distributions must share one vocabulary size")
    acc = weights.weights[0] * dists[0].probs
    for k in range(1, len(dists)):
        acc = acc + weights.weights[k] * dists[k].probs
    return TokenDistribution(acc)


def sample(dist: TokenDistribution, rng: np.random.Generator) -> TokenId:
    """Draw one token by inverse-CDF sampling; deterministic given the rng state."""
    u = rng.random()
    cum = np.cumsum(dist.probs)
    idx = int(np.searchsorted(cum, u, side="right"))
    if idx >= len(dist):
        # Cumulative sum fell short of 1 by rounding; fall back to the last
        # token with positive mass.
        idx = int(np.max(np.nonzero(dist.probs)))
    return idx


def argmax(dist: TokenDistribution) -> TokenId:
    """Highest-probability token; ties break toward the lowest token id."""
    return int(np.argmax(dist.probs))
