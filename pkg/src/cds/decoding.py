"""Generation strategies: single-model baselines and the collaborative variants.

The collaborative strategies maintain three synchronized contexts (pretrained,
aligned, classifier) and route each position either to the aligned model's
sample or to the pretrained model's greedy choice. Routing comes from a
critical-token classifier, an entropy threshold, or a soft distribution mix,
depending on the strategy. Every stochastic choice flows through one seeded
generator per run, so equal seeds give bitwise-equal token sequences.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Literal, Sequence

import numpy as np

from .classifier import ClassifierMode, CriticalTokenClassifier
from .core import (
    DecisionLabel,
    GenerationTrace,
    MixtureWeights,
    PrefixTriple,
    TokenDistribution,
    TokenId,
    TraceCounters,
    TraceStep,
    Vocabulary,
    argmax,
    entropy,
    mix,
    sample,
)
from .models import LanguageModel

__all__ = [
    "Strategy",
    "StrategyConfig",
    "GenerationResult",
    "GenerationError",
    "CostReport",
    "generate",
    "model_cds",
    "entropy_cds",
    "self_cds",
    "soft_mixing_cds",
    "run_strategy",
    "cost_report",
    "export_trace",
    "response_text",
    "GAMMA_BY_FAMILY",
]

# Entropy thresholds (nats) by model family; roughly the top 10% of tokens.
GAMMA_BY_FAMILY = {"llama": 0.9, "mistral": 1.3}


class Strategy(str, enum.Enum):
    ALIGNED_SAMPLING = "aligned_sampling"
    ALIGNED_GREEDY = "aligned_greedy"
    PRETRAINED_SAMPLING = "pretrained_sampling"
    PRETRAINED_GREEDY = "pretrained_greedy"
    MODEL_CDS = "model_cds"
    ENTROPY_CDS = "entropy_cds"
    SELF_CDS = "self_cds"
    SOFT_MIXING_CDS = "soft_mixing_cds"


_SINGLE_MODEL: dict[Strategy, tuple[str, bool]] = {
    Strategy.ALIGNED_SAMPLING: ("aligned", False),
    Strategy.ALIGNED_GREEDY: ("aligned", True),
    Strategy.PRETRAINED_SAMPLING: ("pretrained", False),
    Strategy.PRETRAINED_GREEDY: ("pretrained", True),
}


@dataclass(frozen=True)
class StrategyConfig:
    """Strategy selector plus every tunable a run needs.

    ``stop_ids`` of None means "use the generating model's stop set".
    """

    strategy: Strategy
    temperature: float = 1.0
    gamma: float | None = None
    lambda_mix: float = 0.5
    max_tokens: int = 256
    stop_ids: frozenset[TokenId] | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if not (self.temperature > 0):
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if not (0.0 <= self.lambda_mix <= 1.0):
            raise ValueError(f"lambda_mix must be in [0, 1], got {self.lambda_mix}")
        if self.max_tokens < 1:
            raise ValueError(f"max_tokens must be >= 1, got {self.max_tokens}")
        if self.strategy in (Strategy.ENTROPY_CDS, Strategy.SELF_CDS) and self.gamma is None:
            raise ValueError(f"{self.strategy.value} requires an entropy threshold (gamma)")


Termination = Literal["stop_token", "max_tokens"]


@dataclass(frozen=True)
class GenerationResult:
    """Accepted tokens (terminal STOP included when one was produced) plus the trace."""

    tokens: tuple[TokenId, ...]
    trace: GenerationTrace
    terminated_by: Termination

    def __post_init__(self) -> None:
        if len(self.trace.steps) != len(self.tokens):
            raise ValueError("trace must record exactly one step per accepted token")


class GenerationError(RuntimeError):
    """A step could not complete; carries the partial tokens and trace steps."""

    def __init__(self, message: str, partial_tokens: Sequence[TokenId], partial_steps: Sequence[TraceStep]):
        super().__init__(message)
        self.partial_tokens = tuple(partial_tokens)
        self.partial_steps = tuple(partial_steps)


class _VocabBridge:
    """Token transfer between two vocabularies via token strings.

    Identical vocabularies pass ids through untouched; otherwise a token chosen
    under one vocabulary is detokenized and looked up in the other (flagged
    experimental: only whole-token matches transfer).
    """

    def __init__(self, pretrained: Vocabulary, aligned: Vocabulary):
        self._shared = pretrained.tokens == aligned.tokens
        self._pretrained = pretrained
        self._aligned = aligned

    @property
    def shared(self) -> bool:
        return self._shared

    def pretrained_to_aligned(self, token_id: TokenId) -> TokenId:
        if self._shared:
            return token_id
        token = self._pretrained.token_of(token_id)
        if token not in self._aligned:
            raise KeyError(token)
        return self._aligned.id_of(token)

    def aligned_to_pretrained(self, token_id: TokenId) -> TokenId:
        if self._shared:
            return token_id
        token = self._aligned.token_of(token_id)
        if token not in self._pretrained:
            raise KeyError(token)
        return self._pretrained.id_of(token)


def _apply_temperature(dist: TokenDistribution, temperature: float) -> TokenDistribution:
    """Reshape a probability vector as p^(1/T), renormalized. T=1 is the identity."""
    if temperature == 1.0:
        return dist
    p = dist.probs
    scaled = (p / p.max()) ** (1.0 / temperature)
    return TokenDistribution(scaled / scaled.sum())


def _resolve_stop_ids(config: StrategyConfig, vocab: Vocabulary) -> frozenset[TokenId]:
    if config.stop_ids is not None:
        vocab.validate_ids(sorted(config.stop_ids))
        return config.stop_ids
    return vocab.stop_ids


def generate(
    model: LanguageModel, prefix: Sequence[TokenId], config: StrategyConfig
) -> GenerationResult:
    """Single-model autoregressive loop: greedy or temperature sampling."""
    if config.strategy not in _SINGLE_MODEL:
        raise ValueError(f"generate() requires a single-model strategy, got {config.strategy.value}")
    source, greedy = _SINGLE_MODEL[config.strategy]
    vocab = model.vocabulary()
    vocab.validate_ids(prefix)
    stop_ids = _resolve_stop_ids(config, vocab)
    rng = np.random.default_rng(config.seed)

    context = list(prefix)
    tokens: list[TokenId] = []
    steps: list[TraceStep] = []
    terminated: Termination = "max_tokens"
    for position in range(config.max_tokens):
        dist = model.next_distribution(context)
        if greedy:
            token = argmax(dist)
        else:
            token = sample(_apply_temperature(dist, config.temperature), rng)
        context.append(token)
        tokens.append(token)
        steps.append(
            TraceStep(
                position=position,
                decision=DecisionLabel.NO,
                source=source,
                aligned_entropy=entropy(dist),
                accepted_token=token,
                aligned_forward=source == "aligned",
                pretrained_forward=source == "pretrained",
            )
        )
        if token in stop_ids:
            terminated = "stop_token"
            break

    counters = TraceCounters(
        aligned_tokens=len(tokens) if source == "aligned" else 0,
        pretrained_tokens=len(tokens) if source == "pretrained" else 0,
        classifier_calls=0,
        pretrained_context_charges=1 if source == "pretrained" else 0,
    )
    return GenerationResult(tuple(tokens), GenerationTrace(tuple(steps), counters), terminated)


@dataclass
class _CollabState:
    """Mutable bookkeeping shared by the collaborative strategies."""

    s_p: list[TokenId]
    s_a: list[TokenId]
    s_c: list[TokenId]
    response_strings: list[str] = field(default_factory=list)
    tokens: list[TokenId] = field(default_factory=list)
    steps: list[TraceStep] = field(default_factory=list)
    classifier_calls: int = 0

    def accept(
        self,
        aligned_vocab: Vocabulary,
        aligned_id: TokenId,
        pretrained_id: TokenId,
        step: TraceStep,
    ) -> None:
        self.s_a.append(aligned_id)
        self.s_p.append(pretrained_id)
        self.s_c.append(aligned_id)
        self.response_strings.append(aligned_vocab.token_of(aligned_id))
        self.tokens.append(aligned_id)
        self.steps.append(step)


def _collab_result(state: _CollabState, terminated: Termination) -> GenerationResult:
    aligned_steps = sum(1 for s in state.steps if s.source == "aligned")
    counters = TraceCounters(
        aligned_tokens=aligned_steps,
        pretrained_tokens=len(state.steps) - aligned_steps,
        classifier_calls=state.classifier_calls,
        pretrained_context_charges=1,
    )
    return GenerationResult(
        tuple(state.tokens), GenerationTrace(tuple(state.steps), counters), terminated
    )


def _bridge_or_fail(
    direction, token_id: TokenId, vocab: Vocabulary, state: _CollabState
) -> TokenId:
    try:
        return direction(token_id)
    except KeyError:
        raise GenerationError(
            f"token {vocab.token_of(token_id)!r} has no counterpart in the other "
            f"model's vocabulary",
            partial_tokens=state.tokens,
            partial_steps=state.steps,
        ) from None


def model_cds(
    pretrained: LanguageModel,
    aligned: LanguageModel,
    classifier: CriticalTokenClassifier,
    prefixes: PrefixTriple,
    config: StrategyConfig,
    question: str = "",
) -> GenerationResult:
    """Classifier-routed collaborative decoding.

    Per step: tentatively sample from the aligned model, let the classifier
    judge the tentative token, and on Yes replace it with the pretrained
    model's greedy choice. The accepted token is appended to all three
    contexts and ends generation when it is a STOP token. A discarded
    tentative still consumed its RNG draw, so seeded replays line up.

    With an NT-mode classifier the decision is made before a tentative token
    exists; the aligned distribution is still evaluated every step for the
    trace.
    """
    if config.strategy is not Strategy.MODEL_CDS:
        raise ValueError(f"model_cds() got strategy {config.strategy.value}")
    va, vp = aligned.vocabulary(), pretrained.vocabulary()
    va.validate_ids(prefixes.aligned)
    vp.validate_ids(prefixes.pretrained)
    bridge = _VocabBridge(vp, va)
    stop_ids = _resolve_stop_ids(config, va)
    rng = np.random.default_rng(config.seed)
    state = _CollabState(list(prefixes.pretrained), list(prefixes.aligned), list(prefixes.classifier))

    terminated: Termination = "max_tokens"
    for position in range(config.max_tokens):
        dist_a = aligned.next_distribution(state.s_a)
        step_entropy = entropy(dist_a)
        tentative: TokenId | None = None
        if classifier.mode == ClassifierMode.CT:
            tentative = sample(_apply_temperature(dist_a, config.temperature), rng)
            decision = classifier.decide(
                question, state.response_strings + [va.token_of(tentative)]
            )
        else:
            decision = classifier.decide(question, state.response_strings)
        state.classifier_calls += 1

        if decision is DecisionLabel.YES:
            dist_p = pretrained.next_distribution(state.s_p)
            accepted_p = argmax(dist_p)
            accepted_a = _bridge_or_fail(bridge.pretrained_to_aligned, accepted_p, vp, state)
            source = "pretrained"
            pretrained_forward = True
        else:
            if tentative is None:  # NT mode samples only when the router says No
                tentative = sample(_apply_temperature(dist_a, config.temperature), rng)
            accepted_a = tentative
            accepted_p = _bridge_or_fail(bridge.aligned_to_pretrained, accepted_a, va, state)
            source = "aligned"
            pretrained_forward = False

        state.accept(
            va,
            accepted_a,
            accepted_p,
            TraceStep(
                position=position,
                decision=decision,
                source=source,
                aligned_entropy=step_entropy,
                accepted_token=accepted_a,
                aligned_forward=True,
                pretrained_forward=pretrained_forward,
            ),
        )
        if accepted_a in stop_ids:
            terminated = "stop_token"
            break

    return _collab_result(state, terminated)


def entropy_cds(
    pretrained: LanguageModel,
    aligned: LanguageModel,
    prefixes: PrefixTriple,
    config: StrategyConfig,
) -> GenerationResult:
    """Entropy-threshold routing: above gamma, take the pretrained greedy token."""
    if config.strategy is not Strategy.ENTROPY_CDS:
        raise ValueError(f"entropy_cds() got strategy {config.strategy.value}")
    va, vp = aligned.vocabulary(), pretrained.vocabulary()
    va.validate_ids(prefixes.aligned)
    vp.validate_ids(prefixes.pretrained)
    bridge = _VocabBridge(vp, va)
    stop_ids = _resolve_stop_ids(config, va)
    rng = np.random.default_rng(config.seed)
    state = _CollabState(list(prefixes.pretrained), list(prefixes.aligned), list(prefixes.classifier))

    terminated: Termination = "max_tokens"
    for position in range(config.max_tokens):
        dist_a = aligned.next_distribution(state.s_a)
        step_entropy = entropy(dist_a)
        if step_entropy > config.gamma:
            decision = DecisionLabel.YES
            accepted_p = argmax(pretrained.next_distribution(state.s_p))
            accepted_a = _bridge_or_fail(bridge.pretrained_to_aligned, accepted_p, vp, state)
            source = "pretrained"
            pretrained_forward = True
        else:
            decision = DecisionLabel.NO
            accepted_a = sample(_apply_temperature(dist_a, config.temperature), rng)
            accepted_p = _bridge_or_fail(bridge.aligned_to_pretrained, accepted_a, va, state)
            source = "aligned"
            pretrained_forward = False

        state.accept(
            va,
            accepted_a,
            accepted_p,
            TraceStep(
                position=position,
                decision=decision,
                source=source,
                aligned_entropy=step_entropy,
                accepted_token=accepted_a,
                aligned_forward=True,
                pretrained_forward=pretrained_forward,
            ),
        )
        if accepted_a in stop_ids:
            terminated = "stop_token"
            break

    return _collab_result(state, terminated)


def self_cds(
    aligned: LanguageModel, prefix: Sequence[TokenId], config: StrategyConfig
) -> GenerationResult:
    """One model throughout: switch from sampling to greedy above the entropy threshold."""
    if config.strategy is not Strategy.SELF_CDS:
        raise ValueError(f"self_cds() got strategy {config.strategy.value}")
    vocab = aligned.vocabulary()
    vocab.validate_ids(prefix)
    stop_ids = _resolve_stop_ids(config, vocab)
    rng = np.random.default_rng(config.seed)

    context = list(prefix)
    tokens: list[TokenId] = []
    steps: list[TraceStep] = []
    terminated: Termination = "max_tokens"
    for position in range(config.max_tokens):
        dist = aligned.next_distribution(context)
        step_entropy = entropy(dist)
        if step_entropy > config.gamma:
            decision = DecisionLabel.YES
            token = argmax(dist)
        else:
            decision = DecisionLabel.NO
            token = sample(_apply_temperature(dist, config.temperature), rng)
        context.append(token)
        tokens.append(token)
        steps.append(
            TraceStep(
                position=position,
                decision=decision,
                source="aligned",
                aligned_entropy=step_entropy,
                accepted_token=token,
                aligned_forward=True,
                pretrained_forward=False,
            )
        )
        if token in stop_ids:
            terminated = "stop_token"
            break

    counters = TraceCounters(
        aligned_tokens=len(tokens),
        pretrained_tokens=0,
        classifier_calls=0,
        pretrained_context_charges=0,
    )
    return GenerationResult(tuple(tokens), GenerationTrace(tuple(steps), counters), terminated)


def soft_mixing_cds(
    pretrained: LanguageModel,
    aligned: LanguageModel,
    router: CriticalTokenClassifier,
    prefixes: PrefixTriple,
    config: StrategyConfig,
    question: str = "",
) -> GenerationResult:
    """At critical positions, greedily decode from the interpolated distribution.

    The router follows the same tentative-token protocol as classifier-routed
    decoding; on Yes the accepted token is the argmax of
    lambda * pretrained + (1 - lambda) * aligned. Requires a shared
    vocabulary, since the two distributions are mixed pointwise.
    """
    if config.strategy is not Strategy.SOFT_MIXING_CDS:
        raise ValueError(f"soft_mixing_cds() got strategy {config.strategy.value}")
    va, vp = aligned.vocabulary(), pretrained.vocabulary()
    if va.tokens != vp.tokens:
        raise ValueError("soft mixing requires both models to share one vocabulary")
    va.validate_ids(prefixes.aligned)
    vp.validate_ids(prefixes.pretrained)
    stop_ids = _resolve_stop_ids(config, va)
    rng = np.random.default_rng(config.seed)
    weights = MixtureWeights(np.asarray([config.lambda_mix, 1.0 - config.lambda_mix]))
    state = _CollabState(list(prefixes.pretrained), list(prefixes.aligned), list(prefixes.classifier))

    terminated: Termination = "max_tokens"
    for position in range(config.max_tokens):
        dist_a = aligned.next_distribution(state.s_a)
        step_entropy = entropy(dist_a)
        tentative: TokenId | None = None
        if router.mode == ClassifierMode.CT:
            tentative = sample(_apply_temperature(dist_a, config.temperature), rng)
            decision = router.decide(question, state.response_strings + [va.token_of(tentative)])
        else:
            decision = router.decide(question, state.response_strings)
        state.classifier_calls += 1

        if decision is DecisionLabel.YES:
            dist_p = pretrained.next_distribution(state.s_p)
            accepted = argmax(mix([dist_p, dist_a], weights))
            source = "pretrained"
            pretrained_forward = True
        else:
            if tentative is None:
                tentative = sample(_apply_temperature(dist_a, config.temperature), rng)
            accepted = tentative
            source = "aligned"
            pretrained_forward = False

        state.accept(
            va,
            accepted,
            accepted,
            TraceStep(
                position=position,
                decision=decision,
                source=source,
                aligned_entropy=step_entropy,
                accepted_token=accepted,
                aligned_forward=True,
                pretrained_forward=pretrained_forward,
            ),
        )
        if accepted in stop_ids:
            terminated = "stop_token"
            break

    return _collab_result(state, terminated)


def run_strategy(
    config: StrategyConfig,
    *,
    aligned: LanguageModel | None = None,
    pretrained: LanguageModel | None = None,
    classifier: CriticalTokenClassifier | None = None,
    prefixes: PrefixTriple | None = None,
    question: str = "",
) -> GenerationResult:
    """Dispatch a configured strategy to the right engine entry point."""
    prefixes = prefixes or PrefixTriple()
    if config.strategy in _SINGLE_MODEL:
        role, _ = _SINGLE_MODEL[config.strategy]
        model = aligned if role == "aligned" else pretrained
        if model is None:
            raise ValueError(f"{config.strategy.value} requires the {role} model")
        prefix = prefixes.aligned if role == "aligned" else prefixes.pretrained
        return generate(model, prefix, config)
    if config.strategy is Strategy.SELF_CDS:
        if aligned is None:
            raise ValueError("self_cds requires the aligned model")
        return self_cds(aligned, prefixes.aligned, config)
    if aligned is None or pretrained is None:
        raise ValueError(f"{config.strategy.value} requires both aligned and pretrained models")
    if config.strategy is Strategy.ENTROPY_CDS:
        return entropy_cds(pretrained, aligned, prefixes, config)
    if classifier is None:
        raise ValueError(f"{config.strategy.value} requires a critical-token classifier")
    if config.strategy is Strategy.MODEL_CDS:
        return model_cds(pretrained, aligned, classifier, prefixes, config, question)
    return soft_mixing_cds(pretrained, aligned, classifier, prefixes, config, question)


@dataclass(frozen=True)
class CostReport:
    """Inference cost in unit forward passes, with the pretrained context charge t."""

    aligned_cost: int
    classifier_cost: int
    pretrained_cost: int
    total: int
    critical_fraction: float


def cost_report(trace: GenerationTrace, context_charge: int) -> CostReport:
    """Tally model forward passes recorded in a trace.

    With unit token cost, a trace of n tokens where a fraction f was routed
    costs n (aligned) + classifier calls + f*n + context_charge (pretrained).
    """
    aligned_cost = sum(1 for s in trace.steps if s.aligned_forward)
    pretrained_forwards = sum(1 for s in trace.steps if s.pretrained_forward)
    yes_steps = sum(1 for s in trace.steps if s.decision is DecisionLabel.YES)
    n = len(trace.steps)
    pretrained_cost = pretrained_forwards + context_charge
    return CostReport(
        aligned_cost=aligned_cost,
        classifier_cost=trace.counters.classifier_calls,
        pretrained_cost=pretrained_cost,
        total=aligned_cost + trace.counters.classifier_calls + pretrained_cost,
        critical_fraction=yes_steps / n if n else 0.0,
    )


def export_trace(
    result: GenerationResult, destination: str | Path | IO[str], context_charge: int = 0
) -> None:
    """Write a trace as JSONL: one step object per line plus a trailing summary."""

    def _write(fh: IO[str]) -> None:
        for step in result.trace.steps:
            fh.write(
                json.dumps(
                    {
                        "position": step.position,
                        "decision": step.decision.value,
                        "source": step.source,
                        "aligned_entropy": step.aligned_entropy,
                        "accepted_token": step.accepted_token,
                    }
                )
                + "\n"
            )
        cost = cost_report(result.trace, context_charge)
        counters = result.trace.counters
        fh.write(
            json.dumps(
                {
                    "summary": {
                        "terminated_by": result.terminated_by,
                        "tokens": len(result.tokens),
                        "counters": {
                            "aligned_tokens": counters.aligned_tokens,
                            "pretrained_tokens": counters.pretrained_tokens,
                            "classifier_calls": counters.classifier_calls,
                            "pretrained_context_charges": counters.pretrained_context_charges,
                        },
                        "cost": {
                            "aligned_cost": cost.aligned_cost,
                            "classifier_cost": cost.classifier_cost,
                            "pretrained_cost": cost.pretrained_cost,
                            "total": cost.total,
                            "critical_fraction": cost.critical_fraction,
                        },
                    }
                }
            )
            + "\n"
        )

    if isinstance(destination, (str, Path)):
        with open(destination, "w", encoding="utf-8") as fh:
            _write(fh)
    else:
        _write(destination)


def response_text(result: GenerationResult, vocabulary: Vocabulary, skip_stop: bool = True) -> str:
    """Detokenize a result for display/scoring, dropping stop tokens by default."""
    ids = [t for t in result.tokens if not (skip_stop and t in vocabulary.stop_ids)]
    return " ".join(vocabulary.tokens_of(ids))
