"""Language-model backends and few-shot prefix construction.

Three implementations of the :class:`LanguageModel` contract live here: a
deterministic lookup table, a trainable n-gram model with additive smoothing,
and an HTTP client for a remote model server. Desk-scale models tokenize by
whitespace over a closed vocabulary; real-model tokenization stays entirely
behind the wire protocol.
"""

from __future__ import annotations

import json
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import requests

from .core import TokenDistribution, TokenId, Vocabulary

__all__ = [
    "LanguageModel",
    "WhitespaceTokenizer",
    "TableModel",
    "NGramModel",
    "FewShotSpec",
    "render_fewshot_prefix",
    "RemoteConfig",
    "RemoteModel",
    "TransportError",
    "ProtocolError",
    "save_model",
    "load_model",
]

MODEL_FORMAT = "cds-model/1"

# Context-padding sentinel for n-gram counts; never part of a vocabulary.
BOS_MARKER = "<s>"
DEFAULT_STOP_TOKEN = "</s>"


class LanguageModel(ABC):
    """Anything that maps a token-id context to a next-token distribution.

    Implementations must be deterministic: the same context yields the same
    distribution, and the distribution is over this model's vocabulary.
    """

    @abstractmethod
    def next_distribution(self, context: Sequence[TokenId]) -> TokenDistribution:
        ...

    @abstractmethod
    def vocabulary(self) -> Vocabulary:
        ...


class WhitespaceTokenizer:
    """Whitespace-split tokenizer over a closed vocabulary."""

    def __init__(self, vocabulary: Vocabulary):
        for tok in vocabulary.tokens:
            if not tok or any(ch.isspace() for ch in tok):
                raise ValueError(f"token {tok!r} cannot be whitespace-tokenized")
        self._vocab = vocabulary

    @property
    def vocab(self) -> Vocabulary:
        return self._vocab

    def encode(self, text: str) -> list[TokenId]:
        return [self._vocab.id_of(tok) for tok in text.split()]

    def decode(self, token_ids: Sequence[TokenId]) -> str:
        return " ".join(self._vocab.tokens_of(token_ids))


class TableModel(LanguageModel):
    """Deterministic test double: longest stored context-suffix wins, else default.

    ``entries`` maps token-id tuples (or token-string tuples, resolved against
    the vocabulary) to distributions.
    """

    def __init__(
        self,
        vocabulary: Vocabulary,
        default: TokenDistribution,
        entries: Mapping[tuple, TokenDistribution] | None = None,
    ):
        if len(default) != len(vocabulary):
            raise ValueError("default distribution size must match the vocabulary")
        self._vocab = vocabulary
        self._default = default
        self._table: dict[tuple[TokenId, ...], TokenDistribution] = {}
        for suffix, dist in (entries or {}).items():
            key = tuple(
                vocabulary.id_of(t) if isinstance(t, str) else int(t) for t in suffix
            )
            if not key:
                raise ValueError("table suffixes must be non-empty; use default instead")
            vocabulary.validate_ids(key)
            if len(dist) != len(vocabulary):
                raise ValueError("stored distribution size must match the vocabulary")
            self._table[key] = dist
        self._max_suffix = max((len(k) for k in self._table), default=0)

    def vocabulary(self) -> Vocabulary:
        return self._vocab

    def next_distribution(self, context: Sequence[TokenId]) -> TokenDistribution:
        self._vocab.validate_ids(context)
        ctx = tuple(context)
        for length in range(min(self._max_suffix, len(ctx)), 0, -1):
            hit = self._table.get(ctx[-length:])
            if hit is not None:
                return hit
        return self._default

    def to_document(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "kind": "table",
            "vocabulary": {
                "tokens": list(self._vocab.tokens),
                "stop_ids": sorted(self._vocab.stop_ids),
            },
            "default": self._default.probs.tolist(),
            "entries": [
                {"suffix": self._vocab.tokens_of(suffix), "probs": dist.probs.tolist()}
                for suffix, dist in sorted(self._table.items())
            ],
        }

    @classmethod
    def from_document(cls, doc: Mapping) -> "TableModel":
        vocab = _vocabulary_from_document(doc["vocabulary"])
        default = TokenDistribution(np.asarray(doc["default"], dtype=np.float64))
        entries = {
            tuple(e["suffix"]): TokenDistribution(np.asarray(e["probs"], dtype=np.float64))
            for e in doc.get("entries", [])
        }
        return cls(vocab, default, entries)


class NGramModel(LanguageModel):
    """Order-n model with additive smoothing: (count + a) / (total + a * V).

    Counts are keyed by (n-1)-gram contexts of token strings, left-padded with a
    begin-of-sequence marker that is not itself part of the vocabulary. An
    unseen context with zero smoothing falls back to the uniform distribution.
    """

    def __init__(
        self,
        vocabulary: Vocabulary,
        order: int,
        smoothing: float,
        counts: Mapping[tuple[str, ...], Mapping[str, int]],
    ):
        if order < 1:
            raise ValueError(f"order must be >= 1, got {order}")
        if smoothing < 0:
            raise ValueError(f"smoothing must be >= 0, got {smoothing}")
        self._vocab = vocabulary
        self.order = int(order)
        self.smoothing = float(smoothing)
        self._counts: dict[tuple[str, ...], dict[str, int]] = {
            tuple(ctx): dict(tok_counts) for ctx, tok_counts in counts.items()
        }

    @classmethod
    def train(
        cls,
        corpus: Sequence[str],
        order: int,
        smoothing: float,
        stop_token: str = DEFAULT_STOP_TOKEN,
    ) -> "NGramModel":
        """Count all order-length windows over whitespace-split sentences.

        Each sentence is padded with (order - 1) begin markers and terminated
        with the stop token, so trained models emit the stop token at sequence
        ends.
        """
        if order < 1:
            raise ValueError(f"order must be >= 1, got {order}")
        if smoothing < 0:
            raise ValueError(f"smoothing must be >= 0, got {smoothing}")
        if not corpus:
            raise ValueError("training corpus must be non-empty")
        sentences = [text.split() for text in corpus]
        words = sorted({w for sent in sentences for w in sent})
        if BOS_MARKER in words:
            raise ValueError(f"corpus must not contain the reserved marker {BOS_MARKER!r}")
        vocab = Vocabulary.from_tokens(words, stop_tokens=(stop_token,))
        counts: dict[tuple[str, ...], dict[str, int]] = {}
        for sent in sentences:
            padded = [BOS_MARKER] * (order - 1) + sent + [stop_token]
            for i in range(order - 1, len(padded)):
                ctx = tuple(padded[i - order + 1 : i])
                target = padded[i]
                counts.setdefault(ctx, {})
                counts[ctx][target] = counts[ctx].get(target, 0) + 1
        return cls(vocab, order, smoothing, counts)

    def vocabulary(self) -> Vocabulary:
        return self._vocab

    def conditional(self, context_tokens: Sequence[str], token: str) -> float:
        """P(token | context) for token strings; context is truncated/padded to order-1."""
        dist = self._distribution_for(self._context_key(list(context_tokens)))
        return float(dist.probs[self._vocab.id_of(token)])

    def _context_key(self, tokens: list[str]) -> tuple[str, ...]:
        need = self.order - 1
        tail = tokens[-need:] if need else []
        return tuple([BOS_MARKER] * (need - len(tail)) + tail)

    def _distribution_for(self, key: tuple[str, ...]) -> TokenDistribution:
        size = len(self._vocab)
        tok_counts = self._counts.get(key)
        if tok_counts is None and self.smoothing == 0:
            return TokenDistribution.uniform(size)
        vec = np.full(size, self.smoothing, dtype=np.float64)
        total = self.smoothing * size
        if tok_counts:
            for tok, cnt in tok_counts.items():
                vec[self._vocab.id_of(tok)] += cnt
                total += cnt
        if total == 0:
            return TokenDistribution.uniform(size)
        return TokenDistribution(vec / total)

    def next_distribution(self, context: Sequence[TokenId]) -> TokenDistribution:
        self._vocab.validate_ids(context)
        strings = self._vocab.tokens_of(context)
        return self._distribution_for(self._context_key(strings))

    def to_document(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "kind": "ngram",
            "order": self.order,
            "smoothing": self.smoothing,
            "vocabulary": {
                "tokens": list(self._vocab.tokens),
                "stop_ids": sorted(self._vocab.stop_ids),
            },
            "contexts": {
                " ".join(ctx): dict(sorted(tok_counts.items()))
                for ctx, tok_counts in sorted(self._counts.items())
            },
        }

    @classmethod
    def from_document(cls, doc: Mapping) -> "NGramModel":
        vocab = _vocabulary_from_document(doc["vocabulary"])
        counts = {
            tuple(key.split(" ")) if key else (): tok_counts
            for key, tok_counts in doc.get("contexts", {}).items()
        }
        return cls(vocab, int(doc["order"]), float(doc["smoothing"]), counts)


@dataclass(frozen=True)
class FewShotSpec:
    """Example QA pairs plus the template that renders them into a prompt.

    The default template joins shots as "Question: .. Answer: .." blocks and
    terminates with the live question, so a k-shot render extends the
    (k-1)-shot block region by exactly one block.
    """

    shots: tuple[tuple[str, str], ...] = ()
    shot_block: str = "Question: {question}\nAnswer: {answer}\n\n"
    live_block: str = "Question: {question}\nAnswer:"

    MAX_SHOTS = 5

    def __post_init__(self) -> None:
        if len(self.shots) > self.MAX_SHOTS:
            raise ValueError(f"at most {self.MAX_SHOTS} shots are supported, got {len(self.shots)}")

    def truncated(self, count: int) -> "FewShotSpec":
        if not (0 <= count <= len(self.shots)):
            raise ValueError(f"cannot truncate {len(self.shots)} shots to {count}")
        return FewShotSpec(self.shots[:count], self.shot_block, self.live_block)

    def render(self, question: str) -> str:
        parts = [self.shot_block.format(question=q, answer=a) for q, a in self.shots]
        parts.append(self.live_block.format(question=question))
        return "".join(parts)


def render_fewshot_prefix(
    spec: FewShotSpec, question: str, tokenizer: WhitespaceTokenizer
) -> list[TokenId]:
    """Token sequence of the few-shot prompt for the knowledge model."""
    return tokenizer.encode(spec.render(question))


class TransportError(RuntimeError):
    """The remote endpoint could not be reached after the configured retries."""

    def __init__(self, message: str, attempts: int):
        super().__init__(message)
        self.attempts = attempts


class ProtocolError(RuntimeError):
    """The remote endpoint answered, but not with a valid protocol response."""


@dataclass(frozen=True)
class RemoteConfig:
    top_k: int = 128
    timeout: float = 10.0
    retries: int = 2
    backoff: float = 0.05


class RemoteModel(LanguageModel):
    """Client for the JSON-over-HTTP distribution protocol.

    The vocabulary is negotiated at construction: fetched from ``GET /v1/vocab``
    when the server enumerates it, otherwise the caller must supply one (the
    server's vocab-less text mode). Responses arrive as top-K (token, logprob)
    entries plus a residual mass bucket that is spread uniformly over unlisted
    vocabulary entries.
    """

    def __init__(
        self,
        endpoint: str,
        config: RemoteConfig = RemoteConfig(),
        vocabulary: Vocabulary | None = None,
        session: requests.Session | None = None,
    ):
        self.endpoint = endpoint.rstrip("/")
        self.config = config
        self._session = session or requests.Session()
        if vocabulary is None:
            vocabulary = self._fetch_vocabulary()
        self._vocab = vocabulary

    def vocabulary(self) -> Vocabulary:
        return self._vocab

    def _request(self, method: str, path: str, payload: dict | None = None) -> dict:
        url = f"{self.endpoint}{path}"
        attempts = self.config.retries + 1
        last_error: Exception | None = None
        for attempt in range(attempts):
            try:
                resp = self._session.request(
                    method, url, json=payload, timeout=self.config.timeout
                )
            except requests.RequestException as exc:
                last_error = exc
                if attempt + 1 < attempts:
                    time.sleep(self.config.backoff)
                continue
            if resp.status_code != 200:
                raise ProtocolError(f"{url} returned HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                return resp.json()
            except ValueError as exc:
                raise ProtocolError(f"{url} returned malformed JSON: {exc}") from exc
        raise TransportError(
            f"could not reach {url} after {attempts} attempts: {last_error}", attempts=attempts
        )

    def _fetch_vocabulary(self) -> Vocabulary:
        doc = self._request("GET", "/v1/vocab")
        if doc.get("vocab_enumerable") is False:
            raise ProtocolError(
                "server runs in vocab-less text mode; construct RemoteModel with an "
                "explicit vocabulary to negotiate one"
            )
        try:
            return _vocabulary_from_document(doc)
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"invalid vocabulary response: {exc}") from exc

    def next_distribution(self, context: Sequence[TokenId]) -> TokenDistribution:
        if len(context) == 0:
            raise ValueError("remote models require a non-empty context")
        self._vocab.validate_ids(context)
        payload = {
            "context_tokens": self._vocab.tokens_of(context),
            "top_k": self.config.top_k,
        }
        doc = self._request("POST", "/v1/distribution", payload)
        try:
            entries = doc["entries"]
            residual_logprob = float(doc["residual_logprob"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"malformed distribution response: {exc}") from exc

        size = len(self._vocab)
        vec = np.zeros(size, dtype=np.float64)
        listed: set[int] = set()
        for entry in entries:
            try:
                token = entry["token"]
                logprob = float(entry["logprob"])
            except (KeyError, TypeError, ValueError) as exc:
                raise ProtocolError(f"malformed distribution entry: {exc}") from exc
            if token not in self._vocab:
                raise ProtocolError(
                    f"vocabulary mismatch: server token {token!r} is not in the negotiated vocabulary"
                )
            tid = self._vocab.id_of(token)
            vec[tid] += float(np.exp(logprob))
            listed.add(tid)

        residual = float(np.exp(residual_logprob))
        unlisted = size - len(listed)
        if residual > 0 and unlisted > 0:
            share = residual / unlisted
            for tid in range(size):
                if tid not in listed:
                    vec[tid] = share
        total = vec.sum()
        if total <= 0:
            raise ProtocolError("distribution response carries no probability mass")
        return TokenDistribution(vec / total)


def _vocabulary_from_document(doc: Mapping) -> Vocabulary:
    return Vocabulary(tokens=tuple(doc["tokens"]), stop_ids=frozenset(int(i) for i in doc["stop_ids"]))


def save_model(model: TableModel | NGramModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model.to_document(), indent=2) + "\n", encoding="utf-8")


def load_model(path: str | Path) -> LanguageModel:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != MODEL_FORMAT:
        raise ValueError(f"{path}: expected format {MODEL_FORMAT!r}, got {doc.get('format')!r}")
    kind = doc.get("kind")
    if kind == "table":
        return TableModel.from_document(doc)
    if kind == "ngram":
        return NGramModel.from_document(doc)
    raise ValueError(f"{path}: unknown model kind {kind!r}")
