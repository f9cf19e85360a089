"""Causal-LM backend: loads a local/hub model and reports next-token log-probs.

The backend is stateless per request (the full context is re-encoded and
re-run every call) and serializes forward passes through one lock, so
concurrent HTTP connections never interleave work on the device. All
log-probabilities are natural log.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import torch
from transformers import AutoModelForCausalLM, AutoTokenizer

# Stand-in for log(0) in JSON payloads, which cannot carry -inf.
LOG_ZERO = -1e30


class BackendError(ValueError):
    """Bad request content (unknown token, empty context, ...)."""


@dataclass(frozen=True)
class ServedModelSpec:
    """What to load and how to serve it."""

    model: str
    device: str = "cpu"
    top_k: int = 128
    chat_template: bool = False
    extra_stop_tokens: tuple[str, ...] = ()
    vocab_mode: str = "auto"  # auto | enumerable | text

    def __post_init__(self) -> None:
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.vocab_mode not in ("auto", "enumerable", "text"):
            raise ValueError(f"unknown vocab mode {self.vocab_mode!r}")


class ModelBackend:
    """One loaded model plus its tokenizer."""

    def __init__(self, spec: ServedModelSpec):
        self.spec = spec
        self.tokenizer = AutoTokenizer.from_pretrained(spec.model)
        self.model = AutoModelForCausalLM.from_pretrained(spec.model)
        self.model.to(spec.device)
        self.model.eval()
        self._lock = threading.Lock()
        self._vocab = self.tokenizer.get_vocab()  # token string -> id
        self._id_to_token = {i: t for t, i in self._vocab.items()}

    @property
    def vocab_enumerable(self) -> bool:
        if self.spec.vocab_mode == "text":
            return False
        return True

    def _stop_ids(self) -> list[int]:
        ids = []
        if self.tokenizer.eos_token_id is not None:
            ids.append(int(self.tokenizer.eos_token_id))
        for token in self.spec.extra_stop_tokens:
            if token not in self._vocab:
                raise ValueError(f"stop token {token!r} is not in the tokenizer vocabulary")
            ids.append(int(self._vocab[token]))
        if not ids:
            raise ValueError("model has no EOS token and no extra stop tokens configured")
        return sorted(set(ids))

    def vocab_document(self) -> dict:
        if not self.vocab_enumerable:
            return {
                "vocab_enumerable": False,
                "stop_tokens": [self._id_to_token[i] for i in self._stop_ids()],
            }
        size = len(self._vocab)
        tokens = [self._id_to_token[i] for i in range(size)]
        return {"tokens": tokens, "stop_ids": self._stop_ids()}

    def tokenize(self, text: str) -> list[str]:
        ids = self.tokenizer.encode(text, add_special_tokens=False)
        return [self._id_to_token[int(i)] for i in ids]

    def _encode_context(self, context_text: str | None, context_tokens: list[str] | None) -> list[int]:
        if (context_text is None) == (context_tokens is None):
            raise BackendError("provide exactly one of context_text or context_tokens")
        if context_tokens is not None:
            if not context_tokens:
                raise BackendError("context_tokens must be non-empty")
            ids = []
            for token in context_tokens:
                if token not in self._vocab:
                    raise BackendError(f"token {token!r} is not in the tokenizer vocabulary")
                ids.append(int(self._vocab[token]))
            return ids
        if self.spec.chat_template:
            if not getattr(self.tokenizer, "chat_template", None):
                raise BackendError("chat templating requested but the tokenizer has no chat template")
            ids = self.tokenizer.apply_chat_template(
                [{"role": "user", "content": context_text}], add_generation_prompt=True
            )
            return list(ids)
        ids = self.tokenizer.encode(context_text, add_special_tokens=False)
        if not ids:
            raise BackendError("context_text encoded to zero tokens")
        return [int(i) for i in ids]

    def distribution(
        self,
        context_text: str | None = None,
        context_tokens: list[str] | None = None,
        top_k: int | None = None,
    ) -> dict:
        """Top-K (token, logprob) entries plus a residual log-mass bucket."""
        ids = self._encode_context(context_text, context_tokens)
        k = min(top_k or self.spec.top_k, len(self._vocab))
        if k < 1:
            raise BackendError("top_k must be >= 1")
        with self._lock, torch.no_grad():
            input_ids = torch.tensor([ids], dtype=torch.long, device=self.spec.device)
            logits = self.model(input_ids).logits[0, -1, :]
        logprobs = torch.log_softmax(logits.double(), dim=-1)
        values, indices = torch.topk(logprobs, k)
        entries = [
            {"token": self._id_to_token[int(i)], "logprob": float(v)}
            for v, i in zip(values, indices)
        ]
        if k < logprobs.numel():
            mask = torch.ones_like(logprobs, dtype=torch.bool)
            mask[indices] = False
            residual = float(torch.logsumexp(logprobs[mask], dim=0))
        else:
            residual = LOG_ZERO
        return {"entries": entries, "residual_logprob": residual}
