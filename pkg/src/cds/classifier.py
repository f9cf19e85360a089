"""Critical-token classifiers, the annotation pipeline, and their evaluation.

A critical token is one whose distribution should not tolerate randomness
(numbers, dates, proper names, short fact phrases). This module covers the
whole desk-scale pipeline: generating labeled instances from documents,
mapping annotated spans back onto tokens, rule-based and trained classifiers,
and the All/Switch metric suite.
"""

from __future__ import annotations

import json
import logging
import re
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import requests

from .core import DecisionLabel, argmax
from .models import LanguageModel, ProtocolError, WhitespaceTokenizer

__all__ = [
    "DecisionLabel",
    "ClassifierMode",
    "CriticalTokenInstance",
    "SpanAnnotation",
    "CriticalTokenClassifier",
    "ConstantClassifier",
    "HeuristicRules",
    "HeuristicClassifier",
    "FeatureClassifier",
    "TrainConfig",
    "ClassifierMetrics",
    "build_classifier_prefix",
    "map_spans_to_labels",
    "train_feature_classifier",
    "evaluate_classifier",
    "GeneratorSpec",
    "ExtractorSpec",
    "DatasetBuildReport",
    "generate_dataset",
    "save_instances",
    "load_instances",
    "RemoteClassifier",
]

logger = logging.getLogger(__name__)

CLASSIFIER_FORMAT = "cds-classifier/1"


class ClassifierMode:
    """CT classifies the current (tentatively appended) token; NT predicts the next."""

    CT = "CT"
    NT = "NT"

    @staticmethod
    def validate(mode: str) -> str:
        if mode not in (ClassifierMode.CT, ClassifierMode.NT):
            raise ValueError(f"classifier mode must be 'CT' or 'NT', got {mode!r}")
        return mode


@dataclass(frozen=True)
class CriticalTokenInstance:
    """One dataset row: a question, answer tokens, and per-token Yes/No labels."""

    question: str
    answer_tokens: tuple[str, ...]
    labels: tuple[DecisionLabel, ...]

    def __post_init__(self) -> None:
        if len(self.answer_tokens) != len(self.labels):
            raise ValueError(
                f"{len(self.answer_tokens)} tokens but {len(self.labels)} labels"
            )


@dataclass(frozen=True)
class SpanAnnotation:
    """Critical substrings extracted from an answer."""

    spans: tuple[str, ...] = ()


def build_classifier_prefix(question: str, partial_response: Sequence[str]) -> str:
    """Render the classification prompt for an incomplete response."""
    return f"Question: {question} Answer: {' '.join(partial_response)}"


_TOKEN_RE = re.compile(r"\S+")


def _token_offsets(text: str) -> list[tuple[str, int, int]]:
    return [(m.group(0), m.start(), m.end()) for m in _TOKEN_RE.finditer(text)]


def _span_occurrences(text: str, span: str) -> list[tuple[int, int]]:
    occurrences = []
    start = text.find(span)
    while start != -1:
        occurrences.append((start, start + len(span)))
        start = text.find(span, start + 1)
    return occurrences


def map_spans_to_labels(
    answer_text: str,
    spans: SpanAnnotation,
    question: str = "",
) -> CriticalTokenInstance:
    """Project span annotations onto whitespace tokens.

    Every token whose character range overlaps any occurrence of any span is
    labeled Yes; matching is case-sensitive exact substring over all
    occurrences. A span that does not occur in the answer is skipped with a
    warning rather than failing the instance.
    """
    tokens = _token_offsets(answer_text)
    ranges: list[tuple[int, int]] = []
    for span in spans.spans:
        found = _span_occurrences(answer_text, span) if span else []
        if not found:
            logger.warning("span %r not found in answer; skipping", span)
            continue
        ranges.extend(found)
    labels = []
    for _, tok_start, tok_end in tokens:
        hit = any(tok_start < span_end and span_start < tok_end for span_start, span_end in ranges)
        labels.append(DecisionLabel.YES if hit else DecisionLabel.NO)
    return CriticalTokenInstance(
        question=question,
        answer_tokens=tuple(t for t, _, _ in tokens),
        labels=tuple(labels),
    )


class CriticalTokenClassifier(ABC):
    """Decides whether a response token is critical, deterministically."""

    mode: str = ClassifierMode.CT

    @abstractmethod
    def decide(self, question: str, partial_response_tokens: Sequence[str]) -> DecisionLabel:
        ...


class ConstantClassifier(CriticalTokenClassifier):
    """Always answers the same label; the degenerate router used in equivalence tests."""

    def __init__(self, label: DecisionLabel, mode: str = ClassifierMode.CT):
        self.label = label
        self.mode = ClassifierMode.validate(mode)

    def decide(self, question: str, partial_response_tokens: Sequence[str]) -> DecisionLabel:
        return self.label


@dataclass(frozen=True)
class HeuristicRules:
    """Rule set for the reference classifier; all parts can be switched off."""

    digit_tokens: bool = True
    capitalized_midsentence: bool = True
    continuation_tokens: frozenset[str] = frozenset()
    sentence_end_chars: str = ".!?"


class HeuristicClassifier(CriticalTokenClassifier):
    """CT-mode reference classifier over surface features of the last token.

    Fires on tokens containing a digit and on capitalized tokens that do not
    start a sentence; a configurable continuation set extends a firing token
    by one position. Only the last token and one token of left context are
    consulted, never future tokens.
    """

    def __init__(self, rules: HeuristicRules = HeuristicRules()):
        self.rules = rules
        self.mode = ClassifierMode.CT

    def _base_fire(self, tokens: Sequence[str], idx: int) -> bool:
        token = tokens[idx]
        if self.rules.digit_tokens and any(ch.isdigit() for ch in token):
            return True
        if self.rules.capitalized_midsentence and token[:1].isupper():
            mid_sentence = idx > 0 and not tokens[idx - 1].endswith(
                tuple(self.rules.sentence_end_chars)
            )
            if mid_sentence:
                return True
        return False

    def decide(self, question: str, partial_response_tokens: Sequence[str]) -> DecisionLabel:
        if not partial_response_tokens:
            return DecisionLabel.NO
        idx = len(partial_response_tokens) - 1
        if self._base_fire(partial_response_tokens, idx):
            return DecisionLabel.YES
        token = partial_response_tokens[idx]
        if (
            token.lower() in self.rules.continuation_tokens
            and idx > 0
            and self._base_fire(partial_response_tokens, idx - 1)
        ):
            return DecisionLabel.YES
        return DecisionLabel.NO


@dataclass(frozen=True)
class TrainConfig:
    mode: str = ClassifierMode.CT
    window: int = 2
    learning_rate: float = 1.0
    epochs: int = 200
    l2: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        ClassifierMode.validate(self.mode)
        if self.window < 0 or self.epochs < 1 or self.learning_rate <= 0 or self.l2 < 0:
            raise ValueError("invalid training configuration")


class FeatureClassifier(CriticalTokenClassifier):
    """Log-linear per-token classifier over sparse surface features.

    Trained by minimizing the negative log-likelihood of labels given
    prefixes. Prediction runs left to right; the previous-label feature uses
    the classifier's own prior predictions, so decisions are deterministic.
    """

    def __init__(self, feature_weights: Mapping[str, float], mode: str, window: int):
        self.weights = dict(feature_weights)
        self.mode = ClassifierMode.validate(mode)
        self.window = int(window)
        # Per-epoch training losses; populated by train_feature_classifier.
        self.training_loss: tuple[float, ...] = ()

    def _features(self, tokens: Sequence[str], idx: int, prev_label: DecisionLabel | None) -> list[str]:
        """Features for deciding the label at position ``idx``.

        In CT mode the token at ``idx`` is visible; in NT mode only positions
        before ``idx`` are.
        """
        feats = ["__bias__"]
        if self.mode == ClassifierMode.CT:
            token = tokens[idx]
            feats.append(f"tok={token.lower()}")
            if any(ch.isdigit() for ch in token):
                feats.append("has_digit")
            if token[:1].isupper():
                feats.append("capitalized")
            if token.isupper() and len(token) > 1:
                feats.append("all_caps")
        if idx == 0:
            feats.append("first_token")
        for back in range(1, self.window + 1):
            j = idx - back
            if j >= 0:
                feats.append(f"prev{back}={tokens[j].lower()}")
        if idx > 0 and tokens[idx - 1].endswith((".", "!", "?")):
            feats.append("prev_ends_sentence")
        if prev_label is not None:
            feats.append("prev_label_yes" if prev_label is DecisionLabel.YES else "prev_label_no")
        return feats

    def _score(self, feats: Sequence[str]) -> float:
        return sum(self.weights.get(f, 0.0) for f in feats)

    def predict_sequence(self, question: str, tokens: Sequence[str]) -> list[DecisionLabel]:
        """Left-to-right labels for a full token sequence."""
        labels: list[DecisionLabel] = []
        for idx in range(len(tokens)):
            prev = labels[idx - 1] if idx > 0 else None
            score = self._score(self._features(tokens, idx, prev))
            labels.append(DecisionLabel.YES if score > 0 else DecisionLabel.NO)
        return labels

    def decide(self, question: str, partial_response_tokens: Sequence[str]) -> DecisionLabel:
        tokens = list(partial_response_tokens)
        if self.mode == ClassifierMode.CT:
            if not tokens:
                return DecisionLabel.NO
            return self.predict_sequence(question, tokens)[-1]
        # NT: predict the label of the not-yet-seen next position.
        prev_labels = self.predict_sequence(question, tokens)
        prev = prev_labels[-1] if prev_labels else None
        idx = len(tokens)
        score = self._score(self._features(tokens + [""], idx, prev))
        return DecisionLabel.YES if score > 0 else DecisionLabel.NO

    def to_document(self) -> dict:
        return {
            "format": CLASSIFIER_FORMAT,
            "mode": self.mode,
            "window": self.window,
            "weights": dict(sorted(self.weights.items())),
        }

    @classmethod
    def from_document(cls, doc: Mapping) -> "FeatureClassifier":
        if doc.get("format") != CLASSIFIER_FORMAT:
            raise ValueError(f"expected format {CLASSIFIER_FORMAT!r}, got {doc.get('format')!r}")
        return cls(doc["weights"], doc["mode"], doc["window"])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_document(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "FeatureClassifier":
        return cls.from_document(json.loads(Path(path).read_text(encoding="utf-8")))


def train_feature_classifier(
    train: Sequence[CriticalTokenInstance], config: TrainConfig = TrainConfig()
) -> FeatureClassifier:
    """Fit the log-linear classifier by full-batch gradient descent.

    The step size is halved whenever a step would increase the loss, so the
    per-epoch training loss is non-increasing. Previous-label features use the
    gold labels during training (teacher forcing).
    """
    if not train:
        raise ValueError("training set must be non-empty")

    probe = FeatureClassifier({}, config.mode, config.window)
    feature_lists: list[list[str]] = []
    targets: list[float] = []
    for inst in train:
        tokens = list(inst.answer_tokens)
        for idx, label in enumerate(inst.labels):
            prev = inst.labels[idx - 1] if idx > 0 else None
            if config.mode == ClassifierMode.CT:
                feats = probe._features(tokens, idx, prev)
            else:
                feats = probe._features(tokens[:idx] + [""], idx, prev)
            feature_lists.append(feats)
            targets.append(1.0 if label is DecisionLabel.YES else 0.0)

    y = np.asarray(targets)
    if y.min() == y.max():
        raise ValueError("training data is single-class; nothing to separate")

    names = sorted({f for feats in feature_lists for f in feats})
    index = {name: i for i, name in enumerate(names)}
    rows = [np.asarray([index[f] for f in feats], dtype=np.intp) for feats in feature_lists]
    w = np.zeros(len(names), dtype=np.float64)

    def loss_and_grad(weights: np.ndarray) -> tuple[float, np.ndarray]:
        scores = np.asarray([weights[r].sum() for r in rows])
        # Numerically stable log-loss: log(1 + e^-|s|) + max(s, 0) - s*y.
        loss = float(np.mean(np.logaddexp(0.0, scores) - scores * y))
        probs = 1.0 / (1.0 + np.exp(-scores))
        grad = np.zeros_like(weights)
        errs = (probs - y) / len(y)
        for r, e in zip(rows, errs):
            grad[r] += e
        if config.l2 > 0:
            loss += 0.5 * config.l2 * float(weights @ weights)
            grad += config.l2 * weights
        return loss, grad

    step = config.learning_rate
    loss, grad = loss_and_grad(w)
    history = [loss]
    for _ in range(config.epochs):
        while True:
            candidate = w - step * grad
            new_loss, new_grad = loss_and_grad(candidate)
            if new_loss <= loss or step < 1e-12:
                break
            step /= 2.0
        if new_loss > loss:
            break
        w, loss, grad = candidate, new_loss, new_grad
        history.append(loss)
        if float(np.abs(grad).max()) < 1e-10:
            break

    trained = FeatureClassifier(
        {name: float(w[index[name]]) for name in names if w[index[name]] != 0.0},
        config.mode,
        config.window,
    )
    trained.training_loss = tuple(history)
    return trained


@dataclass(frozen=True)
class ClassifierMetrics:
    """All/Switch metrics in percent, plus the gold Yes fraction.

    Switch metrics are restricted to gold No-to-Yes boundaries (position 0
    counts when its gold label is Yes) and are None when the test set has no
    such positions.
    """

    all_yes_f1: float
    all_accuracy: float
    switch_yes_f1: float | None
    switch_accuracy: float | None
    yes_rate: float


def _yes_f1(gold: Sequence[DecisionLabel], pred: Sequence[DecisionLabel]) -> float:
    tp = sum(1 for g, p in zip(gold, pred) if g is DecisionLabel.YES and p is DecisionLabel.YES)
    fp = sum(1 for g, p in zip(gold, pred) if g is DecisionLabel.NO and p is DecisionLabel.YES)
    fn = sum(1 for g, p in zip(gold, pred) if g is DecisionLabel.YES and p is DecisionLabel.NO)
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 100.0 * 2 * precision * recall / (precision + recall)


def _accuracy(gold: Sequence[DecisionLabel], pred: Sequence[DecisionLabel]) -> float:
    return 100.0 * sum(1 for g, p in zip(gold, pred) if g is p) / len(gold)


def evaluate_classifier(
    classifier: CriticalTokenClassifier, test: Sequence[CriticalTokenInstance]
) -> ClassifierMetrics:
    """Score a classifier over every token position of a labeled test set."""
    if not test:
        raise ValueError("test set must be non-empty")
    gold: list[DecisionLabel] = []
    pred: list[DecisionLabel] = []
    switch_idx: list[int] = []
    offset = 0
    for inst in test:
        tokens = list(inst.answer_tokens)
        for idx, label in enumerate(inst.labels):
            if classifier.mode == ClassifierMode.CT:
                decision = classifier.decide(inst.question, tokens[: idx + 1])
            else:
                decision = classifier.decide(inst.question, tokens[:idx])
            gold.append(label)
            pred.append(decision)
            if label is DecisionLabel.YES and (
                idx == 0 or inst.labels[idx - 1] is DecisionLabel.NO
            ):
                switch_idx.append(offset + idx)
        offset += len(tokens)

    switch_gold = [gold[i] for i in switch_idx]
    switch_pred = [pred[i] for i in switch_idx]
    return ClassifierMetrics(
        all_yes_f1=_yes_f1(gold, pred),
        all_accuracy=_accuracy(gold, pred),
        switch_yes_f1=_yes_f1(switch_gold, switch_pred) if switch_idx else None,
        switch_accuracy=_accuracy(switch_gold, switch_pred) if switch_idx else None,
        yes_rate=sum(1 for g in gold if g is DecisionLabel.YES) / len(gold),
    )


@dataclass(frozen=True)
class GeneratorSpec:
    """Model plus templates that produce questions and answers for a document.

    ``question_template`` receives {document} and {index}; one question is
    generated per index. ``answer_template`` receives {question}.
    """

    model: LanguageModel
    question_template: str = "Document: {document} Write factual question {index} :"
    answer_template: str = "Question: {question} Answer:"
    questions_per_document: int = 5
    max_tokens: int = 64


@dataclass(frozen=True)
class ExtractorSpec:
    """Model plus the template asking for critical spans as a JSON array."""

    model: LanguageModel
    template: str = "Answer: {answer} Critical spans as JSON:"
    max_tokens: int = 64


@dataclass
class DatasetBuildReport:
    instances: list[CriticalTokenInstance] = field(default_factory=list)
    skipped: int = 0


def _greedy_completion(model: LanguageModel, prompt: str, max_tokens: int) -> str:
    """Greedy rollout used by the pipeline; stops at the model's stop tokens."""
    vocab = model.vocabulary()
    tokenizer = WhitespaceTokenizer(vocab)
    context = tokenizer.encode(prompt)
    out: list[int] = []
    for _ in range(max_tokens):
        token = argmax(model.next_distribution(context))
        if token in vocab.stop_ids:
            break
        context.append(token)
        out.append(token)
    return tokenizer.decode(out)


def generate_dataset(
    documents: Sequence[str],
    generator: GeneratorSpec,
    extractor: ExtractorSpec,
) -> DatasetBuildReport:
    """Run the annotation pipeline: questions, answers, JSON spans, labels.

    Answer correctness is never checked; the labels only mark which tokens are
    critical. An extractor response that fails to parse as a JSON array of
    strings skips that instance and increments the skipped count.
    """
    report = DatasetBuildReport()
    for document in documents:
        for q_index in range(generator.questions_per_document):
            question = _greedy_completion(
                generator.model,
                generator.question_template.format(document=document, index=q_index + 1),
                generator.max_tokens,
            ).strip()
            if not question:
                logger.warning("generator produced an empty question; skipping")
                report.skipped += 1
                continue
            answer = _greedy_completion(
                generator.model,
                generator.answer_template.format(question=question),
                generator.max_tokens,
            ).strip()
            raw_spans = _greedy_completion(
                extractor.model,
                extractor.template.format(answer=answer),
                extractor.max_tokens,
            )
            try:
                parsed = json.loads(raw_spans)
                if not isinstance(parsed, list) or not all(isinstance(s, str) for s in parsed):
                    raise ValueError("expected a JSON array of strings")
            except ValueError as exc:
                logger.warning("unparseable span extraction %r: %s", raw_spans, exc)
                report.skipped += 1
                continue
            report.instances.append(
                map_spans_to_labels(answer, SpanAnnotation(tuple(parsed)), question=question)
            )
    return report


def save_instances(instances: Sequence[CriticalTokenInstance], path: str | Path) -> None:
    """Write instances as JSONL: {"question", "tokens", "labels" (0/1)}."""
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(
                json.dumps(
                    {
                        "question": inst.question,
                        "tokens": list(inst.answer_tokens),
                        "labels": [1 if l is DecisionLabel.YES else 0 for l in inst.labels],
                    }
                )
                + "\n"
            )


def load_instances(path: str | Path) -> list[CriticalTokenInstance]:
    instances = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
                instances.append(
                    CriticalTokenInstance(
                        question=doc["question"],
                        answer_tokens=tuple(doc["tokens"]),
                        labels=tuple(
                            DecisionLabel.YES if v else DecisionLabel.NO for v in doc["labels"]
                        ),
                    )
                )
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: invalid instance line: {exc}") from exc
    return instances


class RemoteClassifier(CriticalTokenClassifier):
    """Client for the POST /v1/classify endpoint on the model-server protocol."""

    def __init__(
        self,
        endpoint: str,
        mode: str = ClassifierMode.CT,
        timeout: float = 10.0,
        session: requests.Session | None = None,
    ):
        self.endpoint = endpoint.rstrip("/")
        self.mode = ClassifierMode.validate(mode)
        self.timeout = timeout
        self._session = session or requests.Session()

    def decide(self, question: str, partial_response_tokens: Sequence[str]) -> DecisionLabel:
        prefix = build_classifier_prefix(question, partial_response_tokens)
        resp = self._session.post(
            f"{self.endpoint}/v1/classify", json={"prefix": prefix}, timeout=self.timeout
        )
        if resp.status_code != 200:
            raise ProtocolError(f"classifier endpoint returned HTTP {resp.status_code}")
        try:
            return DecisionLabel.from_string(resp.json()["label"])
        except (ValueError, KeyError, TypeError) as exc:
            raise ProtocolError(f"malformed classify response: {exc}") from exc
