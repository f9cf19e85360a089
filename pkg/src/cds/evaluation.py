"""Answer recall, self-BLEU diversity, bootstrap variance, and experiment runs."""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "QARecord",
    "EvalReport",
    "ExperimentConfig",
    "answer_recall",
    "self_bleu",
    "bootstrap_stddev",
    "run_experiment",
    "load_qa_records",
    "write_summary_csv",
    "SUMMARY_COLUMNS",
]

# Zero n-gram precisions are floored at this value before the geometric mean,
# so short samples still get a defined score.
BLEU_SMOOTHING_FLOOR = 1e-9

#: Diversity protocol preset: samples per prompt and prompt count.
DIVERSITY_SAMPLES_PER_PROMPT = 100
DIVERSITY_PROMPTS = 15


@dataclass(frozen=True)
class QARecord:
    """A question plus every acceptable gold answer string."""

    question: str
    gold_aliases: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.gold_aliases or any(not a.strip() for a in self.gold_aliases):
            raise ValueError("gold aliases must be non-empty and non-blank")


@dataclass(frozen=True)
class EvalReport:
    accuracy: float
    n: int
    per_item: tuple[bool, ...]
    bootstrap_stddev: float | None = None
    errors: int = 0


def _normalize(text: str) -> str:
    return " ".join(text.split()).lower()


def answer_recall(response: str, record: QARecord) -> bool:
    """True iff any gold alias occurs in the response.

    Matching is case-insensitive substring after whitespace normalization;
    punctuation is preserved.
    """
    haystack = _normalize(response)
    return any(_normalize(alias) in haystack for alias in record.gold_aliases)


def _ngram_counts(tokens: Sequence[str], order: int) -> Counter:
    return Counter(tuple(tokens[i : i + order]) for i in range(len(tokens) - order + 1))


def _bleu(candidate: Sequence[str], references: Sequence[Sequence[str]], max_order: int) -> float:
    """Sentence BLEU with uniform 1..max_order weights and multi-reference clipping."""
    if len(candidate) == 0:
        return 0.0
    log_precision_sum = 0.0
    for order in range(1, max_order + 1):
        cand_counts = _ngram_counts(candidate, order)
        max_ref: Counter = Counter()
        for ref in references:
            for gram, count in _ngram_counts(ref, order).items():
                if count > max_ref[gram]:
                    max_ref[gram] = count
        correct = sum(min(count, max_ref[gram]) for gram, count in cand_counts.items())
        total = max(len(candidate) - order + 1, 0)
        precision = correct / total if total > 0 else 0.0
        log_precision_sum += math.log(max(precision, BLEU_SMOOTHING_FLOOR))
    # Brevity penalty against the closest reference length (ties break shorter).
    c = len(candidate)
    r = min((len(ref) for ref in references), key=lambda L: (abs(L - c), L))
    brevity = 1.0 if c >= r else math.exp(1.0 - r / c)
    return brevity * math.exp(log_precision_sum / max_order)


def self_bleu(samples: Sequence[str], n: int) -> float:
    """Mean leave-one-out BLEU-n over whitespace tokens; higher means less diverse."""
    if len(samples) < 2:
        raise ValueError(f"self-BLEU needs at least 2 samples, got {len(samples)}")
    if n < 1:
        raise ValueError(f"n-gram order must be >= 1, got {n}")
    tokenized = [s.split() for s in samples]
    scores = [
        _bleu(tokenized[i], tokenized[:i] + tokenized[i + 1 :], n)
        for i in range(len(tokenized))
    ]
    return float(sum(scores) / len(scores))


def bootstrap_stddev(
    per_item: Sequence[bool], iterations: int, rng: np.random.Generator
) -> float:
    """Standard deviation of the resampled-with-replacement mean accuracy."""
    if not per_item:
        raise ValueError("per_item must be non-empty")
    if iterations < 100:
        raise ValueError(f"need at least 100 bootstrap iterations, got {iterations}")
    values = np.asarray(per_item, dtype=np.float64)
    n = values.size
    idx = rng.integers(0, n, size=(iterations, n))
    means = values[idx].mean(axis=1)
    return float(means.std())


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    bootstrap_iterations: int = 1000  # 0 disables the stddev estimate
    parallel: int = 1
    out_dir: str | Path | None = None
    name: str = "experiment"


def run_experiment(
    dataset: Sequence[QARecord],
    runner: Callable[[QARecord, int], str],
    config: ExperimentConfig = ExperimentConfig(),
) -> EvalReport:
    """Generate one response per record, score answer recall, and aggregate.

    ``runner(record, seed)`` returns the response text; the per-record seed is
    ``config.seed + index`` so runs are reproducible item by item. Items whose
    runner raises are excluded from accuracy and counted as errors. Per-item
    results are written in dataset order when an output directory is set.
    """
    if not dataset:
        raise ValueError("dataset must be non-empty")

    def one(item: tuple[int, QARecord]) -> tuple[int, str | None, str | None]:
        index, record = item
        try:
            return index, runner(record, config.seed + index), None
        except Exception as exc:  # noqa: BLE001 - errored items are reported, not fatal
            return index, None, f"{type(exc).__name__}: {exc}"

    items = list(enumerate(dataset))
    if config.parallel > 1:
        with ThreadPoolExecutor(max_workers=config.parallel) as pool:
            outcomes = list(pool.map(one, items))
    else:
        outcomes = [one(item) for item in items]

    per_item: list[bool] = []
    rows: list[dict] = []
    errors = 0
    for (index, record), (_, response, error) in zip(items, outcomes):
        if error is not None:
            errors += 1
            rows.append({"index": index, "question": record.question, "error": error})
            continue
        correct = answer_recall(response, record)
        per_item.append(correct)
        rows.append(
            {
                "index": index,
                "question": record.question,
                "response": response,
                "correct": correct,
            }
        )

    accuracy = sum(per_item) / len(per_item) if per_item else 0.0
    stddev = None
    if config.bootstrap_iterations and per_item:
        stddev = bootstrap_stddev(
            per_item, config.bootstrap_iterations, np.random.default_rng(config.seed)
        )
    report = EvalReport(
        accuracy=accuracy,
        n=len(per_item),
        per_item=tuple(per_item),
        bootstrap_stddev=stddev,
        errors=errors,
    )

    if config.out_dir is not None:
        out_dir = Path(config.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / f"{config.name}.items.jsonl", "w", encoding="utf-8") as fh:
            for row in rows:
                fh.write(json.dumps(row) + "\n")
        summary = {
            "name": config.name,
            "accuracy": report.accuracy,
            "n": report.n,
            "errors": report.errors,
            "bootstrap_stddev": report.bootstrap_stddev,
        }
        (out_dir / f"{config.name}.summary.json").write_text(
            json.dumps(summary, indent=2) + "\n", encoding="utf-8"
        )
    return report


def load_qa_records(path: str | Path) -> list[QARecord]:
    """Read a QA dataset: JSONL with {"question": str, "answers": [str...]}."""
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
                records.append(
                    QARecord(question=doc["question"], gold_aliases=tuple(doc["answers"]))
                )
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: invalid dataset line: {exc}") from exc
    return records


SUMMARY_COLUMNS = [
    "strategy",
    "dataset",
    "accuracy",
    "stddev",
    "critical_fraction",
    "cost_total",
    "shots",
]


def write_summary_csv(path: str | Path, rows: Iterable[dict]) -> None:
    """Write summary rows for plotting; unknown keys are ignored."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
