"""Classifier pipeline: span mapping, heuristic rules, training, metrics, dataset build."""

from __future__ import annotations

import json
import random
from typing import Sequence

import pytest
from hypothesis import given
from hypothesis import strategies as st

from cds.classifier import (
    ClassifierMode,
    ConstantClassifier,
    CriticalTokenClassifier,
    CriticalTokenInstance,
    DecisionLabel,
    ExtractorSpec,
    FeatureClassifier,
    GeneratorSpec,
    HeuristicClassifier,
    HeuristicRules,
    SpanAnnotation,
    TrainConfig,
    build_classifier_prefix,
    evaluate_classifier,
    generate_dataset,
    load_instances,
    map_spans_to_labels,
    save_instances,
    train_feature_classifier,
)
from fixture_models import pipeline_model

YES, NO = DecisionLabel.YES, DecisionLabel.NO


def labels(pattern: str) -> tuple[DecisionLabel, ...]:
    """'YNNY' -> (YES, NO, NO, YES)."""
    return tuple(YES if ch == "Y" else NO for ch in pattern)


def span_label_oracle(answer_text: str, spans: Sequence[str]) -> list[DecisionLabel]:
    """Character-coverage oracle: mark covered chars, then label covered tokens."""
    covered = set()
    for span in spans:
        if not span:
            continue
        start = answer_text.find(span)
        while start != -1:
            covered.update(range(start, start + len(span)))
            start = answer_text.find(span, start + 1)
    result = []
    pos = 0
    for token in answer_text.split():
        start = answer_text.index(token, pos)
        end = start + len(token)
        pos = end
        result.append(YES if any(i in covered for i in range(start, end)) else NO)
    return result


class TestBuildClassifierPrefix:
    def test_empty_response(self):
        assert build_classifier_prefix("Who?", []) == "Question: Who? Answer: "

    def test_two_token_response(self):
        got = build_classifier_prefix("Who?", ["Mount", "Everest"])
        assert got == "Question: Who? Answer: Mount Everest"

    def test_pinned_multi_token_render(self):
        got = build_classifier_prefix(
            "how tall is it ?", ["it", "rises", "to", "8849", "m"]
        )
        assert got == "Question: how tall is it ? Answer: it rises to 8849 m"


class TestMapSpansToLabels:
    def test_no_spans_all_no(self):
        inst = map_spans_to_labels("all quiet here", SpanAnnotation())
        assert inst.labels == labels("NNN")

    def test_single_token_span(self):
        inst = map_spans_to_labels("height is 8849 m", SpanAnnotation(("8849",)))
        assert inst.answer_tokens == ("height", "is", "8849", "m")
        assert inst.labels == labels("NNYN")

    def test_repeated_span_labels_all_occurrences(self):
        text = "Everest is Everest indeed"
        inst = map_spans_to_labels(text, SpanAnnotation(("Everest",)))
        assert inst.labels == labels("YNYN")

    def test_multi_token_span_and_partial_overlap(self):
        text = "the peak of Mount Everest stands tall"
        inst = map_spans_to_labels(text, SpanAnnotation(("Mount Everest",)))
        assert inst.labels == labels("NNNYYNN")
        # A span covering only part of a token still marks the token.
        inst = map_spans_to_labels("boiling at 100C now", SpanAnnotation(("100",)))
        assert inst.labels == labels("NNYN")

    def test_missing_span_is_skipped_with_warning(self, caplog):
        with caplog.at_level("WARNING"):
            inst = map_spans_to_labels("nothing here", SpanAnnotation(("absent",)))
        assert inst.labels == labels("NN")
        assert any("absent" in rec.message for rec in caplog.records)

    def test_pinned_paragraph_matches_offset_oracle(self):
        text = (
            "The summit lies at 8849 meters in the Himalaya range near Nepal "
            "and the Himalaya range is vast"
        )
        spans = ("8849", "Himalaya range", "Nepal")
        inst = map_spans_to_labels(text, SpanAnnotation(spans))
        assert list(inst.labels) == span_label_oracle(text, spans)
        assert inst.labels == labels("NNNNYNNNYYNYNNYYNN")

    @given(
        token_count=st.integers(1, 12),
        seed=st.integers(0, 10_000),
    )
    def test_randomized_fixtures_match_oracle(self, token_count, seed):
        rng = random.Random(seed)
        words = [rng.choice(["alpha", "beta", "42", "Paris", "x1", "go"]) for _ in range(token_count)]
        text = " ".join(words)
        pool = words + ["alpha beta", "not present", "4", "Par"]
        spans = tuple(rng.choice(pool) for _ in range(rng.randint(0, 3)))
        inst = map_spans_to_labels(text, SpanAnnotation(spans))
        assert list(inst.labels) == span_label_oracle(text, spans)
        assert len(inst.labels) == len(inst.answer_tokens)


HAND_LABELED_ANSWER = (
    "The peak of Mount Everest rises to 8849 meters above sea level. "
    "It was first climbed in 1953 by Edmund Hillary and Tenzing Norgay. "
    "The mountain sits on the border of Nepal and China at roughly 27.99 "
    "degrees north. About 800 people attempt the climb each year via routes of"
)
# Hand-applied default rules: digits fire; capitalized tokens fire unless they
# open a sentence.
HAND_LABELS = labels(
    "NNNYYNNYNNNN"  # The peak of Mount Everest rises to 8849 meters above sea level.
    "NNNNNYNYYNYY"  # It was first climbed in 1953 by Edmund Hillary and Tenzing Norgay.
    "NNNNNNNYNYNN"  # The mountain sits on the border of Nepal and China at roughly
    "YNN"           # 27.99 degrees north.
    "NYNNNNNNNNN"   # About 800 people attempt the climb each year via routes of
)


class TestHeuristicClassifier:
    def test_digit_token_fires(self):
        clf = HeuristicClassifier()
        assert clf.decide("q", ["rises", "to", "8849"]) is YES

    def test_lowercase_midsentence_does_not_fire(self):
        clf = HeuristicClassifier()
        assert clf.decide("q", ["rises", "to", "the"]) is NO

    def test_sentence_start_capital_does_not_fire(self):
        clf = HeuristicClassifier()
        assert clf.decide("q", ["The"]) is NO
        assert clf.decide("q", ["done.", "Then"]) is NO

    def test_midsentence_capital_fires(self):
        clf = HeuristicClassifier()
        assert clf.decide("q", ["meet", "Paris"]) is YES

    def test_continuation_rule(self):
        rules = HeuristicRules(continuation_tokens=frozenset({"of"}))
        clf = HeuristicClassifier(rules)
        assert clf.decide("q", ["the", "Republic", "of"]) is YES
        assert clf.decide("q", ["the", "border", "of"]) is NO

    def test_empty_response(self):
        assert HeuristicClassifier().decide("q", []) is NO

    def test_hand_labeled_fifty_token_fixture(self):
        tokens = HAND_LABELED_ANSWER.split()
        assert len(tokens) == 50
        clf = HeuristicClassifier()
        got = [clf.decide("q", tokens[: i + 1]) for i in range(len(tokens))]
        assert tuple(got) == HAND_LABELS

    def test_depends_only_on_bounded_left_context(self):
        clf = HeuristicClassifier(HeuristicRules(continuation_tokens=frozenset({"of"})))
        base = ["we", "saw", "Mount", "of"]
        for junk_prefix in ([], ["Zebra."], ["10", "20", "30"]):
            padded = junk_prefix + base
            assert clf.decide("q", padded) == clf.decide("q", base)


def digit_instances(count: int, seed: int = 0) -> list[CriticalTokenInstance]:
    """Instances whose gold label is exactly "token contains a digit"."""
    rng = random.Random(seed)
    plain = ["alpha", "beta", "gamma", "delta", "word", "other"]
    num = ["8849", "1953", "27", "v2", "800"]
    instances = []
    for i in range(count):
        tokens = [rng.choice(plain + num) for _ in range(rng.randint(4, 10))]
        instances.append(
            CriticalTokenInstance(
                question=f"q{i}",
                answer_tokens=tuple(tokens),
                labels=tuple(
                    YES if any(c.isdigit() for c in t) else NO for t in tokens
                ),
            )
        )
    return instances


class TestTrainFeatureClassifier:
    def test_separable_digit_fixture_reaches_full_accuracy(self):
        train = digit_instances(30)
        clf = train_feature_classifier(train, TrainConfig(epochs=300))
        metrics = evaluate_classifier(clf, train)
        assert metrics.all_accuracy == 100.0

    def test_loss_history_non_increasing(self):
        data = [
            CriticalTokenInstance("q", ("a", "8849", "b", "2"), labels("NYNY"))
        ]
        clf = train_feature_classifier(data, TrainConfig(epochs=50))
        assert clf.training_loss[-1] < clf.training_loss[0]
        assert all(
            later <= earlier + 1e-6
            for earlier, later in zip(clf.training_loss, clf.training_loss[1:])
        )

    def test_inverted_labels_invert_the_boundary(self):
        train = digit_instances(20, seed=3)
        inverted = [
            CriticalTokenInstance(
                inst.question,
                inst.answer_tokens,
                tuple(NO if l is YES else YES for l in inst.labels),
            )
            for inst in train
        ]
        clf = train_feature_classifier(train, TrainConfig(epochs=200))
        clf_inv = train_feature_classifier(inverted, TrainConfig(epochs=200))
        m = evaluate_classifier(clf, train)
        m_inv = evaluate_classifier(clf_inv, inverted)
        assert m.all_yes_f1 == pytest.approx(m_inv.all_yes_f1, abs=1e-9)
        assert m.all_accuracy == pytest.approx(m_inv.all_accuracy, abs=1e-9)
        for inst in train[:5]:
            tokens = list(inst.answer_tokens)
            forward = clf.predict_sequence(inst.question, tokens)
            backward = clf_inv.predict_sequence(inst.question, tokens)
            assert all(f is not b for f, b in zip(forward, backward))

    def test_empty_training_set_rejected(self):
        with pytest.raises(ValueError):
            train_feature_classifier([])

    def test_single_class_data_rejected(self):
        data = [CriticalTokenInstance("q", ("a", "b"), labels("NN"))]
        with pytest.raises(ValueError):
            train_feature_classifier(data)

    def test_training_is_deterministic(self):
        train = digit_instances(10, seed=5)
        first = train_feature_classifier(train, TrainConfig(epochs=80))
        second = train_feature_classifier(train, TrainConfig(epochs=80))
        assert first.weights == second.weights

    def test_nt_mode_trains_and_predicts(self):
        # Gold: the token after "in" is critical (year pattern).
        instances = [
            CriticalTokenInstance("q", ("built", "in", "1953", "say"), labels("NNYN")),
            CriticalTokenInstance("q", ("made", "in", "1851", "too"), labels("NNYN")),
            CriticalTokenInstance("q", ("plain", "words", "only", "here"), labels("NNNN")),
        ] * 5
        clf = train_feature_classifier(instances, TrainConfig(mode=ClassifierMode.NT, epochs=300))
        assert clf.mode == ClassifierMode.NT
        assert clf.decide("q", ["built", "in"]) is YES
        assert clf.decide("q", ["plain", "words"]) is NO

    def test_save_load_round_trip(self, tmp_path):
        clf = train_feature_classifier(digit_instances(10), TrainConfig(epochs=50))
        path = tmp_path / "clf.json"
        clf.save(path)
        loaded = FeatureClassifier.load(path)
        assert loaded.weights == clf.weights
        assert loaded.mode == clf.mode
        tokens = ["x", "8849", "y"]
        assert loaded.decide("q", tokens) == clf.decide("q", tokens)


class GoldClassifier(CriticalTokenClassifier):
    """Replays stored gold labels; the perfect-classifier oracle."""

    def __init__(self, gold: dict[str, tuple[DecisionLabel, ...]]):
        self.gold = gold
        self.mode = ClassifierMode.CT

    def decide(self, question, partial_response_tokens):
        return self.gold[question][len(partial_response_tokens) - 1]


class ScriptedClassifier(CriticalTokenClassifier):
    """Replays an arbitrary fixed prediction sequence per question."""

    def __init__(self, predictions: dict[str, tuple[DecisionLabel, ...]]):
        self.predictions = predictions
        self.mode = ClassifierMode.CT

    def decide(self, question, partial_response_tokens):
        return self.predictions[question][len(partial_response_tokens) - 1]


class TestEvaluateClassifier:
    def test_perfect_classifier_scores_100(self):
        instances = [
            CriticalTokenInstance("q0", ("a", "8849", "c"), labels("NYN")),
            CriticalTokenInstance("q1", ("Paris", "is", "big"), labels("YNN")),
        ]
        clf = GoldClassifier({i.question: i.labels for i in instances})
        metrics = evaluate_classifier(clf, instances)
        assert metrics.all_yes_f1 == 100.0
        assert metrics.all_accuracy == 100.0
        assert metrics.switch_yes_f1 == 100.0
        assert metrics.switch_accuracy == 100.0

    def test_constant_no_on_eleven_percent_yes(self):
        # 100 tokens, 11 gold Yes: accuracy 89%, Yes-F1 reported as 0.
        gold = labels("Y" * 11 + "N" * 89)
        inst = CriticalTokenInstance("q", tuple(f"t{i}" for i in range(100)), gold)
        metrics = evaluate_classifier(ConstantClassifier(NO), [inst])
        assert metrics.all_accuracy == pytest.approx(89.0)
        assert metrics.all_yes_f1 == 0.0
        assert metrics.yes_rate == pytest.approx(0.11)

    def test_switch_restricted_to_no_to_yes_boundaries(self):
        # Gold spans: positions 0 (Yes at start) and 3-4; switch set = {0, 3}.
        gold = labels("YNNYYN")
        pred = labels("YNYNYN")
        inst = CriticalTokenInstance("q", tuple("abcdef"), gold)
        clf = ScriptedClassifier({"q": pred})
        metrics = evaluate_classifier(clf, [inst])
        # Switch subset: position 0 (pred Yes), position 3 (pred No).
        assert metrics.switch_accuracy == pytest.approx(50.0)
        # On the subset, TP=1, FN=1, FP=0: precision 1, recall 0.5, F1 2/3.
        assert metrics.switch_yes_f1 == pytest.approx(100 * 2 / 3)

    def test_no_switch_positions_reports_absent(self):
        inst = CriticalTokenInstance("q", ("a", "b"), labels("NN"))
        metrics = evaluate_classifier(ConstantClassifier(NO), [inst])
        assert metrics.switch_yes_f1 is None
        assert metrics.switch_accuracy is None

    def test_pinned_hundred_token_confusion_fixture(self):
        # 100 positions in one instance; confusion counts TP=15, FP=5, FN=10, TN=70.
        gold = labels("Y" * 15 + "Y" * 10 + "N" * 5 + "N" * 70)
        pred = labels("Y" * 15 + "N" * 10 + "Y" * 5 + "N" * 70)
        inst = CriticalTokenInstance("q", tuple(f"t{i}" for i in range(100)), gold)
        metrics = evaluate_classifier(ScriptedClassifier({"q": pred}), [inst])
        # Hand computation: precision 15/20, recall 15/25, F1 = 0.666..; acc 85%.
        assert metrics.all_yes_f1 == pytest.approx(100 * (2 * 0.75 * 0.6) / (0.75 + 0.6))
        assert metrics.all_accuracy == pytest.approx(85.0)
        assert metrics.yes_rate == pytest.approx(0.25)
        # The gold run "YYYY..." has a single switch at position 0, predicted Yes.
        assert metrics.switch_accuracy == pytest.approx(100.0)


class TestGenerateDataset:
    def test_scripted_pipeline_produces_pinned_instances(self, caplog):
        model = pipeline_model()
        generator = GeneratorSpec(model=model, questions_per_document=1)
        extractor = ExtractorSpec(model=model)
        with caplog.at_level("WARNING"):
            report = generate_dataset(["everest", "paris", "tokyo"], generator, extractor)
        assert report.skipped == 1
        assert [
            (i.question, i.answer_tokens, i.labels) for i in report.instances
        ] == [
            ("how tall ?", ("8849", "meters", "high", "exactly"), labels("YNNN")),
            ("where located ?", ("in", "France"), labels("NY")),
        ]

    def test_empty_span_array_gives_all_no(self):
        model = pipeline_model()
        inst = map_spans_to_labels("in France", SpanAnnotation(tuple(json.loads("[]"))))
        assert inst.labels == labels("NN")
        assert model is not None  # pipeline fixture stays importable

    def test_jsonl_round_trip(self, tmp_path):
        instances = [
            CriticalTokenInstance("q0", ("a", "8849"), labels("NY")),
            CriticalTokenInstance("q1", ("Paris",), labels("Y")),
        ]
        path = tmp_path / "data.jsonl"
        save_instances(instances, path)
        assert load_instances(path) == instances

    def test_malformed_jsonl_rejected_with_line_number(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"question": "q", "tokens": ["a"], "labels": [0]}\nnot json\n')
        with pytest.raises(ValueError, match="bad.jsonl:2"):
            load_instances(path)


class TestRemoteClassifier:
    def test_decides_over_the_wire(self):
        from cds.classifier import RemoteClassifier
        from fixture_models import table_model as _tm
        from cds.core import Vocabulary
        from wire_stub import WireStub, serve_stub

        stub = WireStub(_tm(Vocabulary.from_tokens(["x"]), {}))
        stub.classify = lambda prefix: "Yes" if any(c.isdigit() for c in prefix) else "No"
        with serve_stub(stub) as endpoint:
            remote = RemoteClassifier(endpoint)
            assert remote.decide("q", ["rises", "to", "8849"]) is YES
            assert remote.decide("q", ["rises", "to", "the"]) is NO

    def test_malformed_label_is_protocol_error(self):
        from cds.classifier import RemoteClassifier
        from cds.models import ProtocolError
        from fixture_models import table_model as _tm
        from cds.core import Vocabulary
        from wire_stub import WireStub, serve_stub

        stub = WireStub(_tm(Vocabulary.from_tokens(["x"]), {}))
        stub.classify = lambda prefix: "Maybe"
        with serve_stub(stub) as endpoint:
            with pytest.raises(ProtocolError):
                RemoteClassifier(endpoint).decide("q", ["token"])


@given(st.lists(st.sampled_from(["alpha", "8849", "Paris", "the"]), min_size=1, max_size=8))
def test_label_and_token_counts_always_match(tokens):
    text = " ".join(tokens)
    inst = map_spans_to_labels(text, SpanAnnotation(("8849", "Paris")))
    assert len(inst.labels) == len(inst.answer_tokens)
    # Label Yes implies overlap with at least one span occurrence.
    for token, label in zip(inst.answer_tokens, inst.labels):
        if label is YES:
            assert "8849" in token or "Paris" in token
