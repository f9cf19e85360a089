"""Core probability algebra: examples, error contracts, and invariants."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cds.core import (
    MixtureWeights,
    PrefixTriple,
    TokenDistribution,
    Vocabulary,
    argmax,
    entropy,
    mix,
    sample,
    softmax_with_temperature,
)


def softmax_oracle(logits, temperature):
    """Direct evaluation of exp(l/T) normalized, no shifting tricks."""
    raw = [math.exp(l / temperature) for l in logits]
    total = sum(raw)
    return [v / total for v in raw]


class TestSoftmaxWithTemperature:
    def test_uniform_logits(self):
        dist = softmax_with_temperature([0.0, 0.0, 0.0], 1.0)
        assert np.allclose(dist.probs, [1 / 3, 1 / 3, 1 / 3], atol=1e-15)

    def test_analytic_two_logits(self):
        dist = softmax_with_temperature([math.log(2), 0.0], 1.0)
        assert np.allclose(dist.probs, [2 / 3, 1 / 3], atol=1e-15)

    def test_pinned_half_temperature(self):
        # Frozen from softmax_oracle([3.1, -0.4, 0.7], 0.5).
        expected = [0.9909411833267632, 0.0009036213940009269, 0.008155195279235843]
        dist = softmax_with_temperature([3.1, -0.4, 0.7], 0.5)
        assert np.allclose(dist.probs, expected, atol=1e-12)
        assert np.allclose(dist.probs, softmax_oracle([3.1, -0.4, 0.7], 0.5), atol=1e-12)

    @pytest.mark.parametrize("temperature", [0.0, -1.0, math.nan, math.inf])
    def test_bad_temperature_rejected(self, temperature):
        with pytest.raises(ValueError):
            softmax_with_temperature([0.0, 1.0], temperature)

    @pytest.mark.parametrize("logits", [[math.nan, 0.0], [math.inf, 1.0], []])
    def test_bad_logits_rejected(self, logits):
        with pytest.raises(ValueError):
            softmax_with_temperature(logits, 1.0)

    @given(
        logits=st.lists(st.floats(-30, 30), min_size=1, max_size=16),
        temperature=st.floats(0.05, 20.0),
    )
    def test_preserves_argmax(self, logits, temperature):
        # Sub-epsilon logit gaps collapse to exact ties in float64, where the
        # tie-break applies instead; only distinguishable maxima are asserted.
        ordered = sorted(logits, reverse=True)
        if len(ordered) > 1 and ordered[0] - ordered[1] < 1e-6:
            return
        dist = softmax_with_temperature(logits, temperature)
        assert int(np.argmax(logits)) == argmax(dist)

    @given(
        logits=st.lists(st.floats(-30, 30), min_size=1, max_size=16),
        temperature=st.floats(0.05, 20.0),
    )
    def test_output_is_valid_distribution(self, logits, temperature):
        dist = softmax_with_temperature(logits, temperature)
        assert abs(float(dist.probs.sum()) - 1.0) <= 1e-9


class TestEntropy:
    def test_one_hot_is_zero(self):
        assert entropy(TokenDistribution.one_hot(2, 5)) == 0.0

    def test_uniform_is_log_v(self):
        assert entropy(TokenDistribution.uniform(8)) == pytest.approx(math.log(8), abs=1e-12)

    def test_pinned_value(self):
        # Oracle: -(0.5 ln 0.5 + 2 * 0.25 ln 0.25) = 1.5 ln 2.
        dist = TokenDistribution(np.asarray([0.5, 0.25, 0.25]))
        assert entropy(dist) == pytest.approx(1.0397207708399179, abs=1e-12)

    @given(st.lists(st.floats(0.01, 10.0), min_size=1, max_size=32))
    def test_bounds(self, weights):
        dist = TokenDistribution.from_weights(weights)
        h = entropy(dist)
        assert -1e-12 <= h <= math.log(len(weights)) + 1e-12


class TestMix:
    def test_one_hot_weights_identity(self):
        a = TokenDistribution(np.asarray([0.2, 0.5, 0.3]))
        b = TokenDistribution(np.asarray([0.9, 0.05, 0.05]))
        mixed = mix([a, b], MixtureWeights(np.asarray([1.0, 0.0])))
        assert np.array_equal(mixed.probs, a.probs)

    def test_symmetric_mix_of_opposite_onehots(self):
        a = TokenDistribution(np.asarray([1.0, 0.0]))
        b = TokenDistribution(np.asarray([0.0, 1.0]))
        mixed = mix([a, b], MixtureWeights(np.asarray([0.5, 0.5])))
        assert np.array_equal(mixed.probs, np.asarray([0.5, 0.5]))

    def test_pinned_pointwise_average(self):
        a = TokenDistribution(np.asarray([0.1, 0.2, 0.7]))
        b = TokenDistribution(np.asarray([0.6, 0.3, 0.1]))
        mixed = mix([a, b], MixtureWeights(np.asarray([0.5, 0.5])))
        oracle = [0.5 * x + 0.5 * y for x, y in zip(a.probs, b.probs)]
        assert np.array_equal(mixed.probs, np.asarray(oracle))
        assert np.allclose(mixed.probs, [0.35, 0.25, 0.4], atol=1e-15)

    def test_length_mismatch_rejected(self):
        a = TokenDistribution(np.asarray([0.5, 0.5]))
        with pytest.raises(ValueError):
            mix([a], MixtureWeights(np.asarray([0.5, 0.5])))

    @given(
        weights=st.lists(st.floats(0.01, 10.0), min_size=2, max_size=5),
        lam=st.floats(0.0, 1.0),
    )
    def test_mixing_identical_distributions_is_noop(self, weights, lam):
        d = TokenDistribution.from_weights(weights)
        mixed = mix([d, d], MixtureWeights(np.asarray([lam, 1.0 - lam])))
        assert entropy(mixed) == pytest.approx(entropy(d), abs=1e-12)


class TestSample:
    def test_one_hot_always_selected(self):
        dist = TokenDistribution.one_hot(4, 6)
        rng = np.random.default_rng(0)
        assert all(sample(dist, rng) == 4 for _ in range(50))

    def test_fixed_seed_is_deterministic(self):
        dist = TokenDistribution.from_weights([1, 2, 3, 4])
        first = [sample(dist, np.random.default_rng(123)) for _ in range(10)]
        second = [sample(dist, np.random.default_rng(123)) for _ in range(10)]
        assert first == second

    def test_uniform_frequencies(self):
        dist = TokenDistribution.uniform(4)
        rng = np.random.default_rng(7)
        counts = np.bincount([sample(dist, rng) for _ in range(100_000)], minlength=4)
        assert np.allclose(counts / 100_000, 0.25, atol=0.01)

    def test_chi_square_not_rejected(self):
        from scipy import stats

        rng = np.random.default_rng(11)
        probs = TokenDistribution.from_weights(np.arange(1, 17, dtype=float))
        counts = np.bincount([sample(probs, rng) for _ in range(100_000)], minlength=16)
        _, p_value = stats.chisquare(counts, probs.probs * 100_000)
        assert p_value > 0.001

    def test_zero_probability_token_never_sampled(self):
        dist = TokenDistribution(np.asarray([0.0, 0.5, 0.0, 0.5]))
        rng = np.random.default_rng(3)
        draws = {sample(dist, rng) for _ in range(1000)}
        assert draws <= {1, 3}


class TestArgmax:
    def test_plain_maximum(self):
        assert argmax(TokenDistribution(np.asarray([0.1, 0.7, 0.2]))) == 1

    def test_tie_breaks_to_lowest_id(self):
        assert argmax(TokenDistribution(np.asarray([0.5, 0.5]))) == 0

    @given(st.lists(st.floats(0.01, 10.0), min_size=1, max_size=32))
    def test_matches_linear_scan_oracle(self, weights):
        dist = TokenDistribution.from_weights(weights)
        best, best_mass = 0, dist.probs[0]
        for i, mass in enumerate(dist.probs):
            if mass > best_mass:
                best, best_mass = i, mass
        assert argmax(dist) == best


class TestTokenDistributionInvariants:
    def test_rejects_negative_mass(self):
        with pytest.raises(ValueError):
            TokenDistribution(np.asarray([1.1, -0.1]))

    def test_rejects_bad_sum(self):
        with pytest.raises(ValueError):
            TokenDistribution(np.asarray([0.5, 0.4]))

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            TokenDistribution(np.asarray([np.inf, 0.0]))

    def test_probs_are_read_only(self):
        dist = TokenDistribution.uniform(3)
        with pytest.raises(ValueError):
            dist.probs[0] = 0.9


class TestVocabulary:
    def test_duplicate_tokens_rejected(self):
        with pytest.raises(ValueError):
            Vocabulary(tokens=("a", "a"), stop_ids=frozenset({0}))

    def test_stop_set_required(self):
        with pytest.raises(ValueError):
            Vocabulary(tokens=("a", "b"), stop_ids=frozenset())

    def test_stop_ids_must_be_valid(self):
        with pytest.raises(ValueError):
            Vocabulary(tokens=("a",), stop_ids=frozenset({5}))

    def test_from_tokens_appends_stop(self):
        vocab = Vocabulary.from_tokens(["a", "b"])
        assert "</s>" in vocab
        assert vocab.id_of("</s>") in vocab.stop_ids

    def test_round_trip_lookup(self):
        vocab = Vocabulary.from_tokens(["x", "y", "z"])
        for token in vocab.tokens:
            assert vocab.token_of(vocab.id_of(token)) == token


class TestPrefixTriple:
    def test_push_appends_to_all_three(self):
        triple = PrefixTriple(pretrained=(1,), aligned=(2,), classifier=())
        extended = triple.push(9)
        assert extended.pretrained[-1] == 9
        assert extended.aligned[-1] == 9
        assert extended.classifier[-1] == 9

    def test_push_with_cross_vocab_ids(self):
        extended = PrefixTriple().push(4, pretrained_token=7)
        assert extended.aligned == (4,)
        assert extended.pretrained == (7,)
        assert extended.classifier == (4,)
