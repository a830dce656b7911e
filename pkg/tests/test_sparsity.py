"""Truncated and Gumbel-softmax sparse attention: oracles and statistical laws."""

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prefixlab import autodiff as ad
from prefixlab.errors import ConfigError, DegenerateRowError
from prefixlab.gradcheck import DEFAULT_TOLERANCE, check_gradients
from prefixlab.masks import AttentionDesign
from prefixlab.sparsity import (
    AttentionTransform,
    NoiseStream,
    SparsityConfig,
    apply_truncation,
    compose_design,
    gumbel_noise,
    gumbel_softmax_row,
    key_impact,
    top_p_mask,
)

EULER_MASCHERONI = 0.5772156649015329


def random_row_stochastic(rng, t, k):
    a = rng.random((t, k)) + 1e-3
    return a / a.sum(axis=1, keepdims=True)


class TestKeyImpact:
    def test_uniform_matrix(self):
        a = np.full((3, 5), 1.0 / 5)
        np.testing.assert_allclose(key_impact(a), np.full(5, 0.2), atol=1e-15)

    def test_point_mass(self):
        a = np.array([[1.0, 0.0], [1.0, 0.0]])
        np.testing.assert_array_equal(key_impact(a), [1.0, 0.0])

    def test_column_mean_oracle(self):
        rng = np.random.default_rng(3)
        a = random_row_stochastic(rng, 3, 5)
        # brute-force column sums, normalized
        oracle = np.array([sum(a[t, j] for t in range(3)) for j in range(5)])
        oracle = oracle / oracle.sum()
        np.testing.assert_allclose(key_impact(a), oracle, atol=1e-12)

    def test_sums_to_one_for_any_row_stochastic(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            a = random_row_stochastic(rng, rng.integers(1, 8), rng.integers(2, 10))
            v = key_impact(a)
            assert abs(v.sum() - 1.0) <= 1e-12
            assert np.all(v >= 0.0)

    def test_zero_mass_rejected(self):
        with pytest.raises(DegenerateRowError):
            key_impact(np.zeros((2, 3)))


def minimal_prefix_oracle(impact_units, p_units, unit=20):
    """Exhaustive minimal-prefix top-p selection in integer 1/unit steps."""
    order = sorted(range(len(impact_units)), key=lambda i: (-impact_units[i], i))
    chosen, cum = set(), 0
    for idx in order:
        chosen.add(idx)
        cum += impact_units[idx]
        if cum >= p_units:
            break
    return np.array([1.0 if i in chosen else 0.0 for i in range(len(impact_units))])


class TestTopPMask:
    def test_full_mass_selects_all(self):
        v = np.array([0.4, 0.35, 0.25])
        np.testing.assert_array_equal(top_p_mask(v, 1.0), np.ones(3))

    def test_cumulative_selection(self):
        np.testing.assert_array_equal(
            top_p_mask(np.array([0.5, 0.3, 0.2]), 0.75), [1.0, 1.0, 0.0])

    def test_uniform_four_keys_needs_all(self):
        np.testing.assert_array_equal(
            top_p_mask(np.full(4, 0.25), 0.95), np.ones(4))

    def test_ties_break_toward_lower_index(self):
        np.testing.assert_array_equal(
            top_p_mask(np.array([0.25, 0.25, 0.25, 0.25]), 0.5),
            [1.0, 1.0, 0.0, 0.0])

    def test_matches_exhaustive_oracle_on_grid(self):
        # all compositions of 1.0 in 0.05 steps over 4 keys, p on the same grid
        for units in itertools.product(range(21), repeat=3):
            if sum(units) > 20:
                continue
            full = list(units) + [20 - sum(units)]
            impact = np.array(full) / 20.0
            for p_units in range(1, 21):
                expected = minimal_prefix_oracle(full, p_units)
                got = top_p_mask(impact, p_units / 20.0)
                np.testing.assert_array_equal(got, expected)

    @settings(max_examples=80)
    @given(st.lists(st.floats(0.01, 1.0), min_size=2, max_size=8),
           st.floats(0.05, 1.0), st.floats(0.05, 1.0))
    def test_monotone_in_p(self, raw, p1, p2):
        v = np.array(raw)
        v = v / v.sum()
        lo, hi = min(p1, p2), max(p1, p2)
        assert np.all(top_p_mask(v, lo) <= top_p_mask(v, hi))

    def test_batched_rows(self):
        v = np.array([[0.5, 0.3, 0.2], [0.2, 0.3, 0.5]])
        out = top_p_mask(v, 0.75)
        np.testing.assert_array_equal(out, [[1.0, 1.0, 0.0], [0.0, 1.0, 1.0]])


class TestApplyTruncation:
    def test_identity_mask(self):
        rng = np.random.default_rng(5)
        a = random_row_stochastic(rng, 2, 3)
        np.testing.assert_array_equal(apply_truncation(a, np.ones(3)), a)

    def test_zeroed_column(self):
        a = random_row_stochastic(np.random.default_rng(6), 2, 3)
        out = apply_truncation(a, np.array([1.0, 1.0, 0.0]))
        assert np.all(out[:, 2] == 0.0)
        np.testing.assert_array_equal(out[:, :2], a[:, :2])

    def test_renormalized_rows_sum_to_one(self):
        a = random_row_stochastic(np.random.default_rng(7), 4, 5)
        out = apply_truncation(a, np.array([1.0, 0.0, 1.0, 0.0, 1.0]), renormalize=True)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)

    def test_renormalize_rejects_empty_rows(self):
        a = np.array([[0.0, 1.0], [1.0, 0.0]])
        with pytest.raises(DegenerateRowError):
            apply_truncation(a, np.array([1.0, 0.0]), renormalize=True)


class TestGumbelNoise:
    def test_unit_fixture(self):
        assert gumbel_noise(1.0 / math.e) == pytest.approx(0.0, abs=1e-12)

    def test_inverse_fixture(self):
        # u = e^{-e}  =>  g = -log(-log(u)) = -log(e) = -1
        assert gumbel_noise(math.exp(-math.e)) == pytest.approx(-1.0, abs=1e-12)

    def test_monte_carlo_mean_is_euler_mascheroni(self):
        rng = np.random.default_rng(8)
        g = gumbel_noise(rng.random(1_000_000))
        assert abs(g.mean() - EULER_MASCHERONI) < 0.01

    def test_clamping_keeps_extremes_finite(self):
        assert np.all(np.isfinite(gumbel_noise(np.array([0.0, 1.0]))))


class TestGumbelSoftmaxRow:
    def test_zero_noise_reduces_to_softmax(self):
        rng = np.random.default_rng(9)
        logits = rng.normal(size=7)
        out = gumbel_softmax_row(logits, tau=1.0, noise=np.zeros(7))
        e = np.exp(logits - logits.max())
        np.testing.assert_allclose(out, e / e.sum(), atol=1e-12)

    def test_low_temperature_is_nearly_one_hot(self):
        # near-tied perturbed logits stay soft at any fixed tau, so the
        # one-hot rate is checked on a decisively peaked categorical
        rng = np.random.default_rng(10)
        logits = np.array([5.0, 0.0, -1.0])
        hits = 0
        for _ in range(2000):
            out = gumbel_softmax_row(logits, tau=0.01, rng=rng)
            hits += out.max() >= 0.99
        assert hits / 2000 >= 0.99

    def test_argmax_frequency_matches_categorical(self):
        # Gumbel-max property: argmax distribution equals softmax(logits)
        rng = np.random.default_rng(11)
        logits = np.array([0.3, -0.8, 1.1, 0.0])
        pi = np.exp(logits - logits.max())
        pi /= pi.sum()
        counts = np.zeros(4)
        n = 40_000
        for _ in range(n):
            counts[gumbel_softmax_row(logits, tau=0.5, rng=rng).argmax()] += 1
        np.testing.assert_allclose(counts / n, pi, atol=0.01)

    def test_reproducible_and_valid_probability_vector(self):
        logits = np.array([0.1, 0.2, 0.3])
        a = gumbel_softmax_row(logits, 1.0, rng=np.random.default_rng(12))
        b = gumbel_softmax_row(logits, 1.0, rng=np.random.default_rng(12))
        assert a.tobytes() == b.tobytes()
        assert abs(a.sum() - 1.0) <= 1e-12
        assert np.all(a >= 0.0)

    def test_gradients_flow_with_frozen_noise(self):
        # reparameterization: the tape composition used by the model
        rng = np.random.default_rng(13)
        logits = ad.parameter(rng.normal(size=(2, 5)))
        noise = gumbel_noise(rng.random((2, 5)))
        weights = rng.normal(size=(2, 5))
        mask = np.ones(5)

        def loss():
            perturbed = ad.scale(ad.add_const(logits, noise), 1.0 / 0.7)
            return ad.sum_all(ad.mul_const(ad.masked_softmax(perturbed, mask), weights))

        assert check_gradients(loss, [logits]) < DEFAULT_TOLERANCE

    def test_requires_randomness_source(self):
        with pytest.raises(ConfigError):
            gumbel_softmax_row(np.zeros(3), 1.0)


class TestNoiseStream:
    def test_reproducible_per_site(self):
        a = NoiseStream(42).gumbel(3, 1, 10, (2, 4))
        b = NoiseStream(42).gumbel(3, 1, 10, (2, 4))
        assert a.tobytes() == b.tobytes()

    def test_sites_are_independent(self):
        s = NoiseStream(42)
        assert s.gumbel(0, 0, 0, (4,)).tobytes() != s.gumbel(0, 0, 1, (4,)).tobytes()
        assert s.gumbel(0, 0, 0, (4,)).tobytes() != s.gumbel(0, 1, 0, (4,)).tobytes()
        assert s.gumbel(0, 0, 0, (4,)).tobytes() != s.gumbel(1, 0, 0, (4,)).tobytes()

    def test_seed_changes_stream(self):
        assert NoiseStream(1).gumbel(0, 0, 0, (4,)).tobytes() != \
            NoiseStream(2).gumbel(0, 0, 0, (4,)).tobytes()


class TestComposeDesign:
    CFG = SparsityConfig()

    def _scores(self, rng, t=4, k=9):
        return ad.constant(rng.normal(size=(t, k)))

    def test_htruncsa_with_zero_band_is_dense(self):
        ones = np.ones((4, 9))
        for layer in range(1, 5):
            tr = compose_design(AttentionDesign.HTRUNCSA, layer, 4, ones,
                                self.CFG, 0, "train")
            assert tr.sparse is None
            rng = np.random.default_rng(layer)
            scores = self._scores(rng)
            got = tr.attend(scores).data
            expected = ad.masked_softmax(scores, ones).data
            np.testing.assert_array_equal(got, expected)

    def test_hierblock_softsa_upper_band_matches_hierblock(self):
        ones = np.ones((4, 9))
        hb = compose_design(AttentionDesign.HIERBLOCK, 4, 4, ones, self.CFG, 2, "train")
        hbs = compose_design(AttentionDesign.HIERBLOCK_SOFTSA, 4, 4, ones,
                             self.CFG, 2, "train")
        rng = np.random.default_rng(20)
        scores = self._scores(rng)
        np.testing.assert_array_equal(hb.attend(scores).data, hbs.attend(scores).data)
        assert hbs.sparse is None  # layer 4 above band 2

    def test_htruncsa_lower_band_equals_manual_pipeline(self):
        ones = np.ones((4, 9))
        tr = compose_design(AttentionDesign.HTRUNCSA, 1, 4, ones, self.CFG, 2, "train")
        rng = np.random.default_rng(21)
        scores = self._scores(rng)
        got = tr.attend(scores).data
        attn = ad.masked_softmax(scores, ones).data
        manual = apply_truncation(attn, top_p_mask(key_impact(attn), self.CFG.top_p))
        np.testing.assert_allclose(got, manual, atol=1e-15)

    def test_softsa_eval_is_deterministic_plain_softmax(self):
        ones = np.ones((4, 9))
        tr = compose_design(AttentionDesign.SOFTSA, 2, 4, ones, self.CFG, 2, "eval")
        rng = np.random.default_rng(22)
        scores = self._scores(rng)
        a = tr.attend(scores).data
        b = tr.attend(scores).data
        assert a.tobytes() == b.tobytes()
        np.testing.assert_array_equal(a, ad.masked_softmax(scores, ones).data)

    def test_softsa_train_requires_noise(self):
        tr = compose_design(AttentionDesign.SOFTSA, 1, 4, np.ones((4, 9)),
                            self.CFG, 2, "train")
        with pytest.raises(ConfigError):
            tr.attend(self._scores(np.random.default_rng(23)))

    def test_band_conflict_rejected(self):
        with pytest.raises(ConfigError):
            compose_design(AttentionDesign.HSOFTSA, 1, 4, np.ones((4, 9)),
                           self.CFG, 9, "train")

    def test_cell_bernoulli_variant_gates_cells(self):
        cfg = SparsityConfig(softsa_variant="cell_bernoulli", tau_soft=0.5)
        tr = compose_design(AttentionDesign.SOFTSA, 1, 4, np.ones((4, 9)),
                            cfg, 4, "train")
        rng = np.random.default_rng(24)
        scores = self._scores(rng)
        noise = NoiseStream(0).logistic(1, 0, 0, (4, 9))
        out = tr.attend(scores, noise=noise).data
        plain = ad.masked_softmax(scores, np.ones((4, 9))).data
        assert np.all(out <= plain + 1e-15)
        assert np.all(out >= 0.0)
