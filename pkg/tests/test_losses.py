import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from horde import losses as L
from horde.numkernel import Graph, finite_diff_check


def _unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _batch(seed, P=3, Q=3, E=4):
    rng = np.random.default_rng(seed)
    return _unit(rng.normal(size=(P * Q, E))), np.repeat(np.arange(P), Q)


class TestPairs:
    def test_three_labels(self):
        ps = L.build_pairs([0, 0, 1])
        assert ps.positives.tolist() == [[0, 1]]
        assert ps.negatives.tolist() == [[0, 2], [1, 2]]

    def test_all_equal(self):
        assert len(L.build_pairs([4, 4, 4, 4]).negatives) == 0

    def test_pq_counts(self):
        ps = L.build_pairs(np.repeat(np.arange(5), 8))
        assert len(ps.positives) == 5 * 28
        assert len(ps.negatives) == math.comb(40, 2) - 140 == 640

    def test_invariants(self):
        ps = L.build_pairs([0, 1, 0, 2, 1])
        allp = np.concatenate([ps.positives, ps.negatives])
        assert np.all(allp[:, 0] < allp[:, 1])
        assert len({tuple(p) for p in allp}) == 10

    def test_too_small(self):
        with pytest.raises(ValueError):
            L.build_pairs([0])


class TestContrastive:
    def test_identical_positive_is_zero(self):
        e = np.array([[1.0, 0.0], [1.0, 0.0]])
        assert L.contrastive_loss(e, L.build_pairs([0, 0])) == 0.0

    def test_orthogonal_negative_is_zero(self):
        e = np.array([[1.0, 0.0], [0.0, 1.0]])
        assert L.contrastive_loss(e, L.build_pairs([0, 1]), margin=0.5) == 0.0

    def test_value(self):
        e = np.array([[1.0, 0.0], [0.6, 0.8], [1.0, 0.0]])
        # positive (0,2) distance 0; negatives (0,1),(1,2) at distance sqrt(0.8)
        d = math.sqrt(0.8)
        expected = 0.0 + (max(0.0, 1.0 - d) ** 2)
        np.testing.assert_allclose(L.contrastive_loss(e, L.build_pairs([0, 1, 0]), margin=1.0), expected, rtol=1e-14)

    def test_empty(self):
        with pytest.raises(ValueError):
            L.contrastive_loss(np.ones((2, 2)), L.PairSet(np.zeros((0, 2), int), np.zeros((0, 2), int), 2))


class TestTriplet:
    def test_margin_only(self):
        e = np.array([[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]])
        np.testing.assert_allclose(L.triplet_loss(e, [0, 0, 1], margin=0.2), 0.2, rtol=1e-15)

    def test_satisfied(self):
        e = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        assert L.triplet_loss(e, [0, 0, 1], margin=0.2) == 0.0

    def test_no_triplet(self):
        with pytest.raises(ValueError):
            L.triplet_loss(np.eye(3), [0, 1, 2])

    def test_matches_loop(self):
        e, y = _batch(3)
        ref, n = 0.0, 0
        for a in range(len(y)):
            for p in range(len(y)):
                for q in range(len(y)):
                    if a != p and y[a] == y[p] and y[a] != y[q]:
                        ref += max(0.0, np.sum((e[a] - e[p]) ** 2) - np.sum((e[a] - e[q]) ** 2) + 0.2)
                        n += 1
        np.testing.assert_allclose(L.triplet_loss(e, y, 0.2), ref / n, rtol=1e-12)


class TestBinomial:
    def test_positive_value(self):
        e = np.array([[1.0, 0.0], [1.0, 0.0]])
        val = L.binomial_deviance_loss(e, L.build_pairs([0, 0]))
        np.testing.assert_allclose(val, math.log1p(math.exp(-1.0)), rtol=1e-14)
        assert round(val, 4) == 0.3133

    def test_negative_value(self):
        e = np.array([[1.0, 0.0], [-1.0, 0.0]])
        val = L.binomial_deviance_loss(e, L.build_pairs([0, 1]), C=1.0)
        np.testing.assert_allclose(val, math.log1p(math.exp(-3.0)), rtol=1e-14)
        assert round(val, 4) == 0.0486

    def test_saturation(self):
        e = np.array([[1.0, 0.0], [1.0, 0.0], [-1.0, 0.0]])
        assert L.binomial_deviance_loss(e, L.build_pairs([0, 0, 1]), alpha=200.0) < 1e-40

    def test_config_checks(self):
        with pytest.raises(ValueError):
            L.LossConfig(kind="binomial", alpha=0.0)
        with pytest.raises(ValueError):
            L.LossConfig(margin=-0.1)
        with pytest.raises(ValueError):
            L.LossConfig(kind="npair")


class TestHorde:
    def test_zero_weight(self):
        e, y = _batch(1)
        assert L.horde_loss([e], y, L.LossConfig(order_weights={2: 0.0})) == 0.0

    def test_identical_embeddings_positive(self):
        y = np.array([0, 0, 1, 1])
        e = np.tile([[1.0, 0.0]], (4, 1))
        assert L.horde_loss([e, e], y, L.LossConfig()) > 0

    def test_additive(self):
        cfg = L.LossConfig()
        embs = [_batch(s)[0] for s in range(4)]
        y = _batch(0)[1]
        total = L.horde_loss(embs, y, cfg)
        np.testing.assert_allclose(total, sum(L.dml_loss(e, y, cfg) for e in embs), rtol=1e-14)

    def test_needs_an_order(self):
        with pytest.raises(ValueError):
            L.horde_loss([], [0, 0, 1], L.LossConfig())

    def test_total(self):
        assert L.total_loss(0.7, 0.0) == 0.7
        with pytest.raises(ValueError):
            L.total_loss(float("nan"), 0.0)


KINDS = ["contrastive", "triplet", "binomial"]


class TestInvariances:
    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 2**31), kind=st.sampled_from(KINDS))
    def test_permutation(self, seed, kind):
        e, y = _batch(seed)
        perm = np.random.default_rng(seed).permutation(len(y))
        cfg = L.LossConfig(kind=kind)
        assert abs(L.dml_loss(e, y, cfg) - L.dml_loss(e[perm], y[perm], cfg)) <= 1e-12

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 2**31), kind=st.sampled_from(KINDS))
    def test_relabel_and_nonneg(self, seed, kind):
        e, y = _batch(seed)
        relabeled = np.array([7, 3, 11])[y]
        cfg = L.LossConfig(kind=kind)
        val = L.dml_loss(e, y, cfg)
        assert val == L.dml_loss(e, relabeled, cfg)
        assert val >= 0


class TestGradients:
    @pytest.mark.parametrize("kind", KINDS)
    def test_loss_graph(self, kind):
        e, y = _batch(5, P=3, Q=2, E=5)
        cfg = L.LossConfig(kind=kind)
        g = Graph()
        x = g.input("x")
        g.output("loss", L.dml_graph(g, g.l2_normalize(x), cfg))
        g.forward({"x": e * 1.3, **L.pair_feed(y, kind)})
        assert finite_diff_check(g, "x") <= 1e-5

    def test_masks_not_differentiable(self):
        g = Graph()
        x = g.input("x")
        g.output("loss", L.contrastive_graph(g, x, 0.5))
        assert not g.inputs[L.POS_MASK].needs_grad
