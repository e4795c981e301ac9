import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from phonovis import diffcore as dc
from phonovis.prototypes import PrototypeBank, soft_assign
from phonovis.router import (RouterConfig, RoutingOutcome, moe_forward, pseudo_phoneme_label, route, route_targets,
                             router_loss, top_s, utilization_term, write_routing_trace)


def linear(W):
    W = np.asarray(W, float)
    return lambda x: dc.matmul(x, W)


def brute_top_s(row, S):
    """Oracle: the S-subset with the largest score sum, ties to the lexicographically smallest."""
    best = max(itertools.combinations(range(len(row)), S), key=lambda c: (sum(row[i] for i in c), [-i for i in c]))
    return sorted(best, key=lambda i: (-row[i], i))


class TestPseudoLabels:
    def test_bitwise_equal_to_soft_assign(self):
        rng = np.random.default_rng(0)
        bank = PrototypeBank(rng.normal(size=(6, 4)), tau=0.8)
        z = rng.normal(size=(1000, 4))
        assert np.array_equal(pseudo_phoneme_label(z, bank), soft_assign(z, bank))

    def test_at_centroid(self):
        c = np.array([[0.0, 0.0], [50.0, 0.0], [3.0, 3.0], [0.0, 50.0]])
        v = pseudo_phoneme_label(c[2], PrototypeBank(c, tau=0.5))
        assert np.allclose(v, np.eye(4)[2], atol=1e-12)

    def test_needs_phoneme_bank(self):
        with pytest.raises(ValueError):
            pseudo_phoneme_label(np.zeros(2), PrototypeBank(np.eye(2), "viseme"))


class TestTopS:
    def test_ties_prefer_lower_index(self):
        assert top_s(np.array([1.0, 3.0, 3.0, 1.0]), 3).tolist() == [[1, 2, 0]]

    @given(arrays(float, 5, elements=st.sampled_from([-1.0, 0.0, 0.5, 2.0])), st.integers(1, 5))
    def test_matches_brute_force_with_ties(self, row, S):
        assert top_s(row, S)[0].tolist() == brute_top_s(row.tolist(), S)


class TestRoute:
    def setup_method(self):
        rng = np.random.default_rng(1)
        self.Wp = rng.normal(size=(5, 4))
        self.Wc = rng.normal(size=(3, 4))
        self.h = rng.normal(size=(6, 3))
        self.v = rng.dirichlet(np.ones(5), 6)

    def scores(self, beta, h=None, v=None):
        cfg = RouterConfig(M=4, S=2, beta=beta, K=5)
        out = route(self.h if h is None else h, self.v if v is None else v, cfg, linear(self.Wp), linear(self.Wc))
        return out.scores

    def test_beta_one_ignores_content(self):
        assert np.array_equal(self.scores(1.0), self.scores(1.0, h=self.h + 3.0))

    def test_beta_zero_ignores_labels(self):
        assert np.array_equal(self.scores(0.0), self.scores(0.0, v=self.v[::-1]))

    def test_s_equals_m_selects_all(self):
        cfg = RouterConfig(M=4, S=4, beta=0.5, K=5)
        out = route(self.h, self.v, cfg, linear(self.Wp), linear(self.Wc))
        assert all(sorted(r) == [0, 1, 2, 3] for r in out.selected.tolist())
        s = out.scores
        ordered = np.take_along_axis(s, out.selected, axis=1)
        assert np.allclose(out.weights, np.exp(ordered) / np.exp(ordered).sum(1, keepdims=True))

    @given(st.floats(0, 1))
    def test_blend_symmetry(self, beta):
        a = route(self.h, self.v, RouterConfig(M=4, S=2, beta=beta, K=5), linear(self.Wp), linear(self.Wc))
        # swapping the roles of the two gates (inputs swapped too) and beta -> 1 - beta
        cfg = RouterConfig(M=4, S=2, beta=1 - beta, K=5)
        b = route(self.v, self.h, cfg, linear(self.Wc), linear(self.Wp))
        assert np.allclose(a.scores, b.scores, atol=1e-12)

    def test_s_greater_than_m_rejected(self):
        with pytest.raises(ValueError):
            RouterConfig(M=2, S=3)

    def test_non_surjective_map_rejected(self):
        with pytest.raises(ValueError):
            RouterConfig(M=3, S=1, K=3, phoneme_to_expert=(0, 0, 1))


class TestMoE:
    def experts(self):
        rng = np.random.default_rng(2)
        return [linear(rng.normal(size=(3, 2))) for _ in range(3)]

    def test_top1_is_argmax_expert(self):
        h = np.random.default_rng(3).normal(size=(5, 3))
        cfg = RouterConfig(M=3, S=1, beta=0.0, K=3)
        Wc = np.random.default_rng(4).normal(size=(3, 3))
        out = route(h, np.zeros((5, 3)), cfg, linear(np.zeros((3, 3))), linear(Wc))
        y = moe_forward(h, out, self.experts())
        ex = self.experts()
        for t in range(5):
            assert np.array_equal(y[t], ex[int(np.argmax(h[t] @ Wc))](h[t:t + 1])[0])

    def test_identical_experts(self):
        W = np.random.default_rng(5).normal(size=(3, 2))
        h = np.random.default_rng(6).normal(size=(4, 3))
        out = RoutingOutcome(np.zeros((4, 3)), np.array([[0, 1], [2, 0], [1, 2], [0, 2]]),
                             np.array([[0.2, 0.8], [0.5, 0.5], [0.9, 0.1], [0.3, 0.7]]), np.array([3, 2, 3]))
        assert np.allclose(moe_forward(h, out, [linear(W)] * 3), h @ W, atol=1e-14)

    def test_weighted_pair(self):
        a, b = np.array([1.0, -2.0]), np.array([4.0, 0.5])
        experts = [lambda x: dc.add(dc.mul(x, 0.0), a), lambda x: dc.add(dc.mul(x, 0.0), b)]
        # score gap ln(7/3) gives softmax weights (0.7, 0.3)
        cfg = RouterConfig(M=2, S=2, beta=0.0, K=2)
        gate = lambda h: dc.add(dc.mul(dc.sum_(h, axis=1, keepdims=True), 0.0), np.array([math.log(7 / 3), 0.0]))
        out = route(np.ones((1, 2)), np.zeros((1, 2)), cfg, gate, gate)
        assert np.allclose(out.weights, [[0.7, 0.3]], atol=1e-15)
        assert np.allclose(moe_forward(np.ones((1, 2)), out, experts), 0.7 * a + 0.3 * b, atol=1e-15)

    def test_unselected_experts_never_called(self):
        calls = [0, 0, 0, 0]

        def make(i):
            def f(x):
                calls[i] += len(dc.const(x))
                return dc.mul(x, float(i))
            return f

        out = RoutingOutcome(np.zeros((3, 4)), np.array([[0, 2], [2, 0], [0, 2]]), np.full((3, 2), 0.5),
                             np.array([3, 0, 3, 0]))
        moe_forward(np.ones((3, 2)), out, [make(i) for i in range(4)])
        assert calls == [3, 0, 3, 0]

    def test_row_mismatch(self):
        out = RoutingOutcome(np.zeros((2, 2)), np.array([[0], [1]]), np.ones((2, 1)), np.array([1, 1]))
        with pytest.raises(ValueError):
            moe_forward(np.ones((3, 2)), out, self.experts()[:2])


class TestRouterLoss:
    def test_balanced_utilization(self):
        B, M, S = 8, 4, 2
        assert utilization_term(np.full(M, B * S / M), B, M) == pytest.approx(S**2 / B, abs=1e-15)

    def test_collapsed_utilization(self):
        B, M = 8, 4
        collapsed = utilization_term(np.array([B, 0, 0, 0]), B, M)
        assert collapsed == pytest.approx(M / B) and collapsed > utilization_term(np.full(M, B / M), B, M)

    def test_even_split_entropy(self):
        cfg = RouterConfig(M=2, S=2, beta=0.5, lambda_util=0.0, lambda_ent=0.3, K=2)
        out = RoutingOutcome(np.zeros((5, 2)), np.tile([0, 1], (5, 1)), np.full((5, 2), 0.5), np.array([5, 5]))
        parts = {}
        router_loss(out, np.full((5, 2), 0.5), cfg, parts)
        assert parts["ent"] == pytest.approx(0.3 * math.log(2), abs=1e-15)

    def test_targets_sum_to_one(self):
        cfg = RouterConfig(M=3, S=2, K=6)
        labels = np.random.default_rng(0).dirichlet(np.ones(6), 10)
        t = route_targets(labels, cfg, np.tile([2, 0], (10, 1)))
        assert np.allclose(t.sum(1), 1.0)

    def test_rejects_empty_and_mismatched(self):
        cfg = RouterConfig(M=2, S=1, K=2)
        empty = RoutingOutcome(np.zeros((0, 2)), np.zeros((0, 1), int), np.zeros((0, 1)), np.zeros(2, int))
        with pytest.raises(ValueError):
            router_loss(empty, np.zeros((0, 2)), cfg)
        one = RoutingOutcome(np.zeros((1, 2)), np.array([[0]]), np.ones((1, 1)), np.array([1, 0]))
        with pytest.raises(ValueError):
            router_loss(one, np.zeros((2, 2)), cfg)

    def test_soft_part_gradient(self):
        from phonovis.gradcheck import check

        assert check("L_router", 1).max_rel_err < 1e-4


def test_routing_trace(tmp_path):
    out = RoutingOutcome(np.zeros((2, 3)), np.array([[2, 0], [1, 2]]), np.array([[0.6, 0.4], [0.5, 0.5]]),
                         np.array([1, 1, 2]))
    write_routing_trace(tmp_path / "r.csv", np.array([[0.1, 0.9], [0.8, 0.2]]), out)
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines == ["t,label,experts,weights", "0,1,2 0,0.600000 0.400000", "1,0,1 2,0.500000 0.500000"]
