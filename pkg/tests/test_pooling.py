import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import assert_gradients_match
from tap.pooling import pool, pool_mode


def numpy_pool(feature, descriptions, w_q, w_k):
    """Scalar-level oracle: explicit softmax + weighted sum."""
    query = w_q @ feature
    keys = descriptions @ w_k.T
    logits = keys @ query
    z = np.exp(logits - logits.max())
    weights = z / z.sum()
    return weights, weights @ descriptions


def rand_instance(n, d, seed):
    rng = np.random.default_rng(seed)
    f = rng.normal(size=d)
    D = rng.normal(size=(n, d))
    wq = rng.normal(size=(d, d)) * 0.3 + np.eye(d)
    wk = rng.normal(size=(d, d)) * 0.3 + np.eye(d)
    return f, D, wq, wk


class TestPool:
    def test_single_description_passthrough(self):
        f = torch.randn(4)
        D = torch.randn(1, 4)
        out = pool(f, D, torch.eye(4), torch.eye(4))
        assert torch.allclose(out.attention_weights, torch.tensor([1.0]))
        assert torch.allclose(out.vector, D[0])

    def test_orthogonal_descriptions_give_uniform_weights(self):
        f = torch.tensor([1.0, 0.0, 0.0, 0.0])
        D = torch.tensor([[0.0, 1.0, 0.0, 0.0],
                          [0.0, 0.0, 1.0, 0.0],
                          [0.0, 0.0, 0.0, 1.0]])
        out = pool(f, D, torch.eye(4), torch.eye(4))
        assert torch.allclose(out.attention_weights, torch.full((3,), 1 / 3))
        assert torch.allclose(out.vector, D.mean(0))

    def test_hand_set_logits_two_descriptions(self):
        # query (2, 0) against keys e1, e2 gives logits (2, 0)
        f = torch.tensor([2.0, 0.0])
        D = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
        out = pool(f, D, torch.eye(2), torch.eye(2))
        w1 = math.exp(2) / (math.exp(2) + 1)
        assert torch.allclose(out.attention_weights,
                              torch.tensor([w1, 1 - w1]), atol=1e-6)
        assert abs(out.attention_weights[0].item() - 0.8808) < 1e-4
        expected = torch.tensor([w1, 1 - w1]) @ D
        assert torch.allclose(out.vector, expected, atol=1e-6)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_numpy_oracle(self, seed):
        f, D, wq, wk = rand_instance(n=5, d=8, seed=seed)
        out = pool(torch.tensor(f), torch.tensor(D), torch.tensor(wq),
                   torch.tensor(wk))
        w_ref, v_ref = numpy_pool(f, D, wq, wk)
        assert np.allclose(out.attention_weights.numpy(), w_ref, atol=1e-9)
        assert np.allclose(out.vector.numpy(), v_ref, atol=1e-9)

    def test_batched_matches_per_row(self):
        f, D, wq, wk = rand_instance(n=4, d=6, seed=0)
        batch = np.stack([f, f * -0.5, f + 1.0])
        out = pool(torch.tensor(batch), torch.tensor(D), torch.tensor(wq),
                   torch.tensor(wk))
        for b in range(3):
            w_ref, v_ref = numpy_pool(batch[b], D, wq, wk)
            assert np.allclose(out.attention_weights[b].numpy(), w_ref, atol=1e-9)
            assert np.allclose(out.vector[b].numpy(), v_ref, atol=1e-9)

    def test_empty_description_set_rejected(self):
        with pytest.raises(ValueError, match="empty attribute leaf set"):
            pool(torch.randn(4), torch.zeros(0, 4), torch.eye(4), torch.eye(4))


class TestProperties:
    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10_000), n=st.integers(1, 6), d=st.integers(2, 16))
    def test_weights_on_simplex_and_convex_hull(self, seed, n, d):
        f, D, wq, wk = rand_instance(n, d, seed)
        out = pool(torch.tensor(f), torch.tensor(D), torch.tensor(wq),
                   torch.tensor(wk))
        w = out.attention_weights
        assert float(w.min()) >= 0.0
        assert abs(float(w.sum()) - 1.0) < 1e-6
        # the pooled vector IS the reported convex combination
        assert torch.allclose(out.vector, w @ torch.tensor(D), atol=1e-9)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_permutation_equivariance(self, seed):
        # identical up to float64 reduction-order rounding (~1e-16)
        f, D, wq, wk = rand_instance(n=5, d=7, seed=seed)
        perm = np.random.default_rng(seed).permutation(5)
        a = pool(torch.tensor(f), torch.tensor(D), torch.tensor(wq),
                 torch.tensor(wk))
        b = pool(torch.tensor(f), torch.tensor(D[perm]), torch.tensor(wq),
                 torch.tensor(wk))
        assert torch.allclose(a.attention_weights[list(perm)],
                              b.attention_weights, atol=1e-12, rtol=0)
        assert torch.allclose(a.vector, b.vector, atol=1e-12, rtol=0)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000), t=st.floats(1.1, 8.0))
    def test_sharpening_reduces_entropy(self, seed, t):
        f, D, wq, wk = rand_instance(n=5, d=7, seed=seed)
        base = pool(torch.tensor(f), torch.tensor(D), torch.tensor(wq),
                    torch.tensor(wk)).attention_weights
        sharp = pool(torch.tensor(f), torch.tensor(D), torch.tensor(wq * t),
                     torch.tensor(wk)).attention_weights

        def entropy(w):
            w = w.clamp_min(1e-12)
            return float(-(w * w.log()).sum())

        assert entropy(sharp) <= entropy(base) + 1e-9


class TestModes:
    def test_average_is_uniform(self):
        f, D, wq, wk = rand_instance(n=3, d=5, seed=1)
        out = pool_mode(torch.tensor(f), torch.tensor(D), torch.tensor(wq),
                        torch.tensor(wk), mode="average")
        assert torch.allclose(out.attention_weights, torch.full((3,), 1 / 3,
                                                                dtype=torch.float64))
        assert torch.allclose(out.vector, torch.tensor(D).mean(0))

    def test_attn_max_selects_highest_score(self):
        f = torch.tensor([1.0, 0.0, 0.0])
        D = torch.tensor([[0.1, 0.0, 0.0], [0.9, 0.0, 0.0], [0.3, 0.0, 0.0]])
        out = pool_mode(f, D, torch.eye(3), torch.eye(3), mode="attn_max")
        assert out.attention_weights.tolist() == [0.0, 1.0, 0.0]
        assert torch.allclose(out.vector, D[1])

    def test_attn_max_tie_breaks_to_lowest_index(self):
        f = torch.tensor([1.0, 0.0])
        D = torch.tensor([[0.5, 0.5], [0.5, -0.5], [0.2, 0.0]])
        # rows 0 and 1 tie on the score against the query
        out = pool_mode(f, D, torch.eye(2), torch.eye(2), mode="attn_max")
        assert out.attention_weights.tolist() == [1.0, 0.0, 0.0]

    def test_vcp_equals_average_for_identical_keys(self):
        f = torch.randn(6, dtype=torch.float64)
        row = torch.randn(6, dtype=torch.float64)
        D = torch.stack([row, row, row])
        a = pool_mode(f, D, torch.eye(6, dtype=torch.float64),
                      torch.eye(6, dtype=torch.float64), mode="vcp")
        b = pool_mode(f, D, torch.eye(6, dtype=torch.float64),
                      torch.eye(6, dtype=torch.float64), mode="average")
        assert torch.allclose(a.attention_weights, b.attention_weights)

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError, match="unknown pooling mode"):
            pool_mode(torch.randn(3), torch.randn(2, 3), torch.eye(3),
                      torch.eye(3), mode="softmax")


class TestGradients:
    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(7)
        f = torch.tensor(rng.normal(size=8), requires_grad=True)
        D = torch.tensor(rng.normal(size=(5, 8)), requires_grad=True)
        wq = torch.tensor(np.eye(8) + rng.normal(size=(8, 8)) * 0.2,
                          requires_grad=True)
        wk = torch.tensor(np.eye(8) + rng.normal(size=(8, 8)) * 0.2,
                          requires_grad=True)
        probe = torch.tensor(rng.normal(size=8))

        def fn():
            out = pool(f, D, wq, wk)
            return out.vector @ probe + out.attention_weights.square().sum()

        assert_gradients_match(fn, [f, D, wq, wk], tol=1e-4)
