import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splab import pqs
from splab.cpe import ClassPrototype, cosine_sim
from splab.numcore import Tensor, grad_check
from splab.numcore import ops


def noiseless(k, tau=1.0):
    return pqs.SelectionConfig(k=k, tau=tau, noise_enabled=False)


def test_config_validation_and_defaults():
    cfg = pqs.SelectionConfig()
    assert cfg.tau == 1.0 and cfg.k == 16 and pqs.REFERENCE_NUM_QUERIES == 300
    with pytest.raises(ValueError):
        pqs.SelectionConfig(tau=0.0)
    with pytest.raises(ValueError):
        pqs.SelectionConfig(k=0)


def test_relevance_single_prototype():
    rng = np.random.default_rng(0)
    tokens = rng.normal(size=(5, 3))
    p = rng.normal(size=3)
    s = pqs.relevance_scores(Tensor(tokens), [ClassPrototype(0, p, 1)]).data
    np.testing.assert_allclose(s, [cosine_sim(p, t) for t in tokens], atol=1e-12)


def test_relevance_matches_loop_max_oracle():
    rng = np.random.default_rng(1)
    tokens = rng.normal(size=(3, 4))
    protos = rng.normal(size=(2, 4))
    s = pqs.relevance_scores(Tensor(tokens), Tensor(protos)).data
    oracle = [max(cosine_sim(p, t) for p in protos) for t in tokens]
    np.testing.assert_allclose(s, oracle, atol=1e-12, rtol=0)


def test_relevance_token_equal_to_prototype_is_max():
    rng = np.random.default_rng(2)
    protos = rng.normal(size=(2, 4))
    tokens = np.vstack([rng.normal(size=(3, 4)), protos[1]])
    s = pqs.relevance_scores(Tensor(tokens), Tensor(protos), clamp_epsilon=1e-7).data
    assert s[3] == 1 - 1e-7 and s.argmax() == 3


def test_relevance_rejects_zero_vectors():
    with pytest.raises(ValueError):
        pqs.relevance_scores(Tensor(np.zeros((2, 3))), Tensor(np.ones((1, 3))))
    with pytest.raises(ValueError):
        pqs.relevance_scores(Tensor(np.ones((2, 3))), Tensor(np.zeros((0, 3))))


def test_plain_topk_example():
    r = pqs.gumbel_topk(Tensor([3.0, 1.0, 2.0]), noiseless(2))
    assert r.selected_indices.tolist() == [0, 2]
    assert r.hard_mask.tolist() == [True, False, True]


def test_errors():
    with pytest.raises(ValueError):
        pqs.gumbel_topk(Tensor([1.0, 2.0]), noiseless(3))
    with pytest.raises(ValueError):
        pqs.gumbel_topk(Tensor([1.0, 2.0]), pqs.SelectionConfig(k=1), rng=None)


def test_noiseless_equals_plain_topk_1000_vectors():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        n = int(rng.integers(1, 30))
        k = int(rng.integers(1, n + 1))
        s = rng.normal(size=n)
        r = pqs.gumbel_topk(Tensor(s), noiseless(k))
        expected = sorted(np.argsort(-s)[:k].tolist())
        assert r.selected_indices.tolist() == expected
        assert r.hard_mask.sum() == k
        assert abs(r.soft_weights.data.sum() - 1) <= 1e-9 and (r.soft_weights.data > 0).all()


def test_gumbel_frequencies_match_softmax():
    s = np.array([1.0, 0.5, 0.0])
    p = np.exp(s) / np.exp(s).sum()
    np.testing.assert_allclose(p, [0.506, 0.307, 0.186], atol=1e-3)
    n = 100_000
    rng = np.random.default_rng(42)
    r = pqs.gumbel_topk(Tensor(np.tile(s, (n, 1))), pqs.SelectionConfig(k=1), rng)
    freq = np.bincount(r.selected_indices[:, 0], minlength=3) / n
    se = np.sqrt(p * (1 - p) / n)
    assert np.all(np.abs(freq - p) <= 3 * se), (freq, p, se)


def test_noiseless_deterministic_and_idempotent():
    s = Tensor(np.random.default_rng(4).normal(size=12))
    a = pqs.gumbel_topk(s, noiseless(5))
    b = pqs.gumbel_topk(s, noiseless(5))
    assert a.selected_indices.tolist() == b.selected_indices.tolist()
    assert a.soft_weights.data.tobytes() == b.soft_weights.data.tobytes()
    # selecting again from the chosen scores keeps everything
    again = pqs.gumbel_topk(Tensor(s.data[a.selected_indices]), noiseless(5))
    assert again.selected_indices.tolist() == list(range(5))


def test_seeded_noise_reproducible():
    s = Tensor(np.zeros(20))
    a = pqs.gumbel_topk(s, pqs.SelectionConfig(k=4), np.random.default_rng(9))
    b = pqs.gumbel_topk(s, pqs.SelectionConfig(k=4), np.random.default_rng(9))
    assert a.selected_indices.tolist() == b.selected_indices.tolist()


def test_low_temperature_is_nearly_one_hot():
    rng = np.random.default_rng(5)
    for _ in range(50):
        s = rng.normal(size=10)
        top = s.argmax()
        s[top] = np.sort(s)[-2] + rng.uniform(0.1, 2.0)
        w = pqs.gumbel_topk(Tensor(s), noiseless(3, tau=1e-3)).soft_weights.data
        assert w.max() >= 1 - 1e-6


def test_ties_break_to_lower_index():
    r = pqs.gumbel_topk(Tensor([1.0, 2.0, 2.0, 2.0, 0.0]), noiseless(2))
    assert r.selected_indices.tolist() == [1, 2]
    r = pqs.gumbel_topk(Tensor([5.0, 5.0, 5.0]), noiseless(1))
    assert r.selected_indices.tolist() == [0]


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 15))
def test_permutation_equivariance(seed, n):
    rng = np.random.default_rng(seed)
    s = rng.permutation(n).astype(float) + rng.uniform(0, 0.5, size=n)  # distinct
    k = int(rng.integers(1, n + 1))
    perm = rng.permutation(n)
    a = pqs.gumbel_topk(Tensor(s), noiseless(k)).selected_indices
    b = pqs.gumbel_topk(Tensor(s[perm]), noiseless(k)).selected_indices
    assert sorted(perm[b].tolist()) == a.tolist()


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6))
def test_hard_mask_has_exactly_k(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 40))
    k = int(rng.integers(1, n + 1))
    s = np.round(rng.normal(size=n), 1)  # plenty of ties
    r = pqs.gumbel_topk(Tensor(s), pqs.SelectionConfig(k=k, tau=0.5), rng)
    assert r.hard_mask.sum() == k
    order = np.lexsort((np.arange(n), -r.perturbed))[:k]
    assert sorted(order.tolist()) == r.selected_indices.tolist()


def test_select_all_tokens_in_order():
    tokens = np.random.default_rng(6).normal(size=(4, 3))
    r = pqs.gumbel_topk(Tensor(np.zeros(4)), noiseless(4))
    np.testing.assert_array_equal(pqs.select_queries(Tensor(tokens), r).data, tokens)


def test_select_dominant_token():
    tokens = np.random.default_rng(7).normal(size=(5, 3))
    s = np.array([0.0, 0.3, 11.0, -0.2, 0.1])
    r = pqs.gumbel_topk(Tensor(s), pqs.SelectionConfig(k=1), np.random.default_rng(0))
    np.testing.assert_array_equal(pqs.select_queries(Tensor(tokens), r).data, tokens[[2]])


def test_select_forward_is_exact_rows_batched():
    rng = np.random.default_rng(8)
    tokens = rng.normal(size=(3, 6, 4))
    s = Tensor(rng.normal(size=(3, 6)), requires_grad=True)
    r = pqs.gumbel_topk(s, pqs.SelectionConfig(k=2), rng)
    q = pqs.select_queries(Tensor(tokens), r)
    for b in range(3):
        assert q.data[b].tobytes() == tokens[b, r.selected_indices[b]].tobytes()


def test_select_mask_mode_zeroes_unselected():
    tokens = np.random.default_rng(9).normal(size=(5, 2))
    r = pqs.gumbel_topk(Tensor([0.0, 4.0, 1.0, 3.0, 2.0]), noiseless(2))
    out = pqs.select_queries(Tensor(tokens), r, mode="mask").data
    np.testing.assert_array_equal(out[[1, 3]], tokens[[1, 3]])
    assert not out[[0, 2, 4]].any()


def test_select_rejects_mismatched_result():
    r = pqs.gumbel_topk(Tensor(np.zeros(4)), noiseless(2))
    with pytest.raises(ValueError):
        pqs.select_queries(Tensor(np.zeros((5, 2))), r)


def soft_surrogate(objective, tokens, scores, ref, tau):
    """Objective on the hard queries shifted by the change in soft weights from the reference point."""
    w = np.exp((scores - scores.max()) / tau)
    w /= w.sum()
    w0 = ref.soft_weights.data
    q = tokens[ref.selected_indices] * (1.0 + (w - w0)[ref.selected_indices])[:, None]
    return objective(q)


@pytest.mark.parametrize("seed", range(20))
def test_straight_through_gradient_matches_soft_relaxation(seed):
    rng = np.random.default_rng(seed)
    n, d, k, tau = 8, 3, 3, float(rng.uniform(0.3, 2.0))
    tokens = rng.normal(size=(n, d))
    r_lin = rng.normal(size=(k, d))
    objectives = {
        "linear": (lambda q: (q * r_lin).sum(), lambda q: float((q * r_lin).sum())),
        "quadratic": (lambda q: ((q * r_lin).sum() ** 2), lambda q: float((q * r_lin).sum() ** 2)),
        "tanh": (lambda q: ops.tanh(q).sum(), lambda q: float(np.tanh(q).sum())),
    }
    for name, (f_tensor, f_np) in objectives.items():
        s0 = rng.normal(size=n)
        s = Tensor(s0.copy(), requires_grad=True)
        res = pqs.gumbel_topk(s, noiseless(k, tau))
        f_tensor(pqs.select_queries(Tensor(tokens), res)).backward()
        eps = 1e-5
        fd = np.zeros(n)
        for i in range(n):
            sp, sm = s0.copy(), s0.copy()
            sp[i] += eps
            sm[i] -= eps
            fd[i] = (soft_surrogate(f_np, tokens, sp, res, tau) - soft_surrogate(f_np, tokens, sm, res, tau)) / (2 * eps)
        scale = max(np.abs(fd).max(), 1e-8)
        assert np.abs(s.grad - fd).max() / scale <= 1e-4, name
        if name == "linear":
            # for a linear readout the surrogate is the plain soft relaxation
            def plain(sv):
                w = np.exp((sv - sv.max()) / tau)
                w /= w.sum()
                return float(((tokens * w[:, None])[res.selected_indices] * r_lin).sum())

            fd2 = np.array([(plain(s0 + eps * e) - plain(s0 - eps * e)) / (2 * eps) for e in np.eye(n)])
            assert np.abs(s.grad - fd2).max() / max(np.abs(fd2).max(), 1e-8) <= 1e-4


def test_soft_path_grad_check_through_relevance():
    """Gradient reaches tokens and prototypes through the relevance scores."""
    for seed in range(20):
        rng = np.random.default_rng(seed)
        tokens = Tensor(rng.normal(size=(6, 3)))
        protos = Tensor(rng.normal(size=(2, 3)))
        readout = rng.normal(size=(6,))

        def fn(t, p):
            s = pqs.relevance_scores(t, p)
            soft = ops.softmax(s * 2.0)
            return (soft * readout).sum()

        assert grad_check(fn, [tokens, protos], 1e-5, 1e-4)
