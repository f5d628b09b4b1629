import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import moa_dense, softmax
from shmoareg import moa
from shmoareg import numerics as nm
from shmoareg.numerics import Tensor, finite_diff_check


def _params(gen, d_m=4, d_h=3, n=5, k=2):
    return moa.MoAParams.init(gen, d_m, d_h, n, k)


def _np(p):
    return [getattr(p, a).data for a in ("Wq", "Wk", "Wv", "Wo", "Wg")]


def test_route_uniform_router_picks_first_k():
    p = moa.MoAParams.init(nm.rng(0), 4, 2, 6, 3)
    p.Wg = Tensor(np.zeros((4, 6)))
    r = moa.route_tokens(Tensor(np.ones((2, 4))), p)
    assert r.indices.tolist() == [[0, 1, 2], [0, 1, 2]]
    assert np.allclose(r.weights.data, 1 / 3, rtol=0, atol=1e-15)


def test_route_hand_example():
    p = moa.MoAParams.init(nm.rng(0), 2, 1, 3, 2)
    p.Wg = Tensor(np.array([[1.0, 0.0, -1.0], [0.0, 0.0, 0.0]]))
    r = moa.route_tokens(Tensor(np.array([[1.0, 0.0]])), p)
    assert r.indices.tolist() == [[0, 1]]
    e = math.e
    assert np.allclose(r.weights.data[0], [e / (e + 1), 1 / (e + 1)], rtol=0, atol=1e-15)
    assert np.allclose(r.weights.data[0], [0.7311, 0.2689], atol=1e-4)


def test_route_full_selection_is_plain_softmax(gen):
    p = _params(gen, n=4, k=4)
    X = gen.normal(size=(3, 4))
    r = moa.route_tokens(Tensor(X), p)
    for t in range(3):
        assert np.allclose(r.weights.data[t], softmax(X[t] @ p.Wg.data), atol=1e-14)


def test_params_reject_bad_k(gen):
    with pytest.raises(ValueError):
        moa.MoAParams.init(gen, 4, 2, 3, 4)
    with pytest.raises(ValueError):
        moa.MoAParams.init(gen, 4, 2, 3, 0)


def _scalar_params(n=1, k=1):
    one = np.ones((1, 1))
    return moa.MoAParams(
        Wq=Tensor(np.ones((n, 1, 1))), Wk=Tensor(one), Wv=Tensor(one),
        Wo=Tensor(np.ones((n, 1, 1))), Wg=Tensor(np.zeros((1, n))), k=k,
    )


def test_expert_attention_scalar_example():
    p = _scalar_params()
    K = Tensor(np.array([[0.0], [math.log(3.0)]]))
    V = Tensor(np.array([[0.0], [4.0]]))
    out = moa.expert_attention(Tensor([1.0]), K, V, 0, p)
    assert abs(out.data[0] - 3.0) < 1e-14


def test_expert_attention_single_key_and_zero_values(gen):
    p = _params(gen)
    v = gen.normal(size=(1, 4))
    for q in (gen.normal(size=4), gen.normal(size=4)):
        out = moa.expert_attention(Tensor(q), Tensor(gen.normal(size=(1, 4))), Tensor(v), 2, p)
        assert np.allclose(out.data, (v @ p.Wv.data) @ p.Wo.data[2], atol=1e-14)
    zero = moa.expert_attention(Tensor(gen.normal(size=4)), Tensor(gen.normal(size=(3, 4))),
                                Tensor(np.zeros((3, 4))), 1, p)
    assert np.array_equal(zero.data, np.zeros(4))


def test_single_expert_is_single_head_attention(gen):
    p = _params(gen, n=1, k=1)
    X = gen.normal(size=(5, 4))
    q, key, val = X @ p.Wq.data[0], X @ p.Wk.data, X @ p.Wv.data
    expected = np.stack([softmax(key @ q[t] / math.sqrt(3)) @ val for t in range(5)]) @ p.Wo.data[0]
    assert np.allclose(moa.moa_forward(X, X, X, p).data, expected, atol=1e-13)


def test_identical_experts_equal_any_single_expert(gen):
    p = _params(gen, n=4, k=2)
    p.Wq = Tensor(np.repeat(p.Wq.data[:1], 4, axis=0))
    p.Wo = Tensor(np.repeat(p.Wo.data[:1], 4, axis=0))
    X = gen.normal(size=(3, 4))
    single = np.stack([moa.expert_attention(Tensor(X[t]), X, X, 0, p).data for t in range(3)])
    assert np.allclose(moa.moa_forward(X, X, X, p).data, single, atol=1e-13)


def test_two_token_toy_matches_dense(gen):
    p = moa.MoAParams.init(gen, 2, 1, 2, 1)
    X = gen.normal(size=(2, 2))
    assert np.abs(moa.moa_forward(X, X, X, p).data - moa_dense(X, *_np(p), 1)).max() < 1e-12


@pytest.mark.parametrize("seed", range(20))
def test_sparse_equals_dense(seed):
    g = nm.rng(seed)
    n = int(g.integers(1, 7))
    k = int(g.integers(1, n + 1))
    p = moa.MoAParams.init(g, 4, 3, n, k)
    X = g.normal(size=(int(g.integers(1, 9)), 4))
    y, r = moa.moa_forward(X, X, X, p, return_routing=True)
    assert np.abs(y.data - moa_dense(X, *_np(p), k)).max() < 1e-12
    assert np.allclose(r.weights.data.sum(-1), 1.0, atol=1e-10)
    assert all(len(set(row)) == k for row in r.indices.tolist())


def test_batched_leading_axes_match_unbatched(gen):
    p = _params(gen)
    X = gen.normal(size=(3, 6, 4))
    batched = moa.moa_forward(X, X, X, p).data
    for b in range(3):
        assert np.allclose(batched[b], moa.moa_forward(X[b], X[b], X[b], p).data, atol=1e-14)


def test_uniform_full_mixture_averages_heads(gen):
    n = 3
    p = _params(gen, n=n, k=n)
    p.Wg = Tensor(np.zeros((4, n)))
    mha = moa.MHAParams(
        Wq=p.Wq, Wk=Tensor(np.repeat(p.Wk.data[None], n, 0)), Wv=Tensor(np.repeat(p.Wv.data[None], n, 0)),
        Wo=Tensor(p.Wo.data / n),
    )
    X = gen.normal(size=(5, 4))
    assert np.allclose(moa.moa_forward(X, X, X, p).data, moa.mha_forward(X, X, X, mha).data, atol=1e-13)


@given(st.integers(0, 10_000))
def test_expert_permutation_equivariance(seed):
    g = nm.rng(seed)
    p = moa.MoAParams.init(g, 4, 2, 5, 2)
    X = g.normal(size=(4, 4))
    perm = g.permutation(5)
    q = moa.MoAParams(Wq=Tensor(p.Wq.data[perm]), Wk=p.Wk, Wv=p.Wv, Wo=Tensor(p.Wo.data[perm]),
                      Wg=Tensor(p.Wg.data[:, perm]), k=2)
    a, b = moa.moa_forward(X, X, X, p).data, moa.moa_forward(X, X, X, q).data
    # exact ties in router probabilities could legitimately reorder selection
    assert np.allclose(a, b, atol=1e-12)


@pytest.mark.parametrize("name", ["Wq", "Wk", "Wv", "Wo", "Wg"])
def test_parameter_gradients(name):
    worst = 0.0
    for seed in range(5):
        g = nm.rng(seed)
        p = moa.MoAParams.init(g, 4, 3, 5, 2)
        X = g.normal(size=(6, 4))

        def f(t):
            setattr(p, name, t)
            return nm.mean(moa.moa_forward(X, X, X, p))

        worst = max(worst, finite_diff_check(f, Tensor(getattr(p, name).data.copy())))
    assert worst < 1e-4


def test_input_gradient(gen):
    p = _params(gen)
    w = gen.normal(size=(6, 4))
    err = finite_diff_check(lambda t: nm.tsum(moa.moa_forward(t, t, t, p) * w), Tensor(gen.normal(size=(6, 4))))
    assert err < 1e-4


def test_expert_load_sums_to_k_hundred():
    idx = np.array([[0, 1], [1, 2], [0, 2], [0, 1]])
    load = moa.expert_load(idx, 4)
    assert load.tolist() == [75.0, 75.0, 50.0, 0.0]
    assert load.sum() == 200.0
