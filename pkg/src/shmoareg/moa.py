"""Mixture of attention heads.

Each of the N experts is an attention head with its own query and output
projections; key and value projections are shared by all experts. A linear
router picks the top-k experts per token and mixes their outputs with the
renormalised router probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import Tensor


@dataclass
class MoAParams:
    Wq: Tensor  # N × d_m × d_h
    Wk: Tensor  # d_m × d_h
    Wv: Tensor  # d_m × d_h
    Wo: Tensor  # N × d_h × d_m
    Wg: Tensor  # d_m × N
    k: int

    def __post_init__(self):
        n = self.Wq.shape[0]
        if not 1 <= self.k <= n:
            raise ValueError(f"MoA needs 1 <= k <= N, got k={self.k}, N={n}")

    @property
    def n_experts(self) -> int:
        return self.Wq.shape[0]

    @property
    def head_dim(self) -> int:
        return self.Wk.shape[1]

    def named_parameters(self, prefix=""):
        for name in ("Wq", "Wk", "Wv", "Wo", "Wg"):
            yield prefix + name, getattr(self, name)

    @classmethod
    def init(cls, gen: np.random.Generator, d_m: int, d_h: int, n: int, k: int, out_scale: float = 1.0):
        def w(*shape, fan_in):
            return Tensor(gen.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape), requires_grad=True)

        return cls(
            Wq=w(n, d_m, d_h, fan_in=d_m),
            Wk=w(d_m, d_h, fan_in=d_m),
            Wv=w(d_m, d_h, fan_in=d_m),
            Wo=Tensor(w(n, d_h, d_m, fan_in=d_h).data * out_scale, requires_grad=True),
            Wg=w(d_m, n, fan_in=d_m),
            k=k,
        )


@dataclass
class TokenRouting:
    indices: np.ndarray  # ... × k, ascending expert ids
    weights: Tensor  # ... × k, sums to 1 per token
    probs: Tensor  # ... × N, dense router probabilities


def route_tokens(Q, params: MoAParams) -> TokenRouting:
    """Top-k routing on raw token embeddings (last axis d_m)."""
    probs = nm.softmax(nm.matmul(Q, params.Wg), axis=-1)
    idx, _ = nm.topk(probs, params.k, axis=-1)
    sel = nm.take_along_axis(probs, idx, axis=-1)
    weights = sel / nm.tsum(sel, axis=-1, keepdims=True)
    return TokenRouting(idx, weights, probs)


def expert_attention(q_t, K, V, i: int, params: MoAParams):
    """Output of expert ``i`` for a single query token against T keys/values."""
    q = nm.matmul(nm.reshape(q_t, (1, -1)), params.Wq[i])  # 1 × d_h
    keys = nm.matmul(K, params.Wk)  # T × d_h
    vals = nm.matmul(V, params.Wv)
    att = nm.softmax(nm.matmul(q, keys.transpose(1, 0)) * (1.0 / np.sqrt(params.head_dim)), axis=-1)
    return nm.reshape(nm.matmul(nm.matmul(att, vals), params.Wo[i]), (-1,))


def moa_forward(Q, K, V, params: MoAParams, routing: TokenRouting | None = None, return_routing=False):
    """Sparse MoA over the last two axes (tokens × d_m); leading axes batch.

    Only the k selected experts' queries and output projections are
    evaluated per token; the shared keys and values are computed once.
    """
    Q, K, V = nm.as_tensor(Q), nm.as_tensor(K), nm.as_tensor(V)
    if K.shape[-2] != V.shape[-2]:
        raise nm.ShapeError(f"key/value token counts differ: {K.shape} vs {V.shape}")
    if routing is None:
        routing = route_tokens(Q, params)
    idx = routing.indices  # B × T × k
    d_h = params.head_dim
    keys = nm.matmul(K, params.Wk)  # B × S × d_h
    vals = nm.matmul(V, params.Wv)
    wq = nm.take(params.Wq, idx, axis=0)  # B × T × k × d_m × d_h
    q = nm.einsum("...tm,...tkmh->...tkh", Q, wq)
    # (token, selected expert) pairs flattened into rows for batched matmuls
    lead, t, k = q.shape[:-3], q.shape[-3], q.shape[-2]
    rows = nm.reshape(q, lead + (t * k, d_h))
    scores = nm.matmul(rows, nm.transpose(keys, tuple(range(len(lead))) + (len(lead) + 1, len(lead))))
    att = nm.softmax(scores * (1.0 / np.sqrt(d_h)), axis=-1)
    heads = nm.reshape(nm.matmul(att, vals), lead + (t, k, d_h))
    wo = nm.take(params.Wo, idx, axis=0)  # B × T × k × d_h × d_m
    outs = nm.einsum("...tkh,...tkhm->...tkm", heads, wo)
    y = nm.einsum("...tkm,...tk->...tm", outs, routing.weights)
    if return_routing:
        return y, routing
    return y


@dataclass
class MHAParams:
    """Standard multi-head attention with per-head projections; the MoA-off
    ablation baseline. Head outputs are summed after their output projection,
    which is the same as concatenating and projecting once."""

    Wq: Tensor  # H × d_m × d_h
    Wk: Tensor
    Wv: Tensor
    Wo: Tensor  # H × d_h × d_m

    def named_parameters(self, prefix=""):
        for name in ("Wq", "Wk", "Wv", "Wo"):
            yield prefix + name, getattr(self, name)

    @classmethod
    def init(cls, gen: np.random.Generator, d_m: int, d_h: int, heads: int, out_scale: float = 1.0):
        def w(*shape, fan_in):
            return Tensor(gen.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape), requires_grad=True)

        return cls(
            Wq=w(heads, d_m, d_h, fan_in=d_m),
            Wk=w(heads, d_m, d_h, fan_in=d_m),
            Wv=w(heads, d_m, d_h, fan_in=d_m),
            Wo=Tensor(w(heads, d_h, d_m, fan_in=d_h).data * out_scale, requires_grad=True),
        )


def mha_forward(Q, K, V, params: MHAParams):
    d_h = params.Wq.shape[2]
    q = nm.einsum("...tm,nmh->...nth", Q, params.Wq)
    keys = nm.einsum("...sm,nmh->...nsh", K, params.Wk)
    vals = nm.einsum("...sm,nmh->...nsh", V, params.Wv)
    att = nm.softmax(nm.einsum("...nth,...nsh->...nts", q, keys) * (1.0 / np.sqrt(d_h)), axis=-1)
    heads = nm.einsum("...nts,...nsh->...nth", att, vals)
    return nm.einsum("...nth,nhm->...tm", heads, params.Wo)


def expert_load(indices: np.ndarray, n_experts: int) -> np.ndarray:
    """Percentage of tokens that select each expert; sums to k·100."""
    idx = np.asarray(indices)
    k = idx.shape[-1]
    counts = np.bincount(idx.reshape(-1), minlength=n_experts).astype(np.float64)
    return 100.0 * counts / (idx.size / k)
