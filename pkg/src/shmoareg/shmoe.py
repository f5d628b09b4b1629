"""Spatially heterogeneous mixture of experts for one displacement direction.

Experts are single-output convolutions of different kernel sizes. A
convolutional router scores the experts at every voxel; the top-k are kept
and their outputs mixed. The router is supervised by a routing
classification loss whose labels come from the magnitude of the similarity
loss gradient at each voxel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import Tensor

RC_CLAMP = 1e-7


@dataclass
class SHMoEParams:
    kernels: list[Tensor]  # one 1×C×s×s×s kernel per expert
    biases: list[Tensor]  # one (1,) bias per expert
    router_kernel: Tensor  # N×C×r×r×r
    router_bias: Tensor  # (N,)
    k: int = 1

    def __post_init__(self):
        n = len(self.kernels)
        if self.router_kernel.shape[0] != n:
            raise ValueError(f"router emits {self.router_kernel.shape[0]} channels for {n} experts")
        if not 1 <= self.k <= n:
            raise ValueError(f"SHMoE needs 1 <= k <= N, got k={self.k}, N={n}")

    @property
    def n_experts(self) -> int:
        return len(self.kernels)

    def named_parameters(self, prefix=""):
        for i, (kern, b) in enumerate(zip(self.kernels, self.biases)):
            yield f"{prefix}expert{i}.kernel", kern
            yield f"{prefix}expert{i}.bias", b
        yield prefix + "router.kernel", self.router_kernel
        yield prefix + "router.bias", self.router_bias

    @classmethod
    def init(cls, gen, channels: int, kernel_sizes=(1, 3, 5), k: int = 1, router_size: int = 3,
             expert_scale: float = 0.0):
        """Experts start at ``expert_scale`` times a fan-in normal draw
        (zero by default, so the layer initially predicts no displacement)."""
        kernels, biases = [], []
        for s in kernel_sizes:
            fan_in = channels * s ** 3
            w = gen.normal(0.0, 1.0 / np.sqrt(fan_in), size=(1, channels, s, s, s)) * expert_scale
            kernels.append(Tensor(w, requires_grad=True))
            biases.append(Tensor(np.zeros(1), requires_grad=True))
        fan_in = channels * router_size ** 3
        rk = gen.normal(0.0, 1.0 / np.sqrt(fan_in), size=(len(kernel_sizes), channels) + (router_size,) * 3)
        return cls(kernels, biases, Tensor(rk, requires_grad=True),
                   Tensor(np.zeros(len(kernel_sizes)), requires_grad=True), k)


@dataclass
class RoutingTensor:
    values: Tensor  # N×D×H×W, k nonzeros per voxel summing to 1
    probs: Tensor  # N×D×H×W dense router softmax
    indices: np.ndarray  # k×D×H×W selected expert ids, ascending

    @property
    def mask(self) -> np.ndarray:
        return self.values.data != 0 if self.indices is None else _mask_from(self.indices, self.values.shape[0])

    def expert_ids(self) -> np.ndarray:
        """Per-voxel id of the highest-weighted selected expert (D×H×W)."""
        return np.argmax(self.values.data, axis=0).astype(np.uint16)


def _mask_from(indices, n):
    mask = np.zeros((n,) + indices.shape[1:], dtype=bool)
    np.put_along_axis(mask, indices, True, axis=0)
    return mask


def route_voxels(f, params: SHMoEParams) -> RoutingTensor:
    logits = nm.conv3d(f, params.router_kernel, params.router_bias)
    probs = nm.softmax(logits, axis=0)
    idx, _ = nm.topk(probs, params.k, axis=0)
    mask = _mask_from(idx, params.n_experts).astype(np.float64)
    kept = probs * mask
    values = kept / nm.tsum(kept, axis=0, keepdims=True)
    return RoutingTensor(values, probs, idx)


def expert_outputs(f, params: SHMoEParams) -> Tensor:
    """All experts evaluated everywhere, stacked to N×D×H×W."""
    outs = [nm.conv3d(f, kern, b) for kern, b in zip(params.kernels, params.biases)]
    return nm.concat(outs, axis=0)


def shmoe_forward(f, params: SHMoEParams):
    """Residual displacement along one direction (1×D×H×W) and its routing.

    Unselected experts carry an exact zero in the routing tensor, so the
    weighted sum over experts is the gather of the selected outputs.
    """
    f = nm.as_tensor(f)
    routing = route_voxels(f, params)
    experts = expert_outputs(f, params)
    delta = nm.tsum(routing.values * experts, axis=0, keepdims=True)
    return delta, routing


def shmoe_forward_many(f, layers):
    """``shmoe_forward`` for several layers reading the same features.

    Kernels of equal size are stacked along the output channel so each
    kernel size costs one convolution; the result is identical to running
    the layers one by one.
    """
    f = nm.as_tensor(f)
    n = layers[0].n_experts
    logits = nm.conv3d(f, nm.concat([p.router_kernel for p in layers], axis=0),
                       nm.concat([p.router_bias for p in layers], axis=0))
    experts = []
    for e in range(n):
        kern = nm.concat([p.kernels[e] for p in layers], axis=0)
        bias = nm.concat([p.biases[e] for p in layers], axis=0)
        experts.append(nm.conv3d(f, kern, bias))  # m × D×H×W
    out = []
    for j, p in enumerate(layers):
        probs = nm.softmax(logits[j * n:(j + 1) * n], axis=0)
        idx, _ = nm.topk(probs, p.k, axis=0)
        mask = _mask_from(idx, n).astype(np.float64)
        kept = probs * mask
        values = kept / nm.tsum(kept, axis=0, keepdims=True)
        stacked = nm.concat([experts[e][j:j + 1] for e in range(n)], axis=0)
        delta = nm.tsum(values * stacked, axis=0, keepdims=True)
        out.append((delta, RoutingTensor(values, probs, idx)))
    return out


def build_rc_labels(eps, selected: np.ndarray, q: float, k: int | None = None) -> np.ndarray:
    """Router targets from an error signal and the current selection.

    ``eps`` is the per-voxel error (D×H×W or 1×D×H×W); ``selected`` is a
    boolean N×D×H×W mask with k entries set per voxel. A voxel is wrong when
    |eps| exceeds the q-th quantile of |eps|. At a right voxel the selected
    experts get 1 and the rest 0. At a wrong voxel the selected experts get
    0 and every unselected expert gets 1/(N-k) per wrongly selected expert,
    capped at 1.
    """
    if not 0.0 < q < 1.0:
        raise ValueError(f"quantile must lie in (0, 1), got {q}")
    mag = np.abs(np.asarray(eps.data if isinstance(eps, Tensor) else eps, dtype=np.float64))
    selected = np.asarray(selected, dtype=bool)
    n = selected.shape[0]
    mag = mag.reshape(selected.shape[1:])
    if k is None:
        k = int(selected[(slice(None),) + (0,) * (selected.ndim - 1)].sum())
    tau = np.quantile(mag, q)
    wrong = mag > tau
    y = selected.astype(np.float64)
    if n > k:
        bump = min(1.0, k / (n - k))
        y = np.where(wrong[None], np.where(selected, 0.0, bump), y)
    else:
        y = np.where(wrong[None], 0.0, y)
    return y


def rc_loss(probs, labels) -> Tensor:
    """Binary cross-entropy between router probabilities and labels,
    averaged over experts and voxels. Labels carry no gradient."""
    probs = nm.as_tensor(probs)
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != probs.shape:
        raise nm.ShapeError(f"labels {y.shape} do not match routing tensor {probs.shape}")
    t = nm.clip(probs, RC_CLAMP, 1.0 - RC_CLAMP)
    bce = nm.log(t) * y + nm.log(1.0 - t) * (1.0 - y)
    return -nm.mean(bce)


def expert_load(routing) -> np.ndarray:
    """Percentage of voxels at which each expert is among the selected."""
    if isinstance(routing, RoutingTensor):
        mask = routing.mask
    else:
        mask = np.asarray(routing.data if isinstance(routing, Tensor) else routing) != 0
    n = mask.shape[0]
    voxels = mask[0].size
    return 100.0 * mask.reshape(n, -1).sum(axis=1) / voxels
