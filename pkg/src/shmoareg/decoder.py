"""Coarse-to-fine pyramid decoder.

Stage 0 works at full resolution on a small convolutional stem over the
(warped moving, fixed) images; stage s >= 1 works on encoder level s. Each
stage warps the moving features with the upsampled coarser field, predicts
a residual displacement with either a plain 3-channel convolution head or
three direction-wise SHMoE layers, and adds it on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .encoder import ConfigError
from .numerics import Tensor
from .shmoe import SHMoEParams, shmoe_forward_many
from .warpfield import integrate_velocity, upsample_field, warp

HEAD_TYPES = ("conv", "shmoe")


def stage_name(s: int) -> str:
    return "1" if s == 0 else f"1/{2 ** s}"


@dataclass
class DecoderConfig:
    heads: tuple = ("shmoe", "shmoe", "conv", "conv", "conv")  # full resolution first
    active_stages: int | None = None  # finest n stages; None = all
    stem_channels: int = 8
    shmoe_kernel_sizes: tuple = (1, 3, 5)
    shmoe_k: int = 1
    diffeomorphic: bool = False
    int_steps: int = 7

    def __post_init__(self):
        self.heads = tuple(self.heads)
        bad = [h for h in self.heads if h not in HEAD_TYPES]
        if bad:
            raise ConfigError(f"unknown head type(s) {bad}; expected one of {HEAD_TYPES}")

    @property
    def n_stages(self) -> int:
        return len(self.heads) if self.active_stages is None else self.active_stages


@dataclass
class ConvHead:
    kernel: Tensor
    bias: Tensor

    @classmethod
    def init(cls, gen, channels, scale=0.0):
        w = gen.normal(0.0, 1.0 / np.sqrt(channels * 27), size=(3, channels, 3, 3, 3)) * scale
        return cls(Tensor(w, requires_grad=True), Tensor(np.zeros(3), requires_grad=True))

    def named_parameters(self, prefix=""):
        yield prefix + "kernel", self.kernel
        yield prefix + "bias", self.bias

    def __call__(self, feat):
        return nm.conv3d(feat, self.kernel, self.bias), None


@dataclass
class SHMoEHead:
    directions: list  # three SHMoEParams, one per displacement axis

    @classmethod
    def init(cls, gen, channels, kernel_sizes, k, scale=0.0):
        return cls([SHMoEParams.init(gen, channels, kernel_sizes, k, expert_scale=scale) for _ in range(3)])

    def named_parameters(self, prefix=""):
        for d, p in enumerate(self.directions):
            yield from p.named_parameters(f"{prefix}dir{d}.")

    def __call__(self, feat):
        deltas, routings = [], []
        for delta, routing in shmoe_forward_many(feat, self.directions):
            delta.retain_grad = True
            deltas.append(delta)
            routings.append(routing)
        return nm.concat(deltas, axis=0), (deltas, routings)


@dataclass
class Stem:
    conv1: tuple
    conv2: tuple

    @classmethod
    def init(cls, gen, channels):
        def conv(cin, cout):
            w = gen.normal(0.0, 1.0 / np.sqrt(cin * 27), size=(cout, cin, 3, 3, 3))
            return Tensor(w, requires_grad=True), Tensor(np.zeros(cout), requires_grad=True)

        return cls(conv(2, channels), conv(channels, channels))

    def named_parameters(self, prefix=""):
        yield prefix + "conv1.kernel", self.conv1[0]
        yield prefix + "conv1.bias", self.conv1[1]
        yield prefix + "conv2.kernel", self.conv2[0]
        yield prefix + "conv2.bias", self.conv2[1]

    def __call__(self, x):
        x = nm.gelu(nm.conv3d(x, *self.conv1))
        return nm.gelu(nm.conv3d(x, *self.conv2))


@dataclass
class StageResult:
    delta: Tensor
    phi: Tensor
    shmoe: tuple | None = None  # (per-direction deltas, per-direction RoutingTensor)


@dataclass
class Decoder:
    cfg: DecoderConfig
    stem: Stem
    heads: list = field(default_factory=list)

    @classmethod
    def init(cls, gen, cfg: DecoderConfig, level_channels, head_scale=0.0):
        """``level_channels[s-1]`` is the channel count of encoder level s."""
        if len(cfg.heads) != len(level_channels) + 1:
            raise ConfigError(f"{len(cfg.heads)} head types for {len(level_channels)} encoder levels "
                              f"plus a full-resolution stage")
        stem = Stem.init(gen, cfg.stem_channels)
        heads = []
        for s, kind in enumerate(cfg.heads):
            ch = cfg.stem_channels if s == 0 else 2 * level_channels[s - 1]
            if kind == "conv":
                heads.append(ConvHead.init(gen, ch, head_scale))
            else:
                heads.append(SHMoEHead.init(gen, ch, cfg.shmoe_kernel_sizes, cfg.shmoe_k, head_scale))
        return cls(cfg, stem, heads)

    def named_parameters(self, prefix=""):
        yield from self.stem.named_parameters(prefix + "stem.")
        for s, head in enumerate(self.heads):
            yield from head.named_parameters(f"{prefix}stage{s}.{self.cfg.heads[s]}.")

    def stage_features(self, s, pyr_m, pyr_f, moving, fixed, phi_in):
        if s == 0:
            warped = warp(moving, phi_in) if phi_in is not None else nm.as_tensor(moving)
            return self.stem(nm.concat([warped, nm.as_tensor(fixed)], axis=0))
        fm, ff = pyr_m[s - 1], pyr_f[s - 1]
        if phi_in is not None:
            fm = warp(fm, phi_in)
        return nm.concat([fm, ff], axis=0)

    def decode_level(self, s, feat, phi_in) -> StageResult:
        """Predict the residual at stage ``s`` from its features and add it on."""
        delta, extra = self.heads[s](feat)
        step = integrate_velocity(delta, self.cfg.int_steps) if self.cfg.diffeomorphic else delta
        phi = step if phi_in is None else phi_in + step
        return StageResult(delta, phi, extra)

    def __call__(self, pyr_m, pyr_f, moving, fixed):
        """Full-resolution field plus per-stage results (coarsest first)."""
        n = self.cfg.n_stages
        if not 1 <= n <= len(self.heads):
            raise ConfigError(f"active stages must be in 1..{len(self.heads)}, got {n}")
        phi = None
        results = {}
        for s in reversed(range(n)):
            if phi is not None:
                phi = upsample_field(phi)
            feat = self.stage_features(s, pyr_m, pyr_f, moving, fixed, phi)
            res = self.decode_level(s, feat, phi)
            results[s] = res
            phi = res.phi
        return phi, results


def head_parameter_count(head) -> int:
    return sum(t.size for _, t in head.named_parameters())
