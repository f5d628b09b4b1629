"""Hierarchical windowed-attention encoder shared by both images of a pair.

Features are kept channel-last (D×H×W×C) inside the encoder and returned
channel-first (C×D×H×W) per pyramid level. Attention inside each window is
a mixture of attention heads, or plain multi-head attention when MoA is
switched off.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .moa import MHAParams, MoAParams, mha_forward, moa_forward
from .numerics import Tensor


class ConfigError(ValueError):
    pass


@dataclass
class EncoderConfig:
    in_channels: int = 1
    patch_size: int = 2
    embed_dim: int = 16
    depths: tuple = (2, 2, 2, 2)
    window_size: int = 4
    head_dim: int = 8
    moa_experts: int = 12
    moa_k: int = 4
    use_moa: bool = True
    mha_heads: int = 4
    mlp_ratio: int = 4

    @property
    def levels(self) -> int:
        return len(self.depths)

    def level_channels(self, level: int) -> int:
        return self.embed_dim * 2 ** level

    def level_shapes(self, shape):
        """Spatial extents of every pyramid level for an input of ``shape``."""
        div = self.patch_size * 2 ** (self.levels - 1)
        if any(n % div for n in shape):
            raise ConfigError(f"input extents {tuple(shape)} must be divisible by {div}")
        base = [n // self.patch_size for n in shape]
        return [tuple(n // 2 ** lv for n in base) for lv in range(self.levels)]

    def effective_window(self, level_shape) -> int:
        ws = min(self.window_size, *level_shape)
        if any(n % ws for n in level_shape):
            raise ConfigError(f"window {ws} does not divide level extents {level_shape}")
        return ws


@dataclass
class Linear:
    W: Tensor
    b: Tensor | None

    @classmethod
    def init(cls, gen, n_in, n_out, bias=True, scale=1.0):
        W = Tensor(gen.normal(0.0, scale / np.sqrt(n_in), size=(n_in, n_out)), requires_grad=True)
        return cls(W, Tensor(np.zeros(n_out), requires_grad=True) if bias else None)

    def __call__(self, x):
        y = nm.matmul(x, self.W)
        return y + self.b if self.b is not None else y

    def named_parameters(self, prefix=""):
        yield prefix + "W", self.W
        if self.b is not None:
            yield prefix + "b", self.b


@dataclass
class Norm:
    scale: Tensor
    offset: Tensor

    @classmethod
    def init(cls, dim):
        return cls(Tensor(np.ones(dim), requires_grad=True), Tensor(np.zeros(dim), requires_grad=True))

    def __call__(self, x):
        return nm.layer_norm(x, self.scale, self.offset)

    def named_parameters(self, prefix=""):
        yield prefix + "scale", self.scale
        yield prefix + "offset", self.offset


def window_partition(x, ws: int):
    """D×H×W×C -> (num_windows)×ws³×C."""
    d, h, w, c = x.shape
    x = nm.reshape(x, (d // ws, ws, h // ws, ws, w // ws, ws, c))
    x = nm.transpose(x, (0, 2, 4, 1, 3, 5, 6))
    return nm.reshape(x, (-1, ws ** 3, c))


def window_reverse(win, ws: int, shape):
    d, h, w = shape
    c = win.shape[-1]
    x = nm.reshape(win, (d // ws, h // ws, w // ws, ws, ws, ws, c))
    x = nm.transpose(x, (0, 3, 1, 4, 2, 5, 6))
    return nm.reshape(x, (d, h, w, c))


def cyclic_shift(x, s: int):
    return nm.roll(x, (-s, -s, -s), axis=(0, 1, 2))


def cyclic_unshift(x, s: int):
    return nm.roll(x, (s, s, s), axis=(0, 1, 2))


@dataclass
class Block:
    norm1: Norm
    attn: MoAParams | MHAParams
    norm2: Norm
    fc1: Linear
    fc2: Linear
    shift: bool

    @classmethod
    def init(cls, gen, dim, cfg: EncoderConfig, shift: bool):
        if cfg.use_moa:
            attn = MoAParams.init(gen, dim, cfg.head_dim, cfg.moa_experts, cfg.moa_k,
                                  out_scale=1.0 / np.sqrt(cfg.moa_k))
        else:
            attn = MHAParams.init(gen, dim, cfg.head_dim, cfg.mha_heads, out_scale=1.0 / np.sqrt(cfg.mha_heads))
        hidden = dim * cfg.mlp_ratio
        return cls(Norm.init(dim), attn, Norm.init(dim), Linear.init(gen, dim, hidden), Linear.init(gen, hidden, dim),
                   shift)

    def named_parameters(self, prefix=""):
        yield from self.norm1.named_parameters(prefix + "norm1.")
        yield from self.attn.named_parameters(prefix + "attn.")
        yield from self.norm2.named_parameters(prefix + "norm2.")
        yield from self.fc1.named_parameters(prefix + "fc1.")
        yield from self.fc2.named_parameters(prefix + "fc2.")

    def __call__(self, x, ws: int, record=None):
        shape = x.shape[:3]
        shift = self.shift and ws < min(shape)
        h = self.norm1(x)
        if shift:
            h = cyclic_shift(h, ws // 2)
        win = window_partition(h, ws)
        if isinstance(self.attn, MoAParams):
            out, routing = moa_forward(win, win, win, self.attn, return_routing=True)
            if record is not None:
                record.append(routing.indices)
        else:
            out = mha_forward(win, win, win, self.attn)
        h = window_reverse(out, ws, shape)
        if shift:
            h = cyclic_unshift(h, ws // 2)
        x = x + h
        return x + self.fc2(nm.gelu(self.fc1(self.norm2(x))))


@dataclass
class Encoder:
    cfg: EncoderConfig
    embed: Linear
    embed_norm: Norm
    levels: list = field(default_factory=list)  # list of lists of Blocks
    merges: list = field(default_factory=list)  # (Norm, Linear) between levels

    @classmethod
    def init(cls, gen, cfg: EncoderConfig):
        p = cfg.patch_size
        embed = Linear.init(gen, cfg.in_channels * p ** 3, cfg.embed_dim)
        levels, merges = [], []
        for lv, depth in enumerate(cfg.depths):
            dim = cfg.level_channels(lv)
            levels.append([Block.init(gen, dim, cfg, shift=bool(i % 2)) for i in range(depth)])
            if lv + 1 < cfg.levels:
                merges.append((Norm.init(8 * dim), Linear.init(gen, 8 * dim, 2 * dim, bias=False)))
        return cls(cfg, embed, Norm.init(cfg.embed_dim), levels, merges)

    def named_parameters(self, prefix=""):
        yield from self.embed.named_parameters(prefix + "embed.")
        yield from self.embed_norm.named_parameters(prefix + "embed_norm.")
        for lv, blocks in enumerate(self.levels):
            for i, blk in enumerate(blocks):
                yield from blk.named_parameters(f"{prefix}level{lv + 1}.block{i}.")
            if lv < len(self.merges):
                norm, lin = self.merges[lv]
                yield from norm.named_parameters(f"{prefix}merge{lv + 1}.norm.")
                yield from lin.named_parameters(f"{prefix}merge{lv + 1}.reduce.")

    def __call__(self, vol, record=None):
        """Feature pyramid (list of C_l×D_l×H_l×W_l tensors, finest first).

        ``record``, if given, is a dict that collects MoA expert indices per
        level under keys ``level1``, ``level2``, ...
        """
        vol = nm.as_tensor(vol)
        shapes = self.cfg.level_shapes(vol.shape[1:])
        x = self.embed_norm(patch_embed(vol, self.embed, self.cfg.patch_size))
        pyramid = []
        for lv, blocks in enumerate(self.levels):
            ws = self.cfg.effective_window(shapes[lv])
            rec = None
            if record is not None:
                rec = record.setdefault(f"level{lv + 1}", [])
            for blk in blocks:
                x = blk(x, ws, rec)
            pyramid.append(nm.transpose(x, (3, 0, 1, 2)))
            if lv < len(self.merges):
                x = patch_merge(x, *self.merges[lv])
        return pyramid


def patch_embed(vol, proj: Linear, p: int):
    """Non-overlapping p³ patches of a C×D×H×W volume projected to D'×H'×W'×E."""
    c, d, h, w = vol.shape
    if d % p or h % p or w % p:
        raise ConfigError(f"volume extents {(d, h, w)} are not divisible by patch size {p}")
    x = nm.reshape(vol, (c, d // p, p, h // p, p, w // p, p))
    x = nm.transpose(x, (1, 3, 5, 0, 2, 4, 6))
    x = nm.reshape(x, (d // p, h // p, w // p, c * p ** 3))
    return proj(x)


def patch_merge(x, norm: Norm, reduce: Linear):
    """Concatenate each 2³ neighbourhood (8C channels), normalise, reduce to 2C."""
    d, h, w, c = x.shape
    x = nm.reshape(x, (d // 2, 2, h // 2, 2, w // 2, 2, c))
    x = nm.transpose(x, (0, 2, 4, 1, 3, 5, 6))
    x = nm.reshape(x, (d // 2, h // 2, w // 2, 8 * c))
    return reduce(norm(x))


def encode_pair(encoder: Encoder, moving, fixed, record=None):
    """Run the shared encoder on both images; returns (moving, fixed) pyramids."""
    moving, fixed = nm.as_tensor(moving), nm.as_tensor(fixed)
    if moving.shape != fixed.shape:
        raise ValueError(f"moving {moving.shape} and fixed {fixed.shape} differ in shape")
    return encoder(moving, record), encoder(fixed, record)
