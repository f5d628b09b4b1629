"""Training loop, checkpoint (de)serialisation and pair registration."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .config import RunConfig
from .losses import evaluate
from .model import Model, forward, loss_and_grad
from .volume_io import decode_checkpoint, encode_checkpoint
from .warpfield import warp_labels

log = logging.getLogger(__name__)


class Adam:
    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            # fresh array: tracked tensors are never mutated in place
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def build_model(cfg: RunConfig) -> Model:
    return Model.init(nm.rng(cfg.seed), cfg.encoder_config(), cfg.decoder_config())


@dataclass
class TrainResult:
    model: Model
    trace: list = field(default_factory=list)  # (iteration, total, sim, reg, rc)


def train(cfg: RunConfig, pairs, model: Model | None = None, callback=None) -> TrainResult:
    """Adam on the total loss, cycling through ``pairs`` one at a time (batch 1)."""
    model = build_model(cfg) if model is None else model
    opt = Adam(model.parameters(), lr=cfg.lr)
    weights = cfg.loss_weights()
    trace = []
    for it in range(cfg.iterations):
        pair = pairs[it % len(pairs)]
        model.zero_grad()
        step = loss_and_grad(model, pair.moving.data, pair.fixed.data, weights, cfg.quantile)
        opt.step()
        trace.append((it, step.total, step.sim, step.reg, step.rc))
        if callback is not None:
            callback(it, step)
        log.debug("iter %d total %.6g sim %.6g reg %.6g rc %.6g", it, step.total, step.sim, step.reg, step.rc)
    return TrainResult(model, trace)


def format_trace(trace) -> str:
    lines = ["iteration\ttotal\tsim\treg\trc"]
    lines += [f"{i}\t{t!r}\t{s!r}\t{r!r}\t{c!r}" for i, t, s, r, c in trace]
    return "\n".join(lines) + "\n"


def checkpoint_bytes(model: Model, cfg: RunConfig) -> bytes:
    return encode_checkpoint(model.named_parameters(), cfg.to_text())


def model_from_checkpoint(buf: bytes):
    cfg_text, tensors = decode_checkpoint(buf)
    cfg = RunConfig.from_text(cfg_text)
    model = build_model(cfg)
    params = dict(model.named_parameters())
    missing = set(params) - set(tensors)
    extra = set(tensors) - set(params)
    if missing or extra:
        raise ValueError(f"checkpoint does not match its config: missing {sorted(missing)}, extra {sorted(extra)}")
    for name, t in params.items():
        if tensors[name].shape != t.shape:
            raise ValueError(f"checkpoint tensor {name} has shape {tensors[name].shape}, expected {t.shape}")
        t.data = tensors[name].copy()
    return model, cfg


def register(model: Model, moving, fixed):
    """Deformation field and warped moving image as numpy arrays."""
    res = forward(model, moving, fixed)
    return res.phi.data, res.warped.data


def evaluate_pair(pair, phi=None):
    """EvalReport for a pair after warping its moving labels by ``phi`` (identity if None)."""
    seg = pair.moving_seg.labels if phi is None else warp_labels(pair.moving_seg.labels, phi)
    return evaluate(seg, pair.fixed_seg.labels, phi, pair.fixed_seg.spacing)
