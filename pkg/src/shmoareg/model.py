"""Full registration network and one training-step evaluation of the loss."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .decoder import Decoder, DecoderConfig, SHMoEHead, stage_name
from .encoder import Encoder, EncoderConfig, encode_pair
from .losses import LossWeights, reg_loss, sim_loss
from .moa import expert_load as moa_expert_load
from .numerics import NumericError, Tensor
from .shmoe import build_rc_labels, expert_load, rc_loss
from .warpfield import warp


@dataclass
class Model:
    encoder: Encoder
    decoder: Decoder

    @classmethod
    def init(cls, gen, enc_cfg: EncoderConfig, dec_cfg: DecoderConfig, head_scale=0.0):
        if enc_cfg.patch_size != 2:
            raise ValueError("the pyramid decoder expects encoder level 1 at half resolution (patch_size 2)")
        enc = Encoder.init(gen, enc_cfg)
        dec = Decoder.init(gen, dec_cfg, [enc_cfg.level_channels(lv) for lv in range(enc_cfg.levels)], head_scale)
        return cls(enc, dec)

    def named_parameters(self):
        yield from self.encoder.named_parameters("encoder.")
        yield from self.decoder.named_parameters("decoder.")

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def parameter_count(self) -> int:
        return sum(t.size for t in self.parameters())

    def zero_grad(self):
        for t in self.parameters():
            t.grad = None

    def __call__(self, moving, fixed, record=None):
        return forward(self, moving, fixed, record)


@dataclass
class ForwardResult:
    phi: Tensor
    warped: Tensor
    stages: dict  # stage index -> StageResult
    moa_routing: dict = field(default_factory=dict)  # encoder level -> list of index arrays

    def shmoe_layers(self):
        """(stage index, direction, delta tensor, RoutingTensor) for every SHMoE layer."""
        for s in sorted(self.stages):
            res = self.stages[s]
            if res.shmoe is None:
                continue
            deltas, routings = res.shmoe
            for d, (delta, routing) in enumerate(zip(deltas, routings)):
                yield s, d, delta, routing


def forward(model: Model, moving, fixed, record=None) -> ForwardResult:
    moving, fixed = nm.as_tensor(moving), nm.as_tensor(fixed)
    rec = {} if record is None else record
    pyr_m, pyr_f = encode_pair(model.encoder, moving, fixed, rec)
    phi, stages = model.decoder(pyr_m, pyr_f, moving, fixed)
    return ForwardResult(phi, warp(moving, phi), stages, rec)


@dataclass
class StepResult:
    total: float
    sim: float
    reg: float
    rc: float
    forward: ForwardResult
    labels: list = field(default_factory=list)  # routing targets per SHMoE layer, in shmoe_layers() order


def loss_and_grad(model: Model, moving, fixed, weights: LossWeights, quantile=0.5) -> StepResult:
    """Evaluate the total loss and accumulate its parameter gradients.

    The similarity loss is back-propagated first so the gradient it leaves on
    each SHMoE output serves as that layer's error signal; routing labels
    are built from it (no gradient through them), then the regularisation
    and routing terms are back-propagated on top. Gradients add up to those
    of the weighted total.
    """
    res = forward(model, moving, fixed)
    sim = sim_loss(res.warped, fixed)
    reg = reg_loss(res.phi)
    _check_finite(sim=sim, reg=reg)
    sim.backward()

    rc_terms, all_labels = [], []
    for _, _, delta, routing in res.shmoe_layers():
        eps = delta.grad if delta.grad is not None else np.zeros(delta.shape)
        labels = build_rc_labels(eps, routing.mask, quantile, routing.indices.shape[0])
        all_labels.append(labels)
        rc_terms.append(rc_loss(routing.probs, labels))
    rc = None
    if rc_terms:
        rc = rc_terms[0]
        for t in rc_terms[1:]:
            rc = rc + t
        rc = rc * (1.0 / len(rc_terms))
        _check_finite(rc=rc)
    rest = reg * weights.reg
    if rc is not None:
        rest = rest + rc * weights.rc
    rest.backward()

    rc_val = float(rc.data) if rc is not None else 0.0
    total = float(sim.data) + weights.reg * float(reg.data) + weights.rc * rc_val
    return StepResult(total, float(sim.data), float(reg.data), rc_val, res, all_labels)


def _check_finite(**terms):
    for name, t in terms.items():
        if not np.isfinite(t.data).all():
            raise NumericError(f"non-finite {name} loss: {t.data}")


def expert_load_tables(res: ForwardResult, n_moa: int | None = None):
    """Per-layer expert load percentages.

    Returns a list of (layer name, loads) rows: one per encoder level
    (aggregated over its blocks and both images) and one per SHMoE
    layer and direction.
    """
    rows = []
    for level in sorted(res.moa_routing):
        idx = res.moa_routing[level]
        if not idx:
            continue
        flat = np.concatenate([i.reshape(-1, i.shape[-1]) for i in idx])
        n = n_moa if n_moa is not None else int(flat.max()) + 1
        rows.append((f"encoder.{level}", moa_expert_load(flat, n)))
    for s, d, _, routing in res.shmoe_layers():
        rows.append((f"decoder.res{stage_name(s)}.dir{'xyz'[d]}", expert_load(routing)))
    return rows


def shmoe_expert_maps(res: ForwardResult):
    """{(stage, direction): D×H×W uint16 map of selected expert ids}."""
    return {(s, d): routing.expert_ids() for s, d, _, routing in res.shmoe_layers()}


def has_shmoe(model: Model) -> bool:
    return any(isinstance(h, SHMoEHead) for h in model.decoder.heads)
