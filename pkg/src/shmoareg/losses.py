"""Training objective and evaluation metrics."""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .numerics import Tensor
from .warpfield import jacobian_folding


class MetricUndefined(ValueError):
    pass


@dataclass
class LossWeights:
    reg: float = 0.01
    rc: float = 0.001

    def __post_init__(self):
        if self.reg < 0 or self.rc < 0:
            raise ValueError(f"loss weights must be non-negative, got reg={self.reg}, rc={self.rc}")


def sim_loss(warped, fixed) -> Tensor:
    """Mean squared intensity difference."""
    warped, fixed = nm.as_tensor(warped), nm.as_tensor(fixed)
    if warped.shape != fixed.shape:
        raise ValueError(f"cannot compare volumes of shape {warped.shape} and {fixed.shape}")
    diff = warped - fixed
    return nm.mean(diff * diff)


def reg_loss(phi) -> Tensor:
    """Diffusion regulariser: for every displacement channel and axis, the
    mean squared forward difference, summed over channels and axes."""
    phi = nm.as_tensor(phi)
    total = None
    for ax in (1, 2, 3):
        n = phi.shape[ax]
        if n < 2:
            continue
        hi = [slice(None)] * 4
        lo = [slice(None)] * 4
        hi[ax] = slice(1, n)
        lo[ax] = slice(0, n - 1)
        d = phi[tuple(hi)] - phi[tuple(lo)]
        term = nm.tsum(nm.mean(d * d, axis=(1, 2, 3)))
        total = term if total is None else total + term
    return total if total is not None else Tensor(0.0)


def total_loss(sim, reg, rc, weights: LossWeights) -> Tensor:
    """sim + reg_weight·reg + rc_weight·rc; ``rc`` may be None when no SHMoE layer is active."""
    out = nm.as_tensor(sim) + nm.as_tensor(reg) * weights.reg
    if rc is not None:
        out = out + nm.as_tensor(rc) * weights.rc
    return out


def dice(seg_a: np.ndarray, seg_b: np.ndarray, labels=None) -> dict:
    """Per-label Dice in [0, 1]; labels absent from both maps are omitted."""
    seg_a, seg_b = np.asarray(seg_a), np.asarray(seg_b)
    if seg_a.shape != seg_b.shape:
        raise ValueError(f"segmentations differ in shape: {seg_a.shape} vs {seg_b.shape}")
    if labels is None:
        labels = sorted((set(np.unique(seg_a)) | set(np.unique(seg_b))) - {0})
    out = {}
    for lab in labels:
        a, b = seg_a == lab, seg_b == lab
        denom = a.sum() + b.sum()
        if denom == 0:
            continue
        out[int(lab)] = 2.0 * np.logical_and(a, b).sum() / denom
    return out


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Coordinates (n×3) of mask voxels with at least one 6-connected
    neighbour outside the mask (the volume border counts as outside)."""
    padded = np.pad(mask, 1, constant_values=False)
    interior = padded[1:-1, 1:-1, 1:-1].copy()
    for ax in range(3):
        for step in (-1, 1):
            interior &= np.roll(padded, step, axis=ax)[1:-1, 1:-1, 1:-1]
    return np.argwhere(mask & ~interior)


def _nearest_distances(src: np.ndarray, dst: np.ndarray, chunk: int = 2048) -> np.ndarray:
    out = np.empty(len(src))
    for i in range(0, len(src), chunk):
        d = src[i:i + chunk, None, :] - dst[None, :, :]
        out[i:i + chunk] = np.sqrt((d * d).sum(axis=-1).min(axis=1))
    return out


def assd(seg_a: np.ndarray, seg_b: np.ndarray, label: int, spacing=(1.0, 1.0, 1.0)) -> float:
    """Average symmetric surface distance for one label, in physical units."""
    a, b = np.asarray(seg_a) == label, np.asarray(seg_b) == label
    if not a.any() or not b.any():
        raise MetricUndefined(f"label {label} is empty in at least one segmentation")
    sp = np.asarray(spacing, dtype=np.float64)
    sa, sb = surface_voxels(a) * sp, surface_voxels(b) * sp
    total = _nearest_distances(sa, sb).sum() + _nearest_distances(sb, sa).sum()
    return float(total / (len(sa) + len(sb)))


@dataclass
class EvalReport:
    dice: dict = field(default_factory=dict)  # label -> percent
    assd: dict = field(default_factory=dict)  # label -> distance
    folding: float = 0.0  # percent

    @property
    def mean_dice(self) -> float:
        return float(np.mean(list(self.dice.values()))) if self.dice else float("nan")

    @property
    def mean_assd(self) -> float:
        vals = [v for v in self.assd.values() if np.isfinite(v)]
        return float(np.mean(vals)) if vals else float("nan")

    def to_text(self) -> str:
        buf = io.StringIO()
        buf.write("label\tdice_pct\tassd\n")
        for lab in sorted(self.dice):
            buf.write(f"{lab}\t{self.dice[lab]:.6f}\t{self.assd.get(lab, float('nan')):.6f}\n")
        buf.write(f"mean\t{self.mean_dice:.6f}\t{self.mean_assd:.6f}\n")
        buf.write(f"folding_pct\t{self.folding:.6f}\n")
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        rep = cls()
        for line in text.strip().splitlines()[1:]:
            cols = line.split("\t")
            if cols[0] == "folding_pct":
                rep.folding = float(cols[1])
            elif cols[0] != "mean":
                rep.dice[int(cols[0])] = float(cols[1])
                rep.assd[int(cols[0])] = float(cols[2])
        return rep


def evaluate(seg_warped: np.ndarray, seg_fixed: np.ndarray, phi=None, spacing=(1.0, 1.0, 1.0),
             labels=None) -> EvalReport:
    rep = EvalReport()
    for lab, d in dice(seg_warped, seg_fixed, labels).items():
        rep.dice[lab] = 100.0 * d
        try:
            rep.assd[lab] = assd(seg_warped, seg_fixed, lab, spacing)
        except MetricUndefined:
            rep.assd[lab] = float("nan")
    if phi is not None:
        rep.folding = jacobian_folding(phi)
    return rep
