"""Synthetic registration pairs: an ellipsoid phantom and a smooth random warp of it."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .volume_io import SegVolume, Volume
from .warpfield import warp, warp_labels


@dataclass
class SyntheticPair:
    fixed: Volume
    fixed_seg: SegVolume
    moving: Volume
    moving_seg: SegVolume
    gt_field: Volume | None  # 3-channel displacement that produced the moving image


def phantom(gen: np.random.Generator, size: int, spacing=(1.0, 1.0, 1.0), n_regions: int = 4,
            noise: float = 0.02, blur: float = 0.7):
    """Nested and overlapping ellipsoids with distinct intensities.

    Radii are set in physical units, so anisotropic spacing squeezes the
    phantom along the coarser axes.
    """
    if not 3 <= n_regions <= 5:
        raise ValueError(f"phantom has 3 to 5 labelled regions, got {n_regions}")
    sp = np.asarray(spacing, dtype=np.float64)
    stretch = sp.min() / sp
    grid = np.stack(np.meshgrid(*[np.arange(size, dtype=np.float64)] * 3, indexing="ij"))
    c = (size - 1) / 2.0
    labels = np.zeros((size,) * 3, dtype=np.uint16)
    # outer body, then nested and off-centre structures drawn on top
    specs = [((0, 0, 0), (0.40, 0.36, 0.38))]
    specs.append(((0, 0, 0), (0.24, 0.22, 0.26)))
    specs.append(((0.14, -0.10, 0.06), (0.10, 0.12, 0.09)))
    specs.append(((-0.14, 0.12, -0.08), (0.09, 0.08, 0.11)))
    specs.append(((0.02, 0.16, 0.14), (0.07, 0.07, 0.07)))
    for lab, (off, rad) in enumerate(specs[:n_regions], start=1):
        jitter = gen.uniform(-0.02, 0.02, size=3)
        centre = c + (np.asarray(off) + jitter) * size * stretch
        radii = (np.asarray(rad) * (1 + gen.uniform(-0.08, 0.08, size=3))) * size * stretch
        r2 = sum(((grid[a] - centre[a]) / radii[a]) ** 2 for a in range(3))
        labels[r2 <= 1.0] = lab
    levels = np.sort(gen.uniform(0.25, 1.0, size=n_regions))
    gen.shuffle(levels)
    img = np.zeros(labels.shape)
    for lab in range(1, n_regions + 1):
        img[labels == lab] = levels[lab - 1]
    if blur > 0:
        img = gaussian_filter(img, blur)
    img = np.clip(img + gen.normal(0.0, noise, size=img.shape), 0.0, 1.0)
    return img, labels


def smooth_field(gen: np.random.Generator, size: int, max_disp: float, smoothness: float) -> np.ndarray:
    """Gaussian-smoothed random displacement scaled to a peak magnitude of ``max_disp``."""
    raw = gen.normal(size=(3,) + (size,) * 3)
    if max_disp == 0:
        return np.zeros_like(raw)
    field = np.stack([gaussian_filter(raw[a], smoothness, mode="wrap") for a in range(3)])
    peak = np.sqrt((field ** 2).sum(axis=0)).max()
    field *= max_disp / peak
    return np.clip(field, -max_disp, max_disp)


def generate_pair(gen: np.random.Generator, size: int = 32, spacing=(1.0, 1.0, 1.0), max_disp: float = 4.0,
                  smoothness: float = 4.0, n_regions: int = 4) -> SyntheticPair:
    if max_disp >= size / 4:
        raise ValueError(f"max_disp must be below size/4 = {size / 4}, got {max_disp}")
    img, labels = phantom(gen, size, spacing, n_regions)
    field = smooth_field(gen, size, max_disp, smoothness)
    moving = warp(img[None], field).data
    moving_labels = warp_labels(labels, field)
    return SyntheticPair(
        fixed=Volume(img[None], spacing),
        fixed_seg=SegVolume(labels, spacing),
        moving=Volume(moving, spacing),
        moving_seg=SegVolume(moving_labels, spacing),
        gt_field=Volume(field, spacing),
    )
