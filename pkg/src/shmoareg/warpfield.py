"""Spatial transforms on dense displacement fields.

A deformation field is a 3×D×H×W tensor of displacements in voxel units;
the mapping it defines is x -> x + phi(x). A stationary velocity field has
the same layout.
"""

from __future__ import annotations

import numpy as np

from .numerics import Tensor, add, as_tensor, identity_grid, trilinear_sample


def _check_aligned(vol: Tensor, phi: Tensor):
    if phi.ndim != 4 or phi.shape[0] != 3 or vol.shape[1:] != phi.shape[1:]:
        raise ValueError(f"field {phi.shape} is not aligned with volume {vol.shape}")


def warp(vol, phi):
    """Resample ``vol`` (C×D×H×W) at x + phi(x) with trilinear interpolation.

    Border voxels are clamped. Differentiable in both arguments.
    """
    vol, phi = as_tensor(vol), as_tensor(phi)
    _check_aligned(vol, phi)
    coords = add(phi, identity_grid(phi.shape[1:]))
    return trilinear_sample(vol, coords)


def compose(phi_a, phi_b):
    """Displacement of the map x -> (x + phi_b(x)) followed by phi_a."""
    phi_a, phi_b = as_tensor(phi_a), as_tensor(phi_b)
    return phi_b + warp(phi_a, phi_b)


def integrate_velocity(vel, steps: int = 7):
    """Scaling and squaring: scale by 2**-steps, then self-compose ``steps`` times."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    phi = as_tensor(vel) * (1.0 / 2 ** steps)
    for _ in range(steps):
        phi = compose(phi, phi)
    return phi


def invert_field(phi, iterations: int = 50) -> np.ndarray:
    """Fixed-point inverse psi(x) = -phi(x + psi(x)). Numpy only, no gradient."""
    phi = as_tensor(phi).detach()
    psi = -phi.data.copy()
    for _ in range(iterations):
        psi = -warp(phi, psi).data
    return psi


def jacobian_determinant(phi) -> np.ndarray:
    """Determinant of the Jacobian of x + phi(x) by forward differences.

    Returned on the (D-1)×(H-1)×(W-1) interior where every forward
    difference exists.
    """
    u = phi.data if isinstance(phi, Tensor) else np.asarray(phi, dtype=np.float64)
    if u.shape[0] != 3 or min(u.shape[1:]) < 2:
        raise ValueError(f"jacobian needs a 3×D×H×W field with D,H,W >= 2, got {u.shape}")
    core = u[:, :-1, :-1, :-1]
    # J[i][j] = d(x_i + u_i)/dx_j
    diffs = [
        u[:, 1:, :-1, :-1] - core,
        u[:, :-1, 1:, :-1] - core,
        u[:, :-1, :-1, 1:] - core,
    ]
    J = np.empty((3, 3) + core.shape[1:])
    for i in range(3):
        for j in range(3):
            J[i, j] = diffs[j][i] + (1.0 if i == j else 0.0)
    return (J[0, 0] * (J[1, 1] * J[2, 2] - J[1, 2] * J[2, 1])
            - J[0, 1] * (J[1, 0] * J[2, 2] - J[1, 2] * J[2, 0])
            + J[0, 2] * (J[1, 0] * J[2, 1] - J[1, 1] * J[2, 0]))


def jacobian_folding(phi) -> float:
    """Percentage of interior voxels whose Jacobian determinant is <= 0."""
    det = jacobian_determinant(phi)
    return 100.0 * float(np.count_nonzero(det <= 0)) / det.size


def upsample_field(phi, factor: int = 2):
    """Trilinear upsampling of a displacement field, rescaling its values.

    Voxel centres are aligned (half-voxel convention), so a linear ramp is
    reproduced exactly away from the border.
    """
    phi = as_tensor(phi)
    shape = tuple(n * factor for n in phi.shape[1:])
    axes = [(np.arange(n, dtype=np.float64) + 0.5) / factor - 0.5 for n in shape]
    coords = np.stack(np.meshgrid(*axes, indexing="ij"))
    return trilinear_sample(phi, coords) * float(factor)


def resample_to(vol, shape):
    """Trilinear resampling of a C×D×H×W tensor onto a grid of ``shape``
    (voxel centres aligned); values are not rescaled."""
    vol = as_tensor(vol)
    axes = [(np.arange(m, dtype=np.float64) + 0.5) * (n / m) - 0.5 for m, n in zip(shape, vol.shape[1:])]
    coords = np.stack(np.meshgrid(*axes, indexing="ij"))
    return trilinear_sample(vol, coords)


def warp_labels(seg: np.ndarray, phi) -> np.ndarray:
    """Nearest-neighbour resampling of an integer D×H×W label map at x + phi(x)."""
    u = phi.data if isinstance(phi, Tensor) else np.asarray(phi, dtype=np.float64)
    if u.shape[1:] != seg.shape:
        raise ValueError(f"field {u.shape} is not aligned with labels {seg.shape}")
    pos = identity_grid(seg.shape) + u
    idx = [np.clip(np.floor(pos[ax] + 0.5).astype(np.int64), 0, n - 1) for ax, n in enumerate(seg.shape)]
    return seg[idx[0], idx[1], idx[2]]
