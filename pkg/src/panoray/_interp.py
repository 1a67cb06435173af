"""Shared bilinear sampling/scatter plans for a ray fan.

A plan freezes everything that depends only on fan geometry: per-sample
gather indices into a flattened axial slice, interpolation fractions, and
the transposed (scatter) footprint used by back-projection and gradients.
Build once per fan, reuse across slices and iterations.

Interpolation clamps neighbor indices to the grid, so points in the
half-voxel band inside the boundary read the edge voxels (a uniform volume
reads exactly its constant everywhere inside the box). Points outside the
box never occur here: the fan keeps only in-bounds samples.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SamplePlan:
    nx: int
    ny: int
    # gather side: indices into the flattened (ny, nx) slice
    g00: np.ndarray  # (n_rays, k) int64
    g01: np.ndarray
    g10: np.ndarray
    g11: np.ndarray
    fx: np.ndarray   # (n_rays, k) float64 in [0, 1)
    fy: np.ndarray
    valid: np.ndarray       # (n_rays, k) float64, 1.0 for retained samples
    nearest: np.ndarray     # (n_rays, k) int64
    # scatter side: per-entry voxel index into the flat (ny * nx) slice
    sidx: np.ndarray  # (E,) int64
    sw: np.ndarray    # (E,) float64 bilinear weight
    sray: np.ndarray  # (E,) int64 ray id


def build_plan(fan) -> SamplePlan:
    nx, ny = fan.bounds
    xy = fan.sample_xy
    valid = fan.sample_valid
    q = xy - 0.5
    i0 = np.floor(q).astype(np.int64)          # (n, k, 2) in [-1, n-1]
    f = q - i0
    fx, fy = f[..., 0], f[..., 1]
    x0 = np.clip(i0[..., 0], 0, nx - 1)
    x1 = np.clip(i0[..., 0] + 1, 0, nx - 1)
    y0 = np.clip(i0[..., 1], 0, ny - 1)
    y1 = np.clip(i0[..., 1] + 1, 0, ny - 1)

    g00 = y0 * nx + x0
    g01 = y0 * nx + x1
    g10 = y1 * nx + x0
    g11 = y1 * nx + x1

    nearest_x = np.clip(np.floor(xy[..., 0]).astype(np.int64), 0, nx - 1)
    nearest_y = np.clip(np.floor(xy[..., 1]).astype(np.int64), 0, ny - 1)
    nearest = nearest_y * nx + nearest_x

    # scatter footprint: the four (clamped) corners of retained samples with
    # nonzero weight; coincident clamped corners simply add their weights
    n_rays, k = fx.shape
    ray_ids = np.broadcast_to(np.arange(n_rays, dtype=np.int64)[:, None], (n_rays, k))
    wx = (1.0 - fx, fx)
    wy = (1.0 - fy, fy)
    corners = ((g00, 0, 0), (g01, 0, 1), (g10, 1, 0), (g11, 1, 1))
    sidx_parts, sw_parts, sray_parts = [], [], []
    for g, dy, dx in corners:
        w = wy[dy] * wx[dx] * valid
        keep = w > 0
        sidx_parts.append(g[keep])
        sw_parts.append(w[keep])
        sray_parts.append(ray_ids[keep])

    return SamplePlan(
        nx=nx,
        ny=ny,
        g00=g00, g01=g01, g10=g10, g11=g11,
        fx=fx, fy=fy,
        valid=valid.astype(np.float64),
        nearest=nearest,
        sidx=np.concatenate(sidx_parts),
        sw=np.concatenate(sw_parts),
        sray=np.concatenate(sray_parts),
    )


def slice_line_sums(slice_flat: np.ndarray, plan: SamplePlan,
                    interpolation: str = "trilinear") -> np.ndarray:
    """Per-ray sums of interpolated densities over one flattened axial slice."""
    if interpolation == "nearest":
        vals = slice_flat[plan.nearest] * plan.valid
        return vals.sum(axis=1)
    if interpolation != "trilinear":
        raise ValueError(f"unknown interpolation mode: {interpolation!r}")
    v00 = slice_flat[plan.g00]
    v01 = slice_flat[plan.g01]
    v10 = slice_flat[plan.g10]
    v11 = slice_flat[plan.g11]
    # lerp form: exact on constant fields, so uniform phantoms render exactly
    a = v00 + plan.fx * (v01 - v00)
    b = v10 + plan.fx * (v11 - v10)
    vals = (a + plan.fy * (b - a)) * plan.valid
    return vals.sum(axis=1)


def scatter_slice(coeff: np.ndarray, plan: SamplePlan) -> np.ndarray:
    """Adjoint of slice_line_sums: spread per-ray coefficients through the
    transposed bilinear weights; returns a (ny, nx) slice."""
    vals = plan.sw * coeff[plan.sray]
    flat = np.bincount(plan.sidx, weights=vals, minlength=plan.ny * plan.nx)
    return flat.reshape(plan.ny, plan.nx)
