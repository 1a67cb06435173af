"""Beer-Lambert rendering of simulated panoramic X-ray images.

A pixel (j, i) of a SimPX image is the opacity 1 - T of ray i marched
across axial slice j, with transmittance T = exp(-sum(beta * sigma * delta))
over the ray's retained sample points. The fan is shared by all slices
(the beam geometry is purely axial; vertically the projection is parallel).
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import _interp
from .errors import DimsError, FormatError
from .ray_geometry import RayFan
from .volume import DensityVolume

_PIMG_MAGIC = "PIMG1"
# largest float32 strictly below 1, used to keep stored opacities in [0, 1)
_F32_BELOW_ONE = np.nextafter(np.float32(1.0), np.float32(0.0))


@dataclass(frozen=True)
class RenderConfig:
    beta: float = 0.02
    n_samples: int = 200
    delta: float = 1.0
    width: int = 256
    height: int = 128
    interpolation: str = "trilinear"
    threads: int = 1

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError(f"beta must be > 0, got {self.beta}")
        if self.n_samples < 1:
            raise ValueError(f"n_samples must be >= 1, got {self.n_samples}")
        if self.delta <= 0:
            raise ValueError(f"delta must be > 0, got {self.delta}")
        if self.width < 1 or self.height < 1:
            raise ValueError("width and height must be >= 1")
        if self.interpolation not in ("trilinear", "nearest"):
            raise ValueError(f"unknown interpolation mode: {self.interpolation!r}")
        if self.threads < 1:
            raise ValueError(f"threads must be >= 1, got {self.threads}")


@dataclass(frozen=True)
class SimPXImage:
    """Opacity image: row = axial slice, column = ray index."""

    pixels: np.ndarray  # (height, width) float64 in [0, 1)

    def __post_init__(self):
        px = np.ascontiguousarray(np.asarray(self.pixels, dtype=np.float64))
        if px.ndim != 2 or min(px.shape) < 1:
            raise DimsError(f"image must be 2D and non-empty, got shape {px.shape}")
        if not np.all(np.isfinite(px)):
            raise ValueError("image contains non-finite pixels")
        if px.min() < 0.0 or px.max() >= 1.0:
            raise ValueError(
                f"opacity pixels must lie in [0, 1), got range "
                f"[{px.min():g}, {px.max():g}]"
            )
        px.flags.writeable = False
        object.__setattr__(self, "pixels", px)

    @property
    def dims(self) -> tuple[int, int]:
        return self.pixels.shape  # (height, width)


def transmittance(densities, delta: float, beta: float) -> float:
    """T = exp(-sum(beta * sigma_i * delta)) with compensated summation."""
    if beta <= 0:
        raise ValueError(f"beta must be > 0, got {beta}")
    if delta <= 0:
        raise ValueError(f"delta must be > 0, got {delta}")
    total = math.fsum(float(s) for s in np.asarray(densities, dtype=np.float64).ravel())
    return math.exp(-beta * delta * total)


def line_sums(
    vol_data: np.ndarray,
    fan: RayFan,
    height: int,
    plan: _interp.SamplePlan | None = None,
    interpolation: str = "trilinear",
    threads: int = 1,
) -> np.ndarray:
    """Raw per-pixel density line integrals sum(sigma) of shape (height, n_rays)."""
    if plan is None:
        plan = _interp.build_plan(fan)
    out = np.empty((height, fan.n_rays), dtype=np.float64)

    def one(j):
        out[j] = _interp.slice_line_sums(vol_data[j].ravel(), plan, interpolation)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(one, range(height)))
    else:
        for j in range(height):
            one(j)
    return out


def render_simpx(vol: DensityVolume, fan: RayFan, cfg: RenderConfig) -> SimPXImage:
    """Render the opacity image of a volume through the fan."""
    nz, ny, nx = vol.dims
    if fan.n_rays != cfg.width:
        raise DimsError(f"fan has {fan.n_rays} rays but config width is {cfg.width}")
    if nz < cfg.height:
        raise DimsError(f"volume has {nz} slices, image height {cfg.height} needs more")
    if fan.bounds != (nx, ny):
        raise DimsError(
            f"fan was built for axial grid {fan.bounds}, volume is ({nx}, {ny})"
        )
    if fan.n_samples != cfg.n_samples or fan.delta != cfg.delta:
        raise DimsError(
            f"fan sampling (n={fan.n_samples}, delta={fan.delta}) does not match "
            f"config (n={cfg.n_samples}, delta={cfg.delta})"
        )
    sums = line_sums(
        vol.data, fan, cfg.height,
        interpolation=cfg.interpolation, threads=cfg.threads,
    )
    pixels = -np.expm1(-cfg.beta * fan.delta * sums)  # 1 - T without cancellation
    # extreme attenuation rounds 1 - T up to 1.0 in double precision; the
    # image contract is [0, 1), so saturate just below
    np.minimum(pixels, np.nextafter(1.0, 0.0), out=pixels)
    return SimPXImage(pixels)


_MIP_AXES = {"axial": 0, "coronal": 1, "sagittal": 2}


def mip(vol: DensityVolume, axis: str) -> np.ndarray:
    """Maximum intensity projection along one anatomical axis.

    axial -> (ny, nx), coronal -> (nz, nx), sagittal -> (nz, ny).
    """
    if axis not in _MIP_AXES:
        raise ValueError(f"axis must be one of {sorted(_MIP_AXES)}, got {axis!r}")
    return vol.data.max(axis=_MIP_AXES[axis])


# ----------------------------------------------------------------------
# Image files: PIMG1 floats and 16-bit binary PGM
# ----------------------------------------------------------------------

def save_image(img: SimPXImage, path) -> None:
    """Write 'PIMG1 h w\\n' + row-major little-endian float32 pixels."""
    h, w = img.dims
    payload = img.pixels.astype("<f4")
    # float32 rounding may bump a value just below 1 up to 1.0; keep the
    # stored file inside the documented [0, 1) range
    payload = np.minimum(payload, _F32_BELOW_ONE)
    with open(path, "wb") as fh:
        fh.write(f"{_PIMG_MAGIC} {h} {w}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(payload).tobytes())


def load_image(path) -> SimPXImage:
    with open(path, "rb") as fh:
        line = fh.readline(256)
        if not line.endswith(b"\n"):
            raise FormatError(f"{path}: missing or overlong header line")
        parts = line[:-1].decode("ascii", errors="replace").split(" ")
        if len(parts) != 3 or parts[0] != _PIMG_MAGIC:
            raise FormatError(f"{path}: bad header, expected '{_PIMG_MAGIC} h w'")
        try:
            h, w = int(parts[1]), int(parts[2])
        except ValueError as exc:
            raise FormatError(f"{path}: non-integer image dims") from exc
        if h < 1 or w < 1:
            raise DimsError(f"{path}: invalid image dims ({h}, {w})")
        expected = h * w * 4
        payload = fh.read(expected + 1)
        if len(payload) != expected:
            raise FormatError(
                f"{path}: payload holds {min(len(payload), expected)}+ bytes, "
                f"expected exactly {expected} for dims ({h}, {w})"
            )
    data = np.frombuffer(payload[:expected], dtype="<f4").astype(np.float64)
    return SimPXImage(data.reshape(h, w))


def save_pgm16(pixels: np.ndarray, path) -> None:
    """16-bit binary PGM (big-endian sample bytes), values scaled by 65535."""
    px = np.asarray(pixels, dtype=np.float64)
    if px.ndim != 2:
        raise DimsError(f"PGM export needs a 2D image, got shape {px.shape}")
    h, w = px.shape
    scaled = np.round(np.clip(px, 0.0, 1.0) * 65535.0).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(np.ascontiguousarray(scaled).tobytes())
