"""Volume recovery from a SimPX image by projected gradient descent.

The objective is data fidelity in image space through the same forward
model that produced the target, optionally plus a weighted projection term
comparing maximum intensity projections against supplied target MIPs:

    total = sum((render(est) - target)^2)
          + lambda1 * sum over axes sum((mip(est) - target_mip)^2)

The gradient of the data term is the exact adjoint of the renderer: a pixel
with transmittance T and residual r contributes 2 * r * T * beta * delta to
every density sample on its ray, scattered through the transposed bilinear
weights. The MIP term splits each projected pixel's residual equally across
the voxels lying within mip_tie_tol of that column's maximum (a subgradient
of the max; identical to plain argmax routing when the maximum is isolated).
Routing to the argmax alone jams the descent once shaving flattens column
maxima into plateaus, so the band backs the practical convergence here.
Iterates stay inside the [0, 1] box and the step is halved until the loss
decreases, so the loss history is monotone. Each line search starts from a
safeguarded spectral (Barzilai-Borwein) guess, which is what lets the
ill-conditioned tomographic modes converge within a practical iteration
budget; step_size caps the very first step.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _interp, backproject, metrics
from .errors import DimsError
from .ray_geometry import RayFan
from .renderer import SimPXImage, _MIP_AXES
from .volume import DensityVolume, _as_f32_grid

MIP_AXES = ("axial", "coronal", "sagittal")


@dataclass(frozen=True)
class ReconConfig:
    lambda1: float = 10.0
    max_iters: int = 200
    step_size: float = 1.0
    backtrack_factor: float = 0.5
    max_halvings: int = 30
    init: str = "rho"            # "rho" (back-projection) or "zeros"
    tol: float = 1e-7            # relative loss decrease to keep iterating
    beta: float = 0.02
    clamp: tuple[float, float] = (0.0, 1.0)
    mip_tie_tol: float = 1e-3    # width of the shared-maximum band

    def __post_init__(self):
        if self.lambda1 < 0:
            raise ValueError(f"lambda1 must be >= 0, got {self.lambda1}")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.step_size <= 0:
            raise ValueError(f"step_size must be > 0, got {self.step_size}")
        if not 0 < self.backtrack_factor < 1:
            raise ValueError("backtrack_factor must be in (0, 1)")
        if self.init not in ("rho", "zeros"):
            raise ValueError(f"init must be 'rho' or 'zeros', got {self.init!r}")
        if self.beta <= 0:
            raise ValueError(f"beta must be > 0, got {self.beta}")
        if self.mip_tie_tol < 0:
            raise ValueError(f"mip_tie_tol must be >= 0, got {self.mip_tie_tol}")


@dataclass
class ReconReport:
    # rows of (iteration, total, mse_img, mse_mip, step)
    loss_history: list = field(default_factory=list)
    iterations_run: int = 0
    final_metrics: metrics.MetricsReport | None = None

    def format_lines(self) -> list[str]:
        return [
            f"{it} {total:.17g} {mse_img:.17g} {mse_mip:.17g} {step:.17g}"
            for it, total, mse_img, mse_mip, step in self.loss_history
        ]


def save_report(report: ReconReport, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(report.format_lines()) + "\n")


def _target_array(target_img) -> np.ndarray:
    if isinstance(target_img, SimPXImage):
        return target_img.pixels
    return np.asarray(target_img, dtype=np.float64)


def _check_mips(target_mips, dims) -> dict:
    if target_mips is None:
        return {}
    nz, ny, nx = dims
    want = {"axial": (ny, nx), "coronal": (nz, nx), "sagittal": (nz, ny)}
    out = {}
    for axis, arr in dict(target_mips).items():
        if axis not in _MIP_AXES:
            raise ValueError(f"unknown MIP axis {axis!r}")
        arr = np.asarray(arr, dtype=np.float64)
        if arr.shape != want[axis]:
            raise DimsError(
                f"{axis} MIP target has shape {arr.shape}, expected {want[axis]}"
            )
        out[axis] = arr
    return out


def _map_slices(fn, h: int, threads: int) -> None:
    """Run fn(j) for every slice index; results land in caller arrays by j,
    so the outcome is identical for any thread count."""
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(fn, range(h)))
    else:
        for j in range(h):
            fn(j)


def _forward(est: np.ndarray, fan: RayFan, plan, beta: float, threads: int = 1) -> np.ndarray:
    """Opacity image of the current estimate, all slices of est."""
    h = est.shape[0]
    sums = np.empty((h, fan.n_rays), dtype=np.float64)

    def one(j):
        sums[j] = _interp.slice_line_sums(est[j].ravel(), plan)

    _map_slices(one, h, threads)
    return -np.expm1(-beta * fan.delta * sums)


def _loss_terms(est, y, mips, fan, plan, beta, lambda1, threads: int = 1):
    pred = _forward(est, fan, plan, beta, threads)
    mse_img = float(np.sum((pred - y) ** 2))
    mse_mip = 0.0
    for axis, tgt in mips.items():
        proj = est.max(axis=_MIP_AXES[axis])
        mse_mip += float(np.sum((proj - tgt) ** 2))
    return mse_img + lambda1 * mse_mip, mse_img, mse_mip, pred


def loss(est, target_img, target_mips, fan: RayFan, cfg: ReconConfig):
    """Total objective and its (mse_img, mse_mip) components."""
    est_data = est.data if isinstance(est, DensityVolume) else np.asarray(est, np.float64)
    y = _target_array(target_img)
    nz, ny, nx = est_data.shape
    if y.shape != (nz, fan.n_rays):
        raise DimsError(
            f"target image shape {y.shape} does not match ({nz}, {fan.n_rays})"
        )
    if fan.bounds != (nx, ny):
        raise DimsError(f"fan bounds {fan.bounds} do not match volume ({nx}, {ny})")
    mips = _check_mips(target_mips, est_data.shape)
    plan = _interp.build_plan(fan)
    total, mse_img, mse_mip, _ = _loss_terms(
        est_data, y, mips, fan, plan, cfg.beta, cfg.lambda1
    )
    return total, (mse_img, mse_mip)


def _gradient(est, y, mips, fan, plan, beta, lambda1, pred=None, threads: int = 1,
              tie_tol: float = 1e-3):
    if pred is None:
        pred = _forward(est, fan, plan, beta, threads)
    h = est.shape[0]
    grad = np.empty_like(est)
    resid = pred - y
    transmit = 1.0 - pred
    coeff = 2.0 * beta * fan.delta * resid * transmit

    def one(j):
        grad[j] = _interp.scatter_slice(coeff[j], plan)

    _map_slices(one, h, threads)

    for axis, tgt in mips.items():
        ax = _MIP_AXES[axis]
        proj = est.max(axis=ax)
        r = 2.0 * lambda1 * (proj - tgt)
        # share each projected residual across the band of (near-)maximizers
        tie = est >= np.expand_dims(proj - tie_tol, ax)
        share = np.expand_dims(r / tie.sum(axis=ax), ax)
        grad += np.where(tie, share, 0.0)
    return grad


def gradient(est, target_img, target_mips, fan: RayFan, cfg: ReconConfig) -> np.ndarray:
    """d(total)/d(sigma) at every voxel."""
    est_data = est.data if isinstance(est, DensityVolume) else np.asarray(est, np.float64)
    y = _target_array(target_img)
    nz, ny, nx = est_data.shape
    if y.shape != (nz, fan.n_rays):
        raise DimsError(
            f"target image shape {y.shape} does not match ({nz}, {fan.n_rays})"
        )
    if fan.bounds != (nx, ny):
        raise DimsError(f"fan bounds {fan.bounds} do not match volume ({nx}, {ny})")
    mips = _check_mips(target_mips, est_data.shape)
    plan = _interp.build_plan(fan)
    return _gradient(
        est_data, y, mips, fan, plan, cfg.beta, cfg.lambda1, tie_tol=cfg.mip_tie_tol
    )


def _rho_init(y, fan, dims, beta) -> np.ndarray:
    cands = backproject.image_candidates(y, fan, beta)
    return backproject.aggregate_rho(fan, cands, dims).rho


def reconstruct(
    target_img,
    fan: RayFan,
    cfg: ReconConfig,
    ground_truth: DensityVolume | None = None,
    target_mips=None,
    threads: int = 1,
) -> tuple[DensityVolume, ReconReport]:
    """Projected gradient descent with backtracking line search.

    Returns the recovered volume (dims: target height x fan grid) and a
    report with one loss row per accepted iterate, monotone by construction.
    """
    y = _target_array(target_img)
    if y.ndim != 2 or y.shape[1] != fan.n_rays:
        raise DimsError(
            f"target image shape {y.shape} does not match fan ray count {fan.n_rays}"
        )
    if not np.all(np.isfinite(y)) or y.min() < 0.0 or y.max() >= 1.0:
        raise ValueError("target pixels must be finite and lie in [0, 1)")
    nx, ny = fan.bounds
    dims = (y.shape[0], ny, nx)
    mips = _check_mips(target_mips, dims)
    plan = _interp.build_plan(fan)
    lo, hi = cfg.clamp

    if cfg.init == "zeros":
        x = np.zeros(dims, dtype=np.float64)
    else:
        x = np.clip(_rho_init(y, fan, dims, cfg.beta), lo, hi)

    report = ReconReport()
    total, mse_img, mse_mip, pred = _loss_terms(
        x, y, mips, fan, plan, cfg.beta, cfg.lambda1, threads
    )
    if not np.isfinite(total):
        raise RuntimeError(f"non-finite loss at initialization: {total}")
    report.loss_history.append((0, total, mse_img, mse_mip, 0.0))

    step = cfg.step_size
    prev_x = prev_grad = None
    for it in range(1, cfg.max_iters + 1):
        if total == 0.0:
            break
        grad = _gradient(
            x, y, mips, fan, plan, cfg.beta, cfg.lambda1, pred=pred,
            threads=threads, tie_tol=cfg.mip_tie_tol,
        )
        if prev_x is None:
            step = cfg.step_size
        else:
            # spectral step guess from the last accepted move, safeguarded;
            # the backtracking below keeps the iteration monotone regardless
            dx = (x - prev_x).ravel()
            dg = (grad - prev_grad).ravel()
            curv = float(dx @ dg)
            if curv > 1e-30:
                step = min(1e6, max(1e-12, float(dx @ dx) / curv))
            else:
                step = min(1e6, 2.0 * step)
        accepted = False
        for _ in range(cfg.max_halvings + 1):
            trial = np.clip(x - step * grad, lo, hi)
            t_total, t_img, t_mip, t_pred = _loss_terms(
                trial, y, mips, fan, plan, cfg.beta, cfg.lambda1, threads
            )
            if not np.isfinite(t_total):
                raise RuntimeError(f"non-finite loss during line search: {t_total}")
            if t_total < total:
                accepted = True
                break
            step *= cfg.backtrack_factor
        if not accepted:
            break
        rel_drop = (total - t_total) / total
        prev_x, prev_grad = x, grad
        x, total, mse_img, mse_mip, pred = trial, t_total, t_img, t_mip, t_pred
        report.loss_history.append((it, total, mse_img, mse_mip, step))
        report.iterations_run = it
        if rel_drop < cfg.tol:
            break

    result = DensityVolume(_as_f32_grid(np.clip(x, 0.0, 1.0)))
    if ground_truth is not None:
        report.final_metrics = metrics.evaluate(result, ground_truth)
    return result, report
