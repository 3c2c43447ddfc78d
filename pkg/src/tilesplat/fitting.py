"""Toy screen-space fitter used to exercise pruning schedules.

Splats are optimised directly in 2D (mean, log-scales, angle, opacity logit,
colour) with plain gradient descent on an L1 loss against a single target
image, then lifted back to 3D Gaussians for a fixed camera.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import COV2D_DILATION, CameraModel, ProjectedBatch, Scene, project_scene
from .pruning import (
    DegenerateSceneError,
    PruneSchedule,
    backward_kernel,
    build_worklist,
    prune_mask,
    random_scores,
    render64,
    score_batch,
)

TOY_SIZE = 128
THIN_Z_SCALE = 1e-4


# ---------------------------------------------------------------------------
# target image
# ---------------------------------------------------------------------------


def _soft(d, width=1.5):
    """Smooth step from 1 (inside, d < 0) to 0 (outside)."""
    return 1.0 / (1.0 + np.exp(d / width))


def toy_target(size: int = TOY_SIZE) -> np.ndarray:
    """Procedural RGB image in [0, 1]: sky gradient, sun, hills, two shapes."""
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    s = size / 128.0
    v = y / (size - 1)
    img = np.stack([0.15 + 0.45 * v, 0.25 + 0.45 * v, 0.55 + 0.35 * v], axis=-1)

    def paint(mask, rgb):
        img[:] = img * (1 - mask[..., None]) + mask[..., None] * np.asarray(rgb)

    paint(_soft(np.hypot(x - 92 * s, y - 30 * s) - 14 * s), (1.0, 0.85, 0.4))
    ridge = 84 * s + 8 * s * np.sin(x / (11 * s))
    paint(_soft(ridge - y), (0.25, 0.5, 0.2))
    rect = np.maximum(np.abs(x - 34 * s) - 12 * s, np.abs(y - 94 * s) - 18 * s)
    paint(_soft(rect), (0.75, 0.2, 0.15))
    c, sn = np.cos(0.6), np.sin(0.6)
    u = ((x - 80 * s) * c + (y - 104 * s) * sn) / (20 * s)
    w = (-(x - 80 * s) * sn + (y - 104 * s) * c) / (8 * s)
    paint(_soft((np.hypot(u, w) - 1.0) * 8 * s), (0.9, 0.9, 0.95))
    return np.clip(img, 0.0, 1.0)


def psnr(image, target) -> float:
    mse = float(np.mean((np.clip(image, 0.0, 1.0) - target) ** 2))
    return float("inf") if mse == 0 else -10.0 * np.log10(mse)


# ---------------------------------------------------------------------------
# 2D splat parameters
# ---------------------------------------------------------------------------


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


@dataclass
class Splats2D:
    mean: np.ndarray  # (N, 2) pixels
    log_scale: np.ndarray  # (N, 2) log pixels, before dilation
    theta: np.ndarray  # (N,)
    logit: np.ndarray  # (N,)
    color: np.ndarray  # (N, 3)
    depth: np.ndarray  # (N,) fixed draw order

    def __len__(self):
        return len(self.theta)

    def subset(self, keep) -> Splats2D:
        keep = np.asarray(keep)
        return Splats2D(*(np.array(getattr(self, f)[keep]) for f in
                          ("mean", "log_scale", "theta", "logit", "color", "depth")))

    @property
    def opacity(self):
        return _sigmoid(self.logit)

    def rotation(self):
        c, s = np.cos(self.theta), np.sin(self.theta)
        return np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)

    def cov2d(self) -> np.ndarray:
        m = self.rotation()
        d = np.exp(2.0 * self.log_scale)
        sig = (m * d[:, None, :]) @ np.swapaxes(m, 1, 2)
        return np.stack([sig[:, 0, 0] + COV2D_DILATION, sig[:, 0, 1], sig[:, 1, 1] + COV2D_DILATION], 1)

    def batch(self) -> ProjectedBatch:
        return ProjectedBatch.from_arrays(self.mean, self.cov2d(), self.opacity, self.depth, self.color)

    @classmethod
    def random(cls, n: int, size: int, rng: np.random.Generator, scale_px: float = 4.0) -> Splats2D:
        return cls(
            mean=rng.uniform(0, size - 1, (n, 2)),
            log_scale=np.log(scale_px) + 0.3 * rng.standard_normal((n, 2)),
            theta=rng.uniform(0, np.pi, n),
            logit=np.zeros(n),
            color=rng.uniform(0, 1, (n, 3)),
            depth=rng.uniform(1.0, 10.0, n),
        )

    @classmethod
    def from_batch(cls, batch: ProjectedBatch) -> Splats2D:
        """Recover parameters from projected covariances (dilation removed)."""
        cov = batch.cov2d
        sig = np.empty((len(batch), 2, 2))
        sig[:, 0, 0] = cov[:, 0] - COV2D_DILATION
        sig[:, 0, 1] = sig[:, 1, 0] = cov[:, 1]
        sig[:, 1, 1] = cov[:, 2] - COV2D_DILATION
        evals, evecs = np.linalg.eigh(sig)
        evals = np.maximum(evals, 1e-8)
        op = np.clip(batch.opacity, 1e-6, 1 - 1e-6)
        return cls(
            mean=batch.mean2d.copy(),
            log_scale=0.5 * np.log(evals),
            theta=np.arctan2(evecs[:, 1, 0], evecs[:, 0, 0]),
            logit=np.log(op / (1 - op)),
            color=batch.color.copy(),
            depth=batch.depth.copy(),
        )


def lift_to_scene(splats: Splats2D, cam: CameraModel) -> Scene:
    """3D Gaussians that project (to first order) back onto ``splats``.

    Each splat becomes a thin disc facing the camera at its recorded depth.
    Only cameras with identity rotation are supported, and the angle is
    exact only when fx == fy.
    """
    if not np.allclose(cam.rotation, np.eye(3)):
        raise ValueError("lifting needs an axis-aligned camera")
    z = splats.depth
    x = (splats.mean[:, 0] - cam.cx) * z / cam.fx
    y = (splats.mean[:, 1] - cam.cy) * z / cam.fy
    # off-axis Jacobian terms only see the z extent, which is tiny
    sx = np.exp(splats.log_scale[:, 0]) * z / cam.fx
    sy = np.exp(splats.log_scale[:, 1]) * z / cam.fy
    scales = np.stack([sx, sy, np.full_like(sx, THIN_Z_SCALE)], 1)
    quat_xyzw = Rotation.from_euler("z", splats.theta).as_quat()
    rotations = quat_xyzw[:, [3, 0, 1, 2]]
    means = np.stack([x, y, z], 1) - cam.translation
    return Scene(means, scales, rotations, splats.opacity, np.clip(splats.color, 0, 1))


def toy_camera(size: int = TOY_SIZE) -> CameraModel:
    return CameraModel.looking_down_z(float(size), float(size), size, size)


# ---------------------------------------------------------------------------
# gradient descent
# ---------------------------------------------------------------------------


@dataclass
class FitConfig:
    iterations: int = 300
    step_size: float = 1.0
    lr_mean: float = 2.0e3
    lr_log_scale: float = 1.0e2
    lr_theta: float = 2.0e2
    lr_logit: float = 2.0e2
    lr_color: float = 1.0e1
    background: tuple = (0.0, 0.0, 0.0)
    prune_score: str = "efficient"  # or "random"
    seed: int = 0


@dataclass
class FitResult:
    splats: Splats2D
    losses: list[float] = field(default_factory=list)
    counts: list[int] = field(default_factory=list)
    image: np.ndarray | None = None


def loss_and_grads(splats: Splats2D, target: np.ndarray, background=(0.0, 0.0, 0.0)):
    """Mean-L1 loss and parameter gradients (analytic through the renderer)."""
    h, w, _ = target.shape
    batch = splats.batch()
    work = build_worklist(batch, w, h)
    image = render64(work, background)
    diff = image - target
    loss = float(np.mean(np.abs(diff)))
    dl_dc = np.sign(diff) / diff.size

    n = len(splats)
    d_mean = np.zeros((n, 2))
    d_conic = np.zeros((n, 3))
    d_op = np.zeros(n)
    d_color = np.zeros((n, 3))
    backward_kernel(*work.kernel_args(background), dl_dc, d_mean, d_conic, d_op, d_color)
    grads = _chain(splats, batch, d_mean, d_conic, d_op, d_color)
    return loss, grads, image


def _chain(splats, batch, d_mean, d_conic, d_op, d_color):
    a, b, c = batch.conic[:, 0], batch.conic[:, 1], batch.conic[:, 2]
    K = np.stack([np.stack([a, b], -1), np.stack([b, c], -1)], -2)
    gk = np.stack([np.stack([d_conic[:, 0], 0.5 * d_conic[:, 1]], -1),
                   np.stack([0.5 * d_conic[:, 1], d_conic[:, 2]], -1)], -2)
    g_sigma = -K @ gk @ K
    m = splats.rotation()
    dmat = np.exp(2.0 * splats.log_scale)
    inner = np.swapaxes(m, 1, 2) @ g_sigma @ m
    d_log_scale = 2.0 * dmat * np.stack([inner[:, 0, 0], inner[:, 1, 1]], 1)
    ct, st = np.cos(splats.theta), np.sin(splats.theta)
    dm = np.stack([np.stack([-st, -ct], -1), np.stack([ct, -st], -1)], -2)
    prod = g_sigma @ dm @ (dmat[:, :, None] * np.swapaxes(m, 1, 2))
    d_theta = 2.0 * (prod[:, 0, 0] + prod[:, 1, 1])
    op = splats.opacity
    return {
        "mean": d_mean,
        "log_scale": d_log_scale,
        "theta": d_theta,
        "logit": d_op * op * (1 - op),
        "color": d_color,
    }


# largest per-Gaussian move per step for each group; keeps large splats,
# whose gradients sum over big footprints, from overshooting
MAX_STEP = {"mean": 1.0, "log_scale": 0.05, "theta": 0.05, "logit": 0.25, "color": 0.05}


def _clipped(delta, limit):
    norm = np.sqrt(np.sum(delta.reshape(len(delta), -1) ** 2, axis=1))
    scale = np.minimum(1.0, limit / np.maximum(norm, 1e-300))
    return delta * scale.reshape((-1,) + (1,) * (delta.ndim - 1))


def _step(splats: Splats2D, grads, cfg: FitConfig) -> None:
    lrs = {"mean": cfg.lr_mean, "log_scale": cfg.lr_log_scale, "theta": cfg.lr_theta,
           "logit": cfg.lr_logit, "color": cfg.lr_color}
    for name, lr in lrs.items():
        delta = _clipped(cfg.step_size * lr * grads[name], MAX_STEP[name])
        setattr(splats, name, getattr(splats, name) - delta)
    np.clip(splats.color, 0.0, 1.0, out=splats.color)
    np.clip(splats.log_scale, -1.5, 4.0, out=splats.log_scale)
    np.clip(splats.logit, -8.0, 8.0, out=splats.logit)


def fit_splats(target: np.ndarray, splats: Splats2D, schedule: PruneSchedule | None = None,
               cfg: FitConfig | None = None) -> FitResult:
    cfg = cfg or FitConfig()
    schedule = schedule or PruneSchedule(total_iterations=cfg.iterations)
    if len(splats) == 0:
        raise DegenerateSceneError("cannot fit an empty set of splats")
    splats = replace(splats, **{f: np.array(getattr(splats, f), dtype=np.float64)
                                for f in ("mean", "log_scale", "theta", "logit", "color", "depth")})
    rng = np.random.default_rng(cfg.seed)
    h, w, _ = target.shape
    events = schedule.events()
    result = FitResult(splats, counts=[len(splats)])
    ev = 0
    for it in range(cfg.iterations + 1):
        while ev < len(events) and events[ev][0] == it:
            ratio = events[ev][1]
            if cfg.prune_score == "random":
                scores = random_scores(len(splats), rng)
            else:
                scores = score_batch(splats.batch(), w, h, background=cfg.background)
            splats = splats.subset(prune_mask(scores, ratio))
            if len(splats) == 0:
                raise DegenerateSceneError(f"pruning at iteration {it} removed every Gaussian")
            result.counts.append(len(splats))
            ev += 1
        if it == cfg.iterations:
            break
        loss, grads, _ = loss_and_grads(splats, target, cfg.background)
        result.losses.append(loss)
        _step(splats, grads, cfg)
    result.splats = splats
    result.image = render64(build_worklist(splats.batch(), w, h), cfg.background)
    return result


def fit_scene(targets, init: Scene, schedule: PruneSchedule | None = None, step_size: float = 1.0,
              iterations: int = 300, **kw) -> Scene:
    """Fit ``init`` to ``targets``, a list holding one (camera, image) pair.

    Multi-view fitting is out of scope; any other number of targets raises.
    """
    targets = list(targets)
    if len(targets) != 1:
        raise ValueError("the toy fitter supports exactly one (camera, image) target")
    cam, target = targets[0]
    target = np.asarray(target, dtype=np.float64)
    if (cam.width, cam.height) != (target.shape[1], target.shape[0]):
        raise ValueError("camera size does not match the target image")
    if len(init) == 0:
        raise DegenerateSceneError("cannot fit an empty scene")
    schedule = schedule or PruneSchedule(total_iterations=iterations)
    if iterations == 0 and not schedule.events():
        return init.copy()
    batch = project_scene(init, cam)
    if not batch.valid.all():
        raise ValueError("every initial Gaussian must be visible from the target camera")
    splats = Splats2D.from_batch(batch)
    cfg = FitConfig(iterations=iterations, step_size=step_size, **kw)
    out = fit_splats(target, splats, schedule, cfg)
    return lift_to_scene(out.splats, cam)


def pruning_efficacy(seed: int, n_init: int = 200, fit_iterations: int = 300, refine_iterations: int = 100,
                     ratio: float = 0.5, target: np.ndarray | None = None) -> tuple[float, float]:
    """PSNR after pruning ``ratio`` of a toy fit by score and at random.

    Both branches start from the same fit and get the same refinement.
    """
    target = toy_target() if target is None else target
    init = Splats2D.random(n_init, target.shape[0], np.random.default_rng(seed))
    base = fit_splats(target, init, None, FitConfig(iterations=fit_iterations, seed=seed)).splats
    out = []
    for mode in ("efficient", "random"):
        sched = PruneSchedule([(0, ratio)], [], refine_iterations)
        res = fit_splats(target, base, sched, FitConfig(iterations=refine_iterations, seed=seed, prune_score=mode))
        out.append(psnr(res.image, target))
    return out[0], out[1]


# ---------------------------------------------------------------------------
# sweep over pruning ratios
# ---------------------------------------------------------------------------

SWEEP_HEADER = ("soft_ratio", "hard_ratio", "final_count", "reduction_factor", "psnr_db", "wall_ms")


@dataclass
class SweepRow:
    soft_ratio: float
    hard_ratio: float
    final_count: int
    reduction_factor: float
    psnr_db: float
    wall_ms: float

    def as_tuple(self):
        return (self.soft_ratio, self.hard_ratio, self.final_count, self.reduction_factor,
                self.psnr_db, self.wall_ms)


def sweep(soft_ratios, hard_ratios, *, seed: int = 0, n_init: int = 200, scale: int = 100,
          soft_events: int = 1, target: np.ndarray | None = None, cfg: FitConfig | None = None) -> list[SweepRow]:
    """Fit once per (soft, hard) pair on the timeline compressed by ``scale``."""
    target = toy_target() if target is None else target
    rows = []
    for soft in soft_ratios:
        for hard in hard_ratios:
            sched = PruneSchedule.from_training_timeline(soft, hard, scale=scale, soft_events=soft_events)
            init = Splats2D.random(n_init, target.shape[0], np.random.default_rng(seed))
            run_cfg = replace(cfg or FitConfig(), iterations=sched.total_iterations, seed=seed)
            t0 = time.perf_counter()
            res = fit_splats(target, init, sched, run_cfg)
            ms = 1e3 * (time.perf_counter() - t0)
            final = len(res.splats)
            rows.append(SweepRow(float(soft), float(hard), final, n_init / final, psnr(res.image, target), ms))
    return rows


def write_sweep_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(SWEEP_HEADER)
        for r in rows:
            wr.writerow([r.soft_ratio, r.hard_ratio, r.final_count, f"{r.reduction_factor:.6g}",
                         f"{r.psnr_db:.6f}", f"{r.wall_ms:.3f}"])
