"""Shared finite-difference sampler for the compositing gradient."""

from __future__ import annotations

import numpy as np

from tilesplat.geometry import CameraModel, project_scene
from tilesplat.pruning import build_worklist, composite_backward, composite_forward, pixel_splats
from tilesplat.scene_io import synth_scene


def forward(sig, g, col, bg):
    n = len(sig)
    alpha, tb, used = np.zeros(n), np.zeros(n), np.zeros(n, dtype=np.bool_)
    r, gg, b, tf = composite_forward(sig, g, col, n, bg, alpha, tb, used)
    return np.array([r, gg, b]), alpha, tb, used, tf


def analytic(sig, g, col, bg):
    _, alpha, tb, used, tf = forward(sig, g, col, bg)
    dca = np.zeros((len(sig), 3))
    composite_backward(col, len(sig), bg, alpha, tb, used, tf, dca)
    return sig[:, None] * dca, alpha, used


def fd_pairs(seed, n_pairs, eps=1e-4):
    """(analytic, numeric) dC/dg for random (pixel, Gaussian) pairs."""
    scene = synth_scene(seed, 20, extent=((-1.5, 1.5), (-1.5, 1.5), (3, 6)), scale_log_mean=-1.5,
                        scale_log_sigma=0.4)
    cam = CameraModel.looking_down_z(40.0, 40.0, 64, 64)
    work = build_worklist(project_scene(scene, cam), 64, 64)
    rng = np.random.default_rng(seed)
    bg = rng.uniform(0, 1, 3)
    out = []
    tries = 0
    while len(out) < n_pairs and tries < 200_000:
        tries += 1
        px, py = rng.integers(0, 64, 2)
        sig, g, col, _ = pixel_splats(work, int(px), int(py))
        if len(sig) == 0:
            continue
        k = int(rng.integers(len(sig)))
        grad, alpha, used = analytic(sig, g, col, bg)
        if not used[k] or not 0.05 < alpha[k] < 0.9:
            continue
        gp, gm = g.copy(), g.copy()
        gp[k] += eps
        gm[k] -= eps
        cp, _, _, up, _ = forward(sig, gp, col, bg)
        cm, _, _, um, _ = forward(sig, gm, col, bg)
        if not (np.array_equal(up, used) and np.array_equal(um, used)):
            continue  # perturbation crossed a skip/stop threshold
        out.append((grad[k], (cp - cm) / (2 * eps)))
    return out


def relative_error(analytic, numeric):
    return np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12)
