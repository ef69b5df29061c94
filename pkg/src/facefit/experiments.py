"""Synthetic recovery experiments shared by the scripts and the acceptance suite."""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from .camera import project_landmarks
from .facemodel import FaceModel, generate_toy_model, synthesize
from .losses import CoarseWeights, FineWeights, SceneParams, coarse_loss
from .optim import coarse_config, fine_config, fit_coarse, fit_detail
from .synthetic import SyntheticConfig, detail_scene, perturb, random_scene, render_detail, render_scene
from .uvspace import UvMap, _texel_length, blend_uv_maps, coverage_fraction, rasterize_to_uv, unwrap_image


def rotation_error(a: np.ndarray, b: np.ndarray) -> float:
    """Geodesic angle between two rotation matrices (rad)."""
    c = (np.trace(a @ b.T) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


# --- coarse -------------------------------------------------------------------------

@dataclass
class CoarseRecoveryConfig:
    seed: int = 0
    grid: int = 32
    size: int = 128
    coeff_scale: float = 0.03
    rotation: float = 0.1
    shift: float = 5.0
    scale: float = 0.1
    steps: int = 2000


def coarse_recovery(cfg: CoarseRecoveryConfig = CoarseRecoveryConfig(), weights: CoarseWeights = CoarseWeights()
                    ) -> dict:
    model = generate_toy_model(cfg.seed, cfg.grid)
    truth = random_scene(model, cfg.seed, SyntheticConfig(cfg.size, cfg.size, cfg.coeff_scale))
    image, lms, _ = render_scene(model, truth, cfg.size, cfg.size)
    init = perturb(truth, model, cfg.rotation, cfg.shift, cfg.scale)
    t0 = time.perf_counter()
    fit = fit_coarse(image, lms, model, init, coarse_config(max_steps=cfg.steps), weights)
    seconds = time.perf_counter() - t0
    p = fit.params
    terms, _, _ = coarse_loss(model, p, image, lms, weights, with_grad=False)
    v, _ = synthesize(model, p.coeffs)
    pred = project_landmarks(p.pose, v, model.landmark_indices)
    return {
        "landmark_rmse_px": float(np.sqrt(np.mean(np.sum((pred - lms) ** 2, axis=1)))),
        "photometric": terms.pixel,
        "rotation_error": rotation_error(p.pose.rotation, truth.pose.rotation),
        "steps": fit.steps,
        "status": fit.status,
        "seconds": seconds,
    }


# --- detail -------------------------------------------------------------------------

@dataclass
class DetailRecoveryConfig:
    seed: int = 0
    grid: int = 32
    size: int = 128
    res: int = 64
    fraction: float = 0.02  # bump amplitude as a fraction of the model diameter
    steps: int = 2000


def _visible_texels(model: FaceModel, scene: SceneParams, image: np.ndarray, res: int) -> np.ndarray:
    v, _ = synthesize(model, scene.coeffs)
    return unwrap_image(image, model, v, scene.pose, res)[1]


def detail_recovery(cfg: DetailRecoveryConfig = DetailRecoveryConfig(), weights: FineWeights = FineWeights()
                    ) -> dict:
    """Fit a bump field rendered on the true coarse face; errors are relative to the amplitude A."""
    model = generate_toy_model(cfg.seed, cfg.grid)
    scene = random_scene(model, cfg.seed, SyntheticConfig(cfg.size, cfg.size))
    image, truth, amp, _ = detail_scene(model, scene, cfg.res, cfg.size, cfg.size, cfg.fraction)
    vis = _visible_texels(model, scene, image, cfg.res) & truth.mask
    t0 = time.perf_counter()
    fit = fit_detail(image, scene, model, fine_config(max_steps=cfg.steps), weights, res=cfg.res)
    seconds = time.perf_counter() - t0
    err = fit.displacement.scalar[vis] - truth.scalar[vis]
    return {
        "amplitude": amp,
        "rmse_over_A": float(np.sqrt(np.mean(err ** 2)) / amp),
        "truth_rms_over_A": float(np.sqrt(np.mean(truth.scalar[vis] ** 2)) / amp),
        "steps": fit.steps,
        "status": fit.status,
        "seconds": seconds,
    }


def zero_detail_control(cfg: DetailRecoveryConfig = DetailRecoveryConfig(), weights: FineWeights = FineWeights()
                        ) -> dict:
    """Target is the coarse face rendered through the UV path; the fit should stay near zero."""
    model = generate_toy_model(cfg.seed, cfg.grid)
    scene = random_scene(model, cfg.seed, SyntheticConfig(cfg.size, cfg.size))
    _, truth, amp, state = detail_scene(model, scene, cfg.res, cfg.size, cfg.size, cfg.fraction)
    image = render_detail(state, UvMap(np.zeros_like(truth.scalar), truth.mask, "scalar"))
    vis = _visible_texels(model, scene, image, cfg.res) & truth.mask
    fit = fit_detail(image, scene, model, fine_config(max_steps=cfg.steps), weights, res=cfg.res)
    return {"amplitude": amp, "rms_over_A": float(np.sqrt(np.mean(fit.displacement.scalar[vis] ** 2)) / amp),
            "steps": fit.steps}


# --- multi-view ----------------------------------------------------------------------

@dataclass
class MultiViewConfig:
    seed: int = 0
    grid: int = 32
    size: int = 128
    res: int = 256
    yaw: float = float(np.radians(30.0))
    steps: int = 2000


def view_position_map(model: FaceModel, scene: SceneParams, image: np.ndarray, res: int) -> UvMap:
    """Model-space position map of `scene`, restricted to texels visible in `image` under its pose."""
    v, _ = synthesize(model, scene.coeffs)
    pos = rasterize_to_uv(model, v, v, res)
    _, visible = unwrap_image(image, model, v, scene.pose, res)
    return UvMap(pos.data, visible, "model")


def multiview_blend(cfg: MultiViewConfig = MultiViewConfig()) -> dict:
    """Fit the face seen at -yaw and +yaw independently, then blend the two visible position maps."""
    model = generate_toy_model(cfg.seed, cfg.grid)
    truth = random_scene(model, cfg.seed, SyntheticConfig(cfg.size, cfg.size))
    v_true, _ = synthesize(model, truth.coeffs)
    gt = rasterize_to_uv(model, v_true, v_true, cfg.res)
    fitted, truth_vis = [], []
    for sign in (-1.0, 1.0):
        scene = SceneParams(truth.coeffs, replace(truth.pose, ry=sign * cfg.yaw), truth.lighting)
        image, lms, _ = render_scene(model, scene, cfg.size, cfg.size)
        truth_vis.append(view_position_map(model, scene, image, cfg.res).mask)
        fit = fit_coarse(image, lms, model, cfg=coarse_config(max_steps=cfg.steps))
        fitted.append(view_position_map(model, fit.params, image, cfg.res))
    blended = blend_uv_maps(fitted[0], fitted[1])
    union = truth_vis[0] | truth_vis[1]
    m = blended.mask & gt.mask
    err = np.linalg.norm(blended.data[m] - gt.data[m], axis=1)
    return {
        "coverage": coverage_fraction(blended.mask, union),
        "rms_deviation": float(np.sqrt(np.mean(err ** 2))),
        "texel_length": _texel_length(gt),
    }
