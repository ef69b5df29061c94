"""Synthetic scenes with known parameters for recovery experiments."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import Pose, project_landmarks
from .facemodel import FaceModel, ShapeCoeffs, model_diameter, synthesize
from .lighting import ShLighting
from .losses import DetailState, SceneParams, prepare_detail_state
from .raster import render_face
from .uvspace import UvMap, apply_displacement, render_from_uv


@dataclass
class SyntheticConfig:
    width: int = 128
    height: int = 128
    coeff_scale: float = 0.03  # std of the true coefficients
    max_rotation: float = 0.1
    max_shift: float = 3.0  # pixels
    ambient: float = 0.9
    max_directional: float = 0.3


def frontal_pose(model: FaceModel, width: int, height: int) -> Pose:
    """Pose whose projected bounding box spans 80% of the image, centred."""
    pts = model.mean_shape.reshape(-1, 3)
    extent = pts.max(axis=0) - pts.min(axis=0)
    f = 0.8 * min(width / extent[0], height / extent[1])
    t = -f * 0.5 * (pts.max(axis=0) + pts.min(axis=0))[:2]
    return Pose(f, 0.0, 0.0, 0.0, float(t[0]), float(t[1]), 0.0)


def random_scene(model: FaceModel, seed: int, cfg: SyntheticConfig = SyntheticConfig()) -> SceneParams:
    rng = np.random.default_rng(seed)
    s = cfg.coeff_scale
    coeffs = ShapeCoeffs(s * rng.standard_normal(model.n_id), s * rng.standard_normal(model.n_exp),
                         s * rng.standard_normal(model.n_tex))
    base = frontal_pose(model, cfg.width, cfg.height)
    rx, ry, rz = rng.uniform(-cfg.max_rotation, cfg.max_rotation, 3)
    dx, dy = rng.uniform(-cfg.max_shift, cfg.max_shift, 2)
    pose = Pose(base.f, float(rx), float(ry), float(rz), base.tx + float(dx), base.ty + float(dy), 0.0)
    light = ShLighting.ambient(cfg.ambient)
    # band-1 terms, shared direction with a slight colour tint
    d = rng.uniform(-cfg.max_directional, cfg.max_directional, 3)
    tint = 1.0 + rng.uniform(-0.1, 0.1, 3)
    light.coeffs[1:4] = np.outer(d, tint)
    return SceneParams(coeffs, pose, light)


def render_scene(model: FaceModel, scene: SceneParams, width: int, height: int):
    """(image, 68 x 2 landmarks, render) for a scene."""
    r = render_face(model, scene.coeffs, scene.pose, scene.lighting, width, height)
    v, _ = synthesize(model, scene.coeffs)
    return r.color, project_landmarks(scene.pose, v, model.landmark_indices), r


def perturb(scene: SceneParams, model: FaceModel, rotation: float = 0.1, shift: float = 5.0,
            scale: float = 0.1) -> SceneParams:
    """Initial guess off by the given rotation (rad, each axis), shift (px) and relative scale, zero coefficients."""
    p = scene.pose
    pose = Pose(p.f * (1 + scale), p.rx + rotation, p.ry - rotation, p.rz + rotation, p.tx + shift, p.ty - shift,
                p.tz)
    return SceneParams(ShapeCoeffs.zeros(model), pose, ShLighting.ambient())


def bump_amplitude(model: FaceModel, pose: Pose, fraction: float = 0.02) -> float:
    """Displacement amplitude in view units for `fraction` of the model diameter."""
    return fraction * model_diameter(model) * pose.f


def bump_field(res: int, amplitude: float, mask: np.ndarray) -> UvMap:
    """Smooth test displacement: a raised blob, a dent and a short ripple, peak |d| about `amplitude`."""
    ii, jj = np.meshgrid(np.arange(res), np.arange(res), indexing="ij")
    u = (jj + 0.5) / res
    v = (ii + 0.5) / res
    d = (np.exp(-((u - 0.35) ** 2 + (v - 0.6) ** 2) / (2 * 0.06 ** 2))
         - np.exp(-((u - 0.62) ** 2 + (v - 0.35) ** 2) / (2 * 0.08 ** 2))
         + 0.5 * np.sin(6 * np.pi * u) * np.exp(-((v - 0.75) ** 2) / (2 * 0.05 ** 2)))
    return UvMap(np.where(mask, amplitude * d, 0.0), mask, "scalar")


def render_detail(state: DetailState, displacement: UvMap) -> np.ndarray:
    detail = apply_displacement(state.coarse_pos, displacement, state.mode, state.coarse_normals)
    return render_from_uv(detail, state.albedo, state.lighting, state.width, state.height).color


def detail_scene(model: FaceModel, scene: SceneParams, res: int, width: int, height: int,
                 fraction: float = 0.02):
    """(image, true displacement, amplitude, detail state) for a coarse scene plus a bump field."""
    state = prepare_detail_state(model, scene, res, width, height)
    amp = bump_amplitude(model, scene.pose, fraction)
    disp = bump_field(res, amp, state.coarse_pos.mask)
    return render_detail(state, disp), disp, amp, state


def sphere_position_map(res: int, radius: float = 50.0, space: str = "view") -> UvMap:
    """Equirectangular position map of a sphere: u spans longitude, v spans colatitude."""
    c = (np.arange(res) + 0.5) / res
    theta = np.pi * c[:, None]
    phi = 2 * np.pi * c[None, :]
    data = radius * np.stack([np.sin(theta) * np.cos(phi), np.cos(theta) * np.ones_like(phi),
                              np.sin(theta) * np.sin(phi)], axis=2)
    return UvMap(data, np.ones((res, res), bool), space)
