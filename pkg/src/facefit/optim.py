"""Adam, a central-difference gradient checker, and the two per-image fitting drivers."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .camera import Pose
from .facemodel import FaceModel, ShapeCoeffs
from .lighting import ShLighting
from .losses import (CoarseWeights, FeatureExtractor, FineWeights, SceneParams, coarse_loss, fine_loss,
                     prepare_detail_state)
from .uvspace import UvMap, UvMesh, apply_displacement, uv_to_mesh

log = logging.getLogger(__name__)

MIN_SCALE = 1e-6


@dataclass
class FitConfig:
    learning_rate: float = 1e-2
    decay_every: int = 5000
    decay_rate: float = 0.9
    max_steps: int = 2000
    batch: int = 1
    seed: int = 0
    convergence_tol: float = 1e-7
    patience: int = 200

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 < self.decay_rate <= 1:
            raise ValueError("decay_rate must be in (0, 1]")
        if self.decay_every < 1:
            raise ValueError("decay_every must be >= 1")
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")
        if self.batch != 1:
            raise ValueError("per-image fitting uses batch size 1")

    def lr_at(self, step: int) -> float:
        return self.learning_rate * self.decay_rate ** (step // self.decay_every)


def coarse_config(**kw) -> FitConfig:
    return FitConfig(**{"learning_rate": 1e-2, "decay_every": 5000, "decay_rate": 0.9, **kw})


def fine_config(**kw) -> FitConfig:
    return FitConfig(**{"learning_rate": 2e-3, "decay_every": 5000, "decay_rate": 0.98, **kw})


# --- Adam ----------------------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray

    @classmethod
    def zeros_like(cls, params: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(params, dtype=np.float64), np.zeros_like(params, dtype=np.float64))


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8, step_index: int = 1) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update; `step_index` counts from 1."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ValueError(f"shape mismatch: params {params.shape}, grads {grads.shape}, state {state.m.shape}")
    if step_index < 1:
        raise ValueError("step_index starts at 1")
    m = beta1 * state.m + (1.0 - beta1) * grads
    v = beta2 * state.v + (1.0 - beta2) * grads * grads
    m_hat = m / (1.0 - beta1 ** step_index)
    v_hat = v / (1.0 - beta2 ** step_index)
    return params - lr * m_hat / (np.sqrt(v_hat) + eps), AdamState(m, v)


# --- gradient checking --------------------------------------------------------------

@dataclass
class GradCheckReport:
    coords: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray
    included: np.ndarray  # bool over coords
    tol: float
    worst_tol: float
    quantile: float

    @property
    def n_excluded(self) -> int:
        return int(np.sum(~self.included))

    @property
    def fraction_within(self) -> float:
        e = self.rel_error[self.included]
        return float(np.mean(e <= self.tol)) if e.size else 1.0

    @property
    def worst(self) -> float:
        e = self.rel_error[self.included]
        return float(e.max()) if e.size else 0.0

    @property
    def passed(self) -> bool:
        return self.fraction_within >= self.quantile and self.worst <= self.worst_tol

    def summary(self) -> str:
        return (f"{int(self.included.sum())} coords checked, {self.n_excluded} excluded, "
                f"{100 * self.fraction_within:.1f}% within {self.tol:g}, worst {self.worst:.2e}")


def relative_error(a: np.ndarray, n: np.ndarray, floor: float) -> np.ndarray:
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def gradient_check(loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]], params: np.ndarray,
                   eps: float = 1e-4, tol: float = 1e-3, worst_tol: float = 1e-2, quantile: float = 0.95,
                   signature: Callable[[np.ndarray], np.ndarray] | None = None, coords=None,
                   floor: float | None = None) -> GradCheckReport:
    """Compare an analytic gradient against central differences.

    Coordinates whose +/-eps perturbation changes `signature(params)` (e.g. the
    triangle-id image) are excluded and reported. Relative errors use
    max(|analytic|, |numeric|, floor) as denominator; the default floor is
    1e-6 of the largest numeric component, so components that are negligible
    against the gradient scale are not judged relatively.
    """
    x0 = np.asarray(params, dtype=np.float64).copy()
    f0, g0 = loss_fn(x0)
    if not np.isfinite(f0):
        raise FloatingPointError("loss is not finite at the check point")
    g0 = np.asarray(g0, dtype=np.float64).reshape(-1)
    coords = np.arange(x0.size) if coords is None else np.asarray(coords, dtype=np.int64)
    ref = None if signature is None else np.asarray(signature(x0))
    numeric = np.empty(coords.size)
    included = np.ones(coords.size, dtype=bool)
    for n_, k in enumerate(coords):
        xp = x0.copy()
        xp[k] += eps
        xm = x0.copy()
        xm[k] -= eps
        fp, _ = loss_fn(xp)
        fm, _ = loss_fn(xm)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"loss is not finite around coordinate {k}")
        numeric[n_] = (fp - fm) / (2 * eps)
        if ref is not None:
            if not (np.array_equal(signature(xp), ref) and np.array_equal(signature(xm), ref)):
                included[n_] = False
    analytic = g0[coords]
    if floor is None:
        floor = max(1e-6 * float(np.max(np.abs(numeric), initial=0.0)), 1e-12)
    return GradCheckReport(coords, analytic, numeric, relative_error(analytic, numeric, floor), included,
                           tol, worst_tol, quantile)


# --- coarse fitting -----------------------------------------------------------------

def default_init(model: FaceModel, width: int, height: int, landmarks: np.ndarray | None = None) -> SceneParams:
    """Frontal pose whose projected bounding box spans 80% of the image; grey ambient light.

    With landmarks, the translation aligns the mean-shape landmark centroid with
    the detected one; otherwise the model box is centred.
    """
    pts = model.mean_shape.reshape(-1, 3)
    extent = pts.max(axis=0) - pts.min(axis=0)
    f = 0.8 * min(width / extent[0], height / extent[1])
    if landmarks is not None:
        lm = pts[model.landmark_indices]
        t = np.mean(landmarks, axis=0) - f * lm[:, :2].mean(axis=0)
    else:
        t = -f * 0.5 * (pts.max(axis=0) + pts.min(axis=0))[:2]
    pose = Pose(f, 0.0, 0.0, 0.0, t[0], t[1], 0.0)
    return SceneParams(ShapeCoeffs.zeros(model), pose, ShLighting.ambient())


@dataclass
class FitResult:
    params: SceneParams
    trace: list[float] = field(default_factory=list)  # loss at every evaluated iterate
    best_trace: list[float] = field(default_factory=list)
    steps: int = 0
    status: str = "max_steps"


def _sanitize(vec: np.ndarray, model: FaceModel) -> np.ndarray:
    k = model.n_id + model.n_exp + model.n_tex
    vec[k] = max(vec[k], MIN_SCALE)
    return vec


def _run_adam(loss_and_grad, x0: np.ndarray, cfg: FitConfig, project=None):
    """Minimise with Adam; returns (best x, trace, best trace, steps, status)."""
    x = x0.copy()
    state = AdamState.zeros_like(x)
    trace: list[float] = []
    best_trace: list[float] = []
    best_x = x.copy()
    best = np.inf
    status = "max_steps"
    steps = 0
    for step in range(cfg.max_steps + 1):
        f, g = loss_and_grad(x)
        if not np.isfinite(f) or not np.all(np.isfinite(g)):
            status = "diverged"
            break
        trace.append(float(f))
        if f < best:
            best = f
            best_x = x.copy()
        best_trace.append(float(best))
        if step == cfg.max_steps:
            break
        if step >= cfg.patience:
            old = best_trace[step - cfg.patience]
            if old - best <= cfg.convergence_tol * abs(old):
                status = "converged"
                break
        x, state = adam_step(state, x, g, cfg.lr_at(step), step_index=step + 1)
        if project is not None:
            x = project(x)
        steps = step + 1
    return best_x, trace, best_trace, steps, status


def fit_coarse(image: np.ndarray, landmarks: np.ndarray, model: FaceModel, init: SceneParams | None = None,
               cfg: FitConfig | None = None, weights: CoarseWeights = CoarseWeights(),
               extractor: FeatureExtractor | None = None) -> FitResult:
    """Adam on the coarse objective over all scene parameters; returns the best iterate."""
    image = np.asarray(image, dtype=np.float64)
    landmarks = np.asarray(landmarks, dtype=np.float64)
    if landmarks.shape != (len(model.landmark_indices), 2):
        raise ValueError(f"expected {len(model.landmark_indices)} landmarks, got {landmarks.shape}")
    cfg = cfg or coarse_config()
    H, W = image.shape[:2]
    init = init or default_init(model, W, H, landmarks)

    def fg(vec):
        scene = SceneParams.from_vector(model, vec)
        terms, grad, _ = coarse_loss(model, scene, image, landmarks, weights, extractor)
        return terms.total, grad.to_vector()

    x0 = init.to_vector()
    f0, _ = fg(x0)
    if not np.isfinite(f0):
        return FitResult(init.copy(), [float(f0)], [], 0, "diverged")
    best_x, trace, best_trace, steps, status = _run_adam(fg, x0, cfg, lambda v: _sanitize(v, model))
    log.info("coarse fit: %d steps, best loss %.6g (%s)", steps, best_trace[-1] if best_trace else np.nan, status)
    return FitResult(SceneParams.from_vector(model, best_x), trace, best_trace, steps, status)


# --- detail fitting -----------------------------------------------------------------

@dataclass
class DetailResult:
    displacement: UvMap
    mesh: UvMesh
    detail_pos: UvMap
    trace: list[float] = field(default_factory=list)
    best_trace: list[float] = field(default_factory=list)
    steps: int = 0
    status: str = "max_steps"


def fit_detail(image: np.ndarray, coarse: SceneParams, model: FaceModel, cfg: FitConfig | None = None,
               weights: FineWeights = FineWeights(), res: int = 256, mode: str = "view_z") -> DetailResult:
    """Adam on the fine objective over every displacement texel, starting from zero.

    The coarse parameters are read but never modified.
    """
    image = np.asarray(image, dtype=np.float64)
    cfg = cfg or fine_config()
    H, W = image.shape[:2]
    state = prepare_detail_state(model, coarse, res, W, H, mode)
    mask = state.coarse_pos.mask.copy()

    def as_map(vec):
        return UvMap(vec.reshape(res, res), mask, "scalar")

    def fg(vec):
        terms, g, _ = fine_loss(as_map(vec), state, image, weights)
        return terms.total, g.reshape(-1)

    x0 = np.zeros(res * res)
    best_x, trace, best_trace, steps, status = _run_adam(fg, x0, cfg)
    disp = as_map(best_x)
    detail = apply_displacement(state.coarse_pos, disp, mode, state.coarse_normals)
    log.info("detail fit: %d steps, best loss %.6g (%s)", steps, best_trace[-1] if best_trace else np.nan, status)
    return DetailResult(disp, uv_to_mesh(detail), detail, trace, best_trace, steps, status)
