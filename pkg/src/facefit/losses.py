"""Coarse and fine objectives, each term returning a value and its cotangents."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from . import camera
from .camera import Pose
from .facemodel import FaceModel, ShapeCoeffs, synthesize, synthesize_vjp
from .lighting import ShLighting
from .raster import SceneGrad, render_backward, render_face
from .uvspace import (UvMap, apply_displacement, rasterize_to_uv, render_from_uv, render_from_uv_vjp, to_view,
                      uv_normals, uv_normals_vjp)


@dataclass(frozen=True)
class CoarseWeights:
    w1: float = 1.3  # photometric
    w2: float = 1.0  # landmarks
    w3: float = 1.5  # perceptual identity
    w4: float = 20.0  # parameter regularizer
    omega_s: float = 1.3
    omega_e: float = 1.0
    omega_t: float = 1.3

    def __post_init__(self):
        for k, v in vars(self).items():
            if not v >= 0:
                raise ValueError(f"weight {k} must be non-negative, got {v}")


@dataclass(frozen=True)
class FineWeights:
    omega_p: float = 1.0
    omega_s_fine: float = 10.0
    omega_d: float = 10.0
    w_sn: float = 20.0
    w_sz: float = 10.0
    w_dn: float = 0.5
    w_dz: float = 0.01

    def __post_init__(self):
        for k, v in vars(self).items():
            if not v >= 0:
                raise ValueError(f"weight {k} must be non-negative, got {v}")


# --- image terms ----------------------------------------------------------------

def photometric_loss(I: np.ndarray, I_R: np.ndarray, mask: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean per-pixel RGB Euclidean distance over the mask; gradient wrt I_R."""
    I = np.asarray(I, dtype=np.float64)
    I_R = np.asarray(I_R, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if I.shape != I_R.shape or I.shape[:2] != mask.shape:
        raise ValueError(f"shape mismatch: {I.shape}, {I_R.shape}, mask {mask.shape}")
    grad = np.zeros_like(I_R)
    n = int(mask.sum())
    if n == 0:
        return 0.0, grad
    r = I_R[mask] - I[mask]
    sq = np.sum(r * r, axis=1)
    norm = np.sqrt(sq)
    value = float(np.sum(norm) / n)
    # exact derivative of the value; subgradient 0 where the pixels agree exactly
    safe = np.where(norm > 0, norm, 1.0)
    grad[mask] = np.where(norm[:, None] > 0, r / safe[:, None], 0.0) / n
    return value, grad


def landmark_loss(p: np.ndarray, p_R: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared landmark distance; gradient wrt p_R."""
    p = np.asarray(p, dtype=np.float64)
    p_R = np.asarray(p_R, dtype=np.float64)
    if p.shape != p_R.shape:
        raise ValueError(f"landmark count mismatch: {p.shape} vs {p_R.shape}")
    n = p.shape[0]
    d = p_R - p
    return float(np.sum(d * d) / n), 2.0 * d / n


class FeatureExtractor(Protocol):
    def features(self, image: np.ndarray) -> np.ndarray: ...

    def features_vjp(self, image: np.ndarray, g_features: np.ndarray) -> np.ndarray: ...


def _area_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Area-averaging resampling matrix (n_out x n_in)."""
    M = np.zeros((n_out, n_in))
    edges = np.linspace(0.0, n_in, n_out + 1)
    for o in range(n_out):
        lo, hi = edges[o], edges[o + 1]
        for i in range(int(np.floor(lo)), int(np.ceil(hi))):
            overlap = min(hi, i + 1) - max(lo, i)
            if overlap > 0:
                M[o, i] = overlap / (hi - lo)
    return M


@dataclass
class LinearFeatureExtractor:
    """Grayscale, area-downsample to size x size, then a fixed seeded projection."""

    seed: int = 0
    size: int = 32
    n_features: int = 128
    _proj: np.ndarray = field(init=False, repr=False)
    _cache: dict = field(init=False, repr=False, default_factory=dict)

    GRAY = np.array([0.299, 0.587, 0.114])

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        self._proj = rng.standard_normal((self.n_features, self.size * self.size)) / self.size

    def _mats(self, h: int, w: int):
        key = (h, w)
        if key not in self._cache:
            self._cache[key] = (_area_matrix(self.size, h), _area_matrix(self.size, w))
        return self._cache[key]

    def features(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        Dy, Dx = self._mats(*image.shape[:2])
        small = Dy @ (image @ self.GRAY) @ Dx.T
        return self._proj @ small.reshape(-1)

    def features_vjp(self, image: np.ndarray, g_features: np.ndarray) -> np.ndarray:
        Dy, Dx = self._mats(*np.shape(image)[:2])
        g_small = (self._proj.T @ g_features).reshape(self.size, self.size)
        g_gray = Dy.T @ g_small @ Dx
        return g_gray[:, :, None] * self.GRAY[None, None, :]


def perceptual_loss(I: np.ndarray, I_R: np.ndarray, extractor: FeatureExtractor | None = None
                    ) -> tuple[float, np.ndarray]:
    """Squared feature distance; gradient wrt I_R."""
    extractor = extractor or DEFAULT_EXTRACTOR
    fa = np.asarray(extractor.features(I))
    fb = np.asarray(extractor.features(I_R))
    if fa.shape != fb.shape:
        raise ValueError(f"feature length mismatch: {fa.shape} vs {fb.shape}")
    d = fb - fa
    return float(d @ d), extractor.features_vjp(I_R, 2.0 * d)


DEFAULT_EXTRACTOR = LinearFeatureExtractor()


def param_regularizer(c: ShapeCoeffs, omega_s: float = 1.3, omega_e: float = 1.0, omega_t: float = 1.3
                      ) -> tuple[float, ShapeCoeffs]:
    value = omega_s * c.x_id @ c.x_id + omega_e * c.x_exp @ c.x_exp + omega_t * c.x_tex @ c.x_tex
    grad = ShapeCoeffs(2 * omega_s * c.x_id, 2 * omega_e * c.x_exp, 2 * omega_t * c.x_tex)
    return float(value), grad


# --- coarse objective -------------------------------------------------------------

@dataclass
class SceneParams:
    coeffs: ShapeCoeffs
    pose: Pose
    lighting: ShLighting

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.coeffs.to_vector(), self.pose.to_vector(), self.lighting.coeffs.T.reshape(-1)])

    @classmethod
    def from_vector(cls, model: FaceModel, vec: np.ndarray) -> "SceneParams":
        vec = np.asarray(vec, dtype=np.float64)
        expected = model.n_id + model.n_exp + model.n_tex + 7 + 27
        if vec.shape != (expected,):
            raise ValueError(f"parameter vector must have length {expected}, got {vec.shape}")
        a = model.n_id
        b = a + model.n_exp
        c = b + model.n_tex
        coeffs = ShapeCoeffs(vec[:a], vec[a:b], vec[b:c])
        pose = Pose.from_vector(vec[c:c + 7])
        light = ShLighting(vec[c + 7:].reshape(3, 9).T)
        return cls(coeffs, pose, light)

    def copy(self) -> "SceneParams":
        return SceneParams(self.coeffs.copy(), Pose(**vars(self.pose)), ShLighting(self.lighting.coeffs.copy()))


@dataclass
class CoarseTerms:
    total: float
    pixel: float
    landmark: float
    identity: float
    regularizer: float


def coarse_loss(model: FaceModel, scene: SceneParams, image: np.ndarray, landmarks: np.ndarray,
                weights: CoarseWeights = CoarseWeights(), extractor: FeatureExtractor | None = None,
                with_grad: bool = True):
    """Weighted coarse objective. Returns (terms, SceneGrad or None, render)."""
    H, W = image.shape[:2]
    out = render_face(model, scene.coeffs, scene.pose, scene.lighting, W, H)
    l_pix, g_pix = photometric_loss(image, out.color, out.mask)
    l_id, g_id = perceptual_loss(image, out.color, extractor)
    vertices = out.state.vertices
    p_R = camera.project_landmarks(scene.pose, vertices, model.landmark_indices)
    l_lm, g_lm = landmark_loss(landmarks, p_R)
    r, g_r = param_regularizer(scene.coeffs, weights.omega_s, weights.omega_e, weights.omega_t)
    total = weights.w1 * l_pix + weights.w2 * l_lm + weights.w3 * l_id + weights.w4 * r
    terms = CoarseTerms(total, l_pix, l_lm, l_id, r)
    if not with_grad:
        return terms, None, out

    grad = render_backward(out.state, weights.w1 * g_pix + weights.w3 * g_id)
    gp, gv = camera.project_landmarks_vjp(scene.pose, vertices, model.landmark_indices, weights.w2 * g_lm)
    gc = synthesize_vjp(model, scene.coeffs, gv, None)
    grad = grad + SceneGrad(gc.x_id + weights.w4 * g_r.x_id, gc.x_exp + weights.w4 * g_r.x_exp,
                            weights.w4 * g_r.x_tex, gp, np.zeros((9, 3)))
    return terms, grad, out


# --- fine objective -----------------------------------------------------------------

@dataclass
class DetailState:
    """Frozen quantities from the coarse fit used by the detail stage."""

    coarse_pos: UvMap  # view space
    coarse_normals: UvMap
    albedo: UvMap
    lighting: ShLighting
    width: int
    height: int
    mode: str = "view_z"


def prepare_detail_state(model: FaceModel, scene: SceneParams, res: int, width: int, height: int,
                         mode: str = "view_z") -> DetailState:
    vertices, albedo = synthesize(model, scene.coeffs)
    pos_model = rasterize_to_uv(model, vertices, vertices, res)
    alb = rasterize_to_uv(model, vertices, albedo, res, space="color")
    pos_view = to_view(pos_model, scene.pose)
    return DetailState(coarse_pos=pos_view, coarse_normals=uv_normals(pos_view), albedo=alb,
                       lighting=ShLighting(scene.lighting.coeffs.copy()), width=width, height=height, mode=mode)


def _valid_pairs(mask: np.ndarray):
    """Index pairs of horizontally and vertically adjacent valid texels (each unordered pair once)."""
    H, W = mask.shape
    idx = np.arange(H * W).reshape(H, W)
    h = mask[:, :-1] & mask[:, 1:]
    v = mask[:-1, :] & mask[1:, :]
    a = np.concatenate([idx[:, :-1][h], idx[:-1, :][v]])
    b = np.concatenate([idx[:, 1:][h], idx[1:, :][v]])
    return a, b


def _check_res(*maps):
    shape = maps[0].data.shape[:2]
    for m in maps[1:]:
        if m.data.shape[:2] != shape:
            raise ValueError(f"resolution mismatch: {m.data.shape[:2]} vs {shape}")


def smoothness_loss(n_coarse: UvMap, n_detail: UvMap, d: UvMap, mask: np.ndarray | None = None,
                    w_sn: float = 20.0, w_sz: float = 10.0):
    """4-neighbour smoothness of normal change and displacement; both pair orders counted.

    Returns (value, grad wrt n_detail H x W x 3, grad wrt d H x W).
    """
    _check_res(n_coarse, n_detail, d)
    m = n_coarse.mask & n_detail.mask & d.mask
    if mask is not None:
        m &= np.asarray(mask, bool)
    H, W = m.shape
    dn = np.where(m[:, :, None], n_detail.data - n_coarse.data, 0.0).reshape(-1, 3)
    dz = np.where(m, d.scalar, 0.0).reshape(-1)
    a, b = _valid_pairs(m)
    en = dn[a] - dn[b]
    ez = dz[a] - dz[b]
    value = 2.0 * (w_sn * np.sum(en * en) + w_sz * np.sum(ez * ez))
    g_n = np.zeros((H * W, 3))
    g_z = np.zeros(H * W)
    for k in range(3):
        g_n[:, k] = (np.bincount(a, weights=4.0 * w_sn * en[:, k], minlength=H * W)
                     - np.bincount(b, weights=4.0 * w_sn * en[:, k], minlength=H * W))
    g_z = (np.bincount(a, weights=4.0 * w_sz * ez, minlength=H * W)
           - np.bincount(b, weights=4.0 * w_sz * ez, minlength=H * W))
    return float(value), g_n.reshape(H, W, 3), g_z.reshape(H, W)


def displacement_regularizer(n_coarse: UvMap, n_detail: UvMap, d: UvMap, mask: np.ndarray | None = None,
                             w_dn: float = 0.5, w_dz: float = 0.01):
    """Sum over valid texels of w_dn |dn|^2 + w_dz d^2. Returns (value, grad n_detail, grad d)."""
    _check_res(n_coarse, n_detail, d)
    m = n_coarse.mask & n_detail.mask & d.mask
    if mask is not None:
        m &= np.asarray(mask, bool)
    dn = np.where(m[:, :, None], n_detail.data - n_coarse.data, 0.0)
    dz = np.where(m, d.scalar, 0.0)
    value = w_dn * np.sum(dn * dn) + w_dz * np.sum(dz * dz)
    return float(value), 2.0 * w_dn * dn, 2.0 * w_dz * dz


@dataclass
class FineTerms:
    total: float
    pixel: float
    smooth: float
    disp: float


def fine_loss(displacement: UvMap, state: DetailState, image: np.ndarray, weights: FineWeights = FineWeights(),
              with_grad: bool = True):
    """Weighted detail objective. Returns (terms, grad wrt displacement H x W or None, render)."""
    _check_res(displacement, state.coarse_pos)
    detail = apply_displacement(state.coarse_pos, displacement, state.mode, state.coarse_normals)
    out = render_from_uv(detail, state.albedo, state.lighting, state.width, state.height)
    n_detail = out.state.normals
    l_pix, g_img = photometric_loss(image, out.color, out.mask)
    l_s, gs_n, gs_z = smoothness_loss(state.coarse_normals, n_detail, displacement, None, weights.w_sn, weights.w_sz)
    l_d, gd_n, gd_z = displacement_regularizer(state.coarse_normals, n_detail, displacement, None,
                                               weights.w_dn, weights.w_dz)
    total = weights.omega_p * l_pix + weights.omega_s_fine * l_s + weights.omega_d * l_d
    terms = FineTerms(total, l_pix, l_s, l_d)
    if not with_grad:
        return terms, None, out

    g_pos, _, _ = render_from_uv_vjp(out.state, weights.omega_p * g_img)
    g_n = weights.omega_s_fine * gs_n + weights.omega_d * gd_n
    g_pos += uv_normals_vjp(detail, g_n)
    if state.mode == "view_z":
        g_d = g_pos[:, :, 2]
    else:
        g_d = np.sum(g_pos * state.coarse_normals.data, axis=2)
    g_d = np.where(detail.mask, g_d, 0.0)
    g_d = g_d + weights.omega_s_fine * gs_z + weights.omega_d * gd_z
    return terms, g_d, out
