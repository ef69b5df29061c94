"""Hard z-buffered rasterization, coarse-face rendering and its reverse pass.

Gradients with respect to screen-space vertex positions flow only through the
barycentric weights of covered pixels; coverage and occlusion changes
contribute nothing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import camera, lighting
from ._kernels import scan_convert
from .camera import Pose
from .facemodel import FaceModel, ShapeCoeffs, synthesize, synthesize_vjp, vertex_normals, vertex_normals_vjp
from .lighting import ShLighting


@dataclass
class RasterOutput:
    color: np.ndarray  # H x W x 3, linear RGB
    tri_id: np.ndarray  # H x W, -1 = background
    bary: np.ndarray  # H x W x 3
    depth: np.ndarray  # H x W, inf on background
    mask: np.ndarray  # H x W bool

    @property
    def height(self) -> int:
        return self.tri_id.shape[0]

    @property
    def width(self) -> int:
        return self.tri_id.shape[1]


def to_raster(points2d: np.ndarray, width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Centred, y-up pixel coordinates -> (column, row) raster coordinates."""
    p = np.asarray(points2d, dtype=np.float64)
    return p[:, 0] + 0.5 * width, 0.5 * height - p[:, 1]


def pixel_centers(width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Centred, y-up coordinates (x, y) of every pixel centre, each H x W."""
    x = np.arange(width) + 0.5 - 0.5 * width
    y = 0.5 * height - (np.arange(height) + 0.5)
    return np.meshgrid(x, y)


def signed_areas(points2d: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Twice the signed area in y-up screen space; positive = counter-clockwise = front."""
    p = np.asarray(points2d, dtype=np.float64)
    a, b, c = p[triangles[:, 0]], p[triangles[:, 1]], p[triangles[:, 2]]
    return (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])


def rasterize(points2d, depth, attributes, triangles, width: int, height: int,
              cull_backfaces: bool = False) -> tuple[RasterOutput, np.ndarray | None]:
    """Scan-convert a mesh and interpolate per-vertex attributes.

    A pixel is covered by the triangle containing its centre with the smallest
    interpolated depth; equal depths go to the lower triangle index.
    """
    width, height = int(width), int(height)
    if width <= 0 or height <= 0:
        raise ValueError(f"image dimensions must be positive, got {width}x{height}")
    triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    points2d = np.asarray(points2d, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if not (np.all(np.isfinite(points2d)) and np.all(np.isfinite(depth))):
        raise ValueError("rasterize requires finite vertex positions and depths")
    area = signed_areas(points2d, triangles)
    active = area != 0.0
    if cull_backfaces:
        active &= area > 0.0
    xs, ys = to_raster(points2d, width, height)
    tri_id, bary, zbuf = scan_convert(xs, ys, depth, triangles, active, width, height)
    mask = tri_id >= 0
    frag = RasterOutput(color=np.zeros((height, width, 3)), tri_id=tri_id, bary=bary, depth=zbuf, mask=mask)
    interp = None
    if attributes is not None:
        interp = interpolate(frag, triangles, attributes)
    return frag, interp


def interpolate(frag: RasterOutput, triangles: np.ndarray, attributes: np.ndarray) -> np.ndarray:
    attributes = np.asarray(attributes, dtype=np.float64)
    if attributes.ndim == 1:
        attributes = attributes[:, None]
    out = np.zeros(frag.tri_id.shape + (attributes.shape[1],))
    m = frag.mask
    corners = triangles[frag.tri_id[m]]
    b = frag.bary[m]
    out[m] = np.einsum("pk,pka->pa", b, attributes[corners])
    return out


def interpolate_vjp(frag: RasterOutput, triangles: np.ndarray, attributes: np.ndarray,
                    points2d: np.ndarray, g_interp: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cotangents for (attributes V x A, screen positions V x 2) of `interpolate`."""
    attributes = np.asarray(attributes, dtype=np.float64)
    squeeze = attributes.ndim == 1
    if squeeze:
        attributes = attributes[:, None]
        g_interp = np.asarray(g_interp)[..., None]
    V, A = attributes.shape
    m = frag.mask
    tid = frag.tri_id[m]
    corners = triangles[tid]  # P x 3
    b = frag.bary[m]  # P x 3
    G = np.asarray(g_interp, dtype=np.float64)[m]  # P x A

    flat = corners.reshape(-1)
    g_attr = np.empty((V, A))
    contrib = b[:, :, None] * G[:, None, :]  # P x 3 x A
    for a in range(A):
        g_attr[:, a] = np.bincount(flat, weights=contrib[:, :, a].reshape(-1), minlength=V)

    # dL/db_k = G . a_k ; moving vertex j by delta acts like moving the sample by -b_j delta
    gb = np.einsum("pa,pka->pk", G, attributes[corners])
    p = np.asarray(points2d, dtype=np.float64)
    q = p[corners]  # P x 3 x 2
    area = ((q[:, 1, 0] - q[:, 0, 0]) * (q[:, 2, 1] - q[:, 0, 1])
            - (q[:, 1, 1] - q[:, 0, 1]) * (q[:, 2, 0] - q[:, 0, 0]))
    grad_p = np.zeros((len(tid), 2))
    for k in range(3):
        a_ = q[:, (k + 1) % 3]
        c_ = q[:, (k + 2) % 3]
        grad_p[:, 0] += gb[:, k] * (-(c_[:, 1] - a_[:, 1])) / area
        grad_p[:, 1] += gb[:, k] * (c_[:, 0] - a_[:, 0]) / area
    g_pts = np.empty((V, 2))
    for d in range(2):
        w = -(b * grad_p[:, d:d + 1])
        g_pts[:, d] = np.bincount(flat, weights=w.reshape(-1), minlength=V)
    if squeeze:
        g_attr = g_attr[:, 0]
    return g_attr, g_pts


# --- shaded mesh rendering -------------------------------------------------

@dataclass
class MeshRenderState:
    view: np.ndarray
    normals: np.ndarray
    albedo: np.ndarray
    triangles: np.ndarray
    lighting: ShLighting
    frag: RasterOutput
    attrs: np.ndarray
    n_pix: np.ndarray  # P x 3 interpolated (unnormalised) normals at covered pixels
    n_unit: np.ndarray
    alb_pix: np.ndarray


def _normalize_rows(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norm = np.linalg.norm(v, axis=-1)
    safe = np.where(norm > 0, norm, 1.0)
    out = v / safe[..., None]
    bad = norm == 0
    if np.any(bad):
        out[bad] = (0.0, 0.0, 1.0)
    return out, norm


def render_mesh(view: np.ndarray, normals: np.ndarray, albedo: np.ndarray, triangles: np.ndarray,
                light: ShLighting, width: int, height: int, cull_backfaces: bool = True):
    """Rasterize a view-space mesh and shade it with SH lighting; background is black."""
    triangles = np.asarray(triangles, dtype=np.int64)
    attrs = np.concatenate([albedo, normals], axis=1)
    frag, interp = rasterize(view[:, :2], view[:, 2], attrs, triangles, width, height, cull_backfaces)
    m = frag.mask
    alb_pix = interp[m, :3]
    n_pix = interp[m, 3:6]
    n_unit, _ = _normalize_rows(n_pix)
    frag.color[m] = lighting.shade(alb_pix, n_unit, light)
    state = MeshRenderState(view=view, normals=normals, albedo=albedo, triangles=triangles, lighting=light,
                            frag=frag, attrs=attrs, n_pix=n_pix, n_unit=n_unit, alb_pix=alb_pix)
    return frag, state


def render_mesh_vjp(state: MeshRenderState, g_image: np.ndarray):
    """Returns cotangents (view positions V x 3 (z is zero), normals V x 3, albedo V x 3, SH 9 x 3)."""
    frag = state.frag
    g_image = np.asarray(g_image, dtype=np.float64)
    if g_image.shape != frag.color.shape:
        raise ValueError(f"image cotangent shape {g_image.shape} does not match render {frag.color.shape}")
    m = frag.mask
    g_pix = g_image[m]
    g_alb, g_nu, g_sh = lighting.shade_vjp(state.alb_pix, state.n_unit, state.lighting, g_pix)
    norm = np.linalg.norm(state.n_pix, axis=1)
    safe = np.where(norm > 0, norm, 1.0)
    n = state.n_unit
    g_npix = (g_nu - n * np.sum(n * g_nu, axis=1, keepdims=True)) / safe[:, None]
    g_npix[norm == 0] = 0.0
    g_interp = np.zeros(frag.tri_id.shape + (6,))
    g_interp[m, :3] = g_alb
    g_interp[m, 3:6] = g_npix
    g_attrs, g_pts = interpolate_vjp(frag, state.triangles, state.attrs, state.view[:, :2], g_interp)
    g_view = np.zeros_like(state.view)
    g_view[:, :2] = g_pts
    return g_view, g_attrs[:, 3:6], g_attrs[:, :3], g_sh


# --- full coarse face -------------------------------------------------------

@dataclass
class RenderState:
    model: FaceModel
    coeffs: ShapeCoeffs
    pose: Pose
    lighting: ShLighting
    vertices: np.ndarray
    normals_model: np.ndarray
    mesh: MeshRenderState


@dataclass
class SceneGrad:
    x_id: np.ndarray
    x_exp: np.ndarray
    x_tex: np.ndarray
    pose: np.ndarray  # 7, ordered f, rx, ry, rz, tx, ty, tz
    sh: np.ndarray  # 9 x 3

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.x_id, self.x_exp, self.x_tex, self.pose, self.sh.T.reshape(-1)])

    def __add__(self, other: "SceneGrad") -> "SceneGrad":
        return SceneGrad(self.x_id + other.x_id, self.x_exp + other.x_exp, self.x_tex + other.x_tex,
                         self.pose + other.pose, self.sh + other.sh)

    def scaled(self, s: float) -> "SceneGrad":
        return SceneGrad(s * self.x_id, s * self.x_exp, s * self.x_tex, s * self.pose, s * self.sh)

    @classmethod
    def zeros(cls, model: FaceModel) -> "SceneGrad":
        return cls(np.zeros(model.n_id), np.zeros(model.n_exp), np.zeros(model.n_tex), np.zeros(7),
                   np.zeros((9, 3)))


def render_face(model: FaceModel, coeffs: ShapeCoeffs, pose: Pose, light: ShLighting,
                width: int, height: int) -> RasterOutput:
    """Synthesize, pose, rasterize and shade the coarse face.

    The returned RasterOutput carries a `state` attribute for `render_backward`.
    """
    vertices, albedo = synthesize(model, coeffs)
    normals_model = vertex_normals(vertices, model.triangles)
    view = camera.transform(pose, vertices)
    normals_view = normals_model @ pose.rotation.T
    frag, mstate = render_mesh(view, normals_view, albedo, model.triangles, light, width, height)
    frag.state = RenderState(model=model, coeffs=coeffs.copy(), pose=Pose(**vars(pose)), lighting=light,
                             vertices=vertices, normals_model=normals_model, mesh=mstate)
    return frag


def render_backward(state: RenderState, g_image: np.ndarray) -> SceneGrad:
    g_view, g_nview, g_albedo, g_sh = render_mesh_vjp(state.mesh, g_image)
    pose = state.pose
    g_pose, g_vertices = camera.transform_vjp(pose, state.vertices, g_view)
    # normals_view = n_model @ R^T
    g_R = g_nview.T @ state.normals_model
    g_pose[1:4] += camera.rotation_matrix_vjp(pose.rx, pose.ry, pose.rz, g_R)
    g_nmodel = g_nview @ pose.rotation
    g_vertices += vertex_normals_vjp(state.vertices, state.model.triangles, g_nmodel)
    gc = synthesize_vjp(state.model, state.coeffs, g_vertices, g_albedo)
    return SceneGrad(gc.x_id, gc.x_exp, gc.x_tex, g_pose, g_sh)
