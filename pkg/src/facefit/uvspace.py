"""UV-space maps: unwrapping, position/normal maps, displacement, UV rendering, blending.

Texel (i, j) of a W x H map sits at u = (j + 0.5) / W, v = (i + 0.5) / H, so
rows grow with v. Normals are dP/du x dP/dv, which matches the winding of
the face model and of `uv_to_mesh`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import camera
from ._kernels import scan_convert
from .camera import Pose
from .facemodel import FaceModel, vertex_normals
from .lighting import ShLighting
from .raster import rasterize, render_mesh, render_mesh_vjp

SPACES = ("model", "view", "scalar", "color")
DEFAULT_RES = 256


@dataclass
class UvMap:
    data: np.ndarray  # H x W x C
    mask: np.ndarray  # H x W bool
    space: str

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim == 2:
            self.data = self.data[:, :, None]
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.data.ndim != 3 or self.data.shape[2] not in (1, 3):
            raise ValueError(f"UV map data must be H x W x 1 or H x W x 3, got {self.data.shape}")
        if self.mask.shape != self.data.shape[:2]:
            raise ValueError("UV map mask shape does not match data")
        if self.space not in SPACES:
            raise ValueError(f"unknown UV map space {self.space!r}")
        if (self.space == "scalar") != (self.channels == 1):
            raise ValueError(f"space {self.space!r} is inconsistent with {self.channels} channels")
        if not np.all(np.isfinite(self.data[self.mask])):
            raise ValueError("UV map data must be finite on valid texels")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def scalar(self) -> np.ndarray:
        return self.data[:, :, 0]


def rasterize_to_uv(model: FaceModel, vertices: np.ndarray, per_vertex_attr: np.ndarray, res: int = DEFAULT_RES,
                    space: str | None = None) -> UvMap:
    """Rasterize the mesh in its UV chart and interpolate per-vertex attributes."""
    res = int(res)
    if res <= 0:
        raise ValueError("UV resolution must be positive")
    attr = np.asarray(per_vertex_attr, dtype=np.float64)
    if attr.ndim == 1:
        attr = attr[:, None]
    if space is None:
        space = "scalar" if attr.shape[1] == 1 else "model"
    tri = model.triangles
    xs = model.uv_coords[:, 0] * res
    ys = model.uv_coords[:, 1] * res
    tri_id, bary, _ = scan_convert(xs, ys, np.zeros(len(xs)), tri, np.ones(len(tri), bool), res, res)
    mask = tri_id >= 0
    data = np.zeros((res, res, attr.shape[1]))
    data[mask] = np.einsum("pk,pka->pa", bary[mask], attr[tri[tri_id[mask]]])
    return UvMap(data, mask, space)


def sample_uv(uvmap: UvMap, uv: np.ndarray) -> np.ndarray:
    """Bilinear lookup at (u, v) locations (valid texels only are expected around them)."""
    uv = np.asarray(uv, dtype=np.float64)
    x = np.clip(uv[:, 0] * uvmap.width - 0.5, 0, uvmap.width - 1)
    y = np.clip(uv[:, 1] * uvmap.height - 0.5, 0, uvmap.height - 1)
    return _bilinear(uvmap.data, x, y)


def _bilinear(img: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    H, W = img.shape[:2]
    x0 = np.clip(np.floor(x).astype(np.int64), 0, max(W - 2, 0))
    y0 = np.clip(np.floor(y).astype(np.int64), 0, max(H - 2, 0))
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    return ((1 - fx) * (1 - fy) * img[y0, x0] + fx * (1 - fy) * img[y0, x1]
            + (1 - fx) * fy * img[y1, x0] + fx * fy * img[y1, x1])


def to_view(pos: UvMap, pose: Pose) -> UvMap:
    if pos.space != "model":
        raise ValueError(f"expected a model-space position map, got {pos.space!r}")
    data = np.zeros_like(pos.data)
    data[pos.mask] = camera.transform(pose, pos.data[pos.mask])
    return UvMap(data, pos.mask.copy(), "view")


def to_model(pos: UvMap, pose: Pose) -> UvMap:
    if pos.space != "view":
        raise ValueError(f"expected a view-space position map, got {pos.space!r}")
    data = np.zeros_like(pos.data)
    data[pos.mask] = camera.view_to_model(pose, pos.data[pos.mask])
    return UvMap(data, pos.mask.copy(), "model")


def apply_displacement(coarse_pos: UvMap, disp: UvMap, mode: str = "view_z",
                       coarse_normals: UvMap | None = None) -> UvMap:
    """Detail positions: coarse + d * (0, 0, 1), or coarse + d * n for mode 'normal'."""
    if coarse_pos.space != "view":
        raise ValueError("displacement is applied to view-space position maps")
    if disp.space != "scalar":
        raise ValueError("displacement map must be scalar")
    if disp.data.shape[:2] != coarse_pos.data.shape[:2]:
        raise ValueError(f"resolution mismatch: {disp.data.shape[:2]} vs {coarse_pos.data.shape[:2]}")
    mask = coarse_pos.mask & disp.mask
    d = np.where(mask, disp.scalar, 0.0)
    data = coarse_pos.data.copy()
    if mode == "view_z":
        data[:, :, 2] += d
    elif mode == "normal":
        if coarse_normals is None:
            coarse_normals = uv_normals(coarse_pos)
        mask &= coarse_normals.mask
        d = np.where(mask, d, 0.0)
        data += d[:, :, None] * coarse_normals.data
    else:
        raise ValueError(f"unknown displacement mode {mode!r}")
    data[~mask] = 0.0
    return UvMap(data, mask, "view")


# --- normals from a position map ------------------------------------------

def _stencil(mask: np.ndarray, axis: int):
    """Per-texel difference stencil along one axis: (plus index, minus index, scale, ok)."""
    H, W = mask.shape
    idx = np.arange(H * W).reshape(H, W)
    shift = (0, 1) if axis == 1 else (1, 0)
    prev_ok = np.zeros_like(mask)
    next_ok = np.zeros_like(mask)
    if axis == 1:
        prev_ok[:, 1:] = mask[:, :-1]
        next_ok[:, :-1] = mask[:, 1:]
    else:
        prev_ok[1:, :] = mask[:-1, :]
        next_ok[:-1, :] = mask[1:, :]
    step = shift[0] * W + shift[1]
    central = prev_ok & next_ok
    plus = np.where(next_ok, idx + step, idx)
    minus = np.where(prev_ok, idx - step, idx)
    scale = np.where(central, 0.5, 1.0)
    ok = mask & (prev_ok | next_ok)
    return plus, minus, scale, ok


def _normal_terms(pos: UvMap, mask: np.ndarray | None):
    m = pos.mask if mask is None else (pos.mask & np.asarray(mask, bool))
    P = pos.data.reshape(-1, 3)
    pu, mu, su, oku = _stencil(m, 1)
    pv, mv, sv, okv = _stencil(m, 0)
    du = su.reshape(-1, 1) * (P[pu.reshape(-1)] - P[mu.reshape(-1)])
    dv = sv.reshape(-1, 1) * (P[pv.reshape(-1)] - P[mv.reshape(-1)])
    raw = np.cross(du, dv)
    norm = np.linalg.norm(raw, axis=1)
    ok = (oku & okv).reshape(-1) & (norm > 0)
    return dict(m=m, pu=pu.reshape(-1), mu=mu.reshape(-1), su=su.reshape(-1), pv=pv.reshape(-1),
                mv=mv.reshape(-1), sv=sv.reshape(-1), du=du, dv=dv, raw=raw, norm=norm, ok=ok)


def uv_normals(pos: UvMap, mask: np.ndarray | None = None) -> UvMap:
    """Unit normals of a position map via central differences, one-sided at mask borders.

    A texel with no valid neighbour along either axis is invalidated.
    """
    t = _normal_terms(pos, mask)
    ok = t["ok"]
    n = np.zeros_like(t["raw"])
    n[ok] = t["raw"][ok] / t["norm"][ok, None]
    H, W = pos.mask.shape
    return UvMap(n.reshape(H, W, 3), ok.reshape(H, W), pos.space if pos.space in ("model", "view") else "view")


def uv_normals_vjp(pos: UvMap, g_normals: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Cotangent of the position map (H x W x 3) given normal-map cotangents."""
    t = _normal_terms(pos, mask)
    ok = t["ok"]
    H, W = pos.mask.shape
    g = np.asarray(g_normals, dtype=np.float64).reshape(-1, 3)
    raw, norm = t["raw"], t["norm"]
    g_raw = np.zeros_like(raw)
    n = raw[ok] / norm[ok, None]
    go = g[ok]
    g_raw[ok] = (go - n * np.sum(n * go, axis=1, keepdims=True)) / norm[ok, None]
    g_du = np.cross(t["dv"], g_raw) * t["su"][:, None]
    g_dv = np.cross(g_raw, t["du"]) * t["sv"][:, None]
    N = H * W
    idx = np.concatenate([t["pu"], t["mu"], t["pv"], t["mv"]])
    vals = np.concatenate([g_du, -g_du, g_dv, -g_dv])
    out = np.empty((N, 3))
    for k in range(3):
        out[:, k] = np.bincount(idx, weights=vals[:, k], minlength=N)
    return out.reshape(H, W, 3)


# --- mesh from a position map ----------------------------------------------

@dataclass
class UvMesh:
    vertices: np.ndarray  # N x 3
    triangles: np.ndarray  # T x 3
    texel_index: np.ndarray  # N flat texel indices


def uv_to_mesh(pos: UvMap, mask: np.ndarray | None = None) -> UvMesh:
    """Two triangles per 2x2 block of valid texels; vertices are the valid texels."""
    m = pos.mask if mask is None else (pos.mask & np.asarray(mask, bool))
    H, W = m.shape
    flat = np.flatnonzero(m.reshape(-1))
    remap = np.full(H * W, -1, dtype=np.int64)
    remap[flat] = np.arange(flat.size)
    quad = m[:-1, :-1] & m[:-1, 1:] & m[1:, :-1] & m[1:, 1:]
    ii, jj = np.nonzero(quad)
    a = ii * W + jj
    b = a + 1
    c = a + W + 1
    d = a + W
    tris = np.stack([np.stack([a, b, c], 1), np.stack([a, c, d], 1)], 1).reshape(-1, 3)
    tris = remap[tris] if tris.size else np.zeros((0, 3), dtype=np.int64)
    return UvMesh(pos.data.reshape(-1, 3)[flat].copy(), tris, flat)


# --- UV render layer ---------------------------------------------------------

@dataclass
class UvRenderState:
    detail_pos: UvMap
    normals: UvMap
    mesh: UvMesh
    render: object  # MeshRenderState


def render_from_uv(detail_pos: UvMap, albedo_uv: UvMap, light: ShLighting, width: int, height: int):
    """Render the mesh spanned by a view-space position map.

    Returns the RasterOutput with a `state` attribute for `render_from_uv_vjp`.
    """
    if detail_pos.space != "view":
        raise ValueError("render_from_uv expects a view-space position map")
    if albedo_uv.data.shape[:2] != detail_pos.data.shape[:2]:
        raise ValueError("albedo and position maps differ in resolution")
    normals = uv_normals(detail_pos)
    m = normals.mask & albedo_uv.mask
    mesh = uv_to_mesh(detail_pos, m)
    nv = normals.data.reshape(-1, 3)[mesh.texel_index]
    alb = albedo_uv.data.reshape(-1, albedo_uv.channels)[mesh.texel_index]
    if alb.shape[1] == 1:
        alb = np.repeat(alb, 3, axis=1)
    frag, rstate = render_mesh(mesh.vertices, nv, alb, mesh.triangles, light, width, height)
    frag.state = UvRenderState(detail_pos=detail_pos, normals=normals, mesh=mesh, render=rstate)
    return frag


def render_from_uv_vjp(state: UvRenderState, g_image: np.ndarray):
    """Cotangents (position map H x W x 3, albedo map H x W x 3, SH 9 x 3)."""
    g_view, g_n, g_alb, g_sh = render_mesh_vjp(state.render, g_image)
    H, W = state.detail_pos.mask.shape
    idx = state.mesh.texel_index
    g_nmap = np.zeros((H * W, 3))
    g_nmap[idx] = g_n
    g_pos = uv_normals_vjp(state.detail_pos, g_nmap.reshape(H, W, 3))
    g_pos.reshape(-1, 3)[idx] += g_view
    g_albmap = np.zeros((H * W, 3))
    g_albmap[idx] = g_alb
    return g_pos, g_albmap.reshape(H, W, 3), g_sh


# --- unwrapping and blending -------------------------------------------------

def unwrap_image(image: np.ndarray, model: FaceModel, vertices: np.ndarray, pose: Pose,
                 res: int = DEFAULT_RES) -> tuple[UvMap, np.ndarray]:
    """Pull image colours into UV space; returns (colour map, visibility mask).

    A texel is visible when its surface faces the camera, it is not behind
    the depth buffer (one texel of slack), and all four bilinear taps land on
    covered pixels inside the image.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"image must be H x W x 3, got {image.shape}")
    vertices = np.asarray(vertices, dtype=np.float64)
    if vertices.shape != (model.n_vertices, 3):
        raise ValueError(f"vertices must have shape ({model.n_vertices}, 3), got {vertices.shape}")
    H, W = image.shape[:2]
    pos = rasterize_to_uv(model, vertices, vertices, res)
    nrm = rasterize_to_uv(model, vertices, vertex_normals(vertices, model.triangles), res)
    view = to_view(pos, pose)

    proj = camera.transform(pose, vertices)
    frag, _ = rasterize(proj[:, :2], proj[:, 2], None, model.triangles, W, H, cull_backfaces=True)

    m = pos.mask
    p = view.data[m]
    n_view = nrm.data[m] @ pose.rotation.T
    front = n_view[:, 2] > 0.0
    col = p[:, 0] + 0.5 * W - 0.5
    row = 0.5 * H - p[:, 1] - 0.5
    inside = (col >= 0) & (col <= W - 1) & (row >= 0) & (row <= H - 1)
    colc = np.clip(col, 0, W - 1)
    rowc = np.clip(row, 0, H - 1)
    c0 = np.clip(np.floor(colc).astype(np.int64), 0, max(W - 2, 0))
    r0 = np.clip(np.floor(rowc).astype(np.int64), 0, max(H - 2, 0))
    taps_ok = (frag.mask[r0, c0] & frag.mask[r0, c0 + 1] & frag.mask[r0 + 1, c0] & frag.mask[r0 + 1, c0 + 1])
    near_r = np.clip(np.rint(rowc).astype(np.int64), 0, H - 1)
    near_c = np.clip(np.rint(colc).astype(np.int64), 0, W - 1)
    tol = _texel_length(view)
    unoccluded = p[:, 2] <= frag.depth[near_r, near_c] + tol
    vis = front & inside & taps_ok & unoccluded

    colors = np.zeros((int(m.sum()), 3))
    colors[vis] = _bilinear(image, colc[vis], rowc[vis])
    data = np.zeros((res, res, 3))
    visible = np.zeros_like(m)
    visible[m] = vis
    data[visible] = colors[vis]
    return UvMap(data, visible, "color"), visible


def _texel_length(pos: UvMap) -> float:
    """Median spacing between horizontally adjacent valid texels."""
    m = pos.mask[:, :-1] & pos.mask[:, 1:]
    if not np.any(m):
        return 0.0
    d = np.linalg.norm(pos.data[:, 1:][m] - pos.data[:, :-1][m], axis=1)
    return float(np.median(d))


def blend_uv_maps(a: UvMap, b: UvMap, weights_a: np.ndarray | None = None,
                  weights_b: np.ndarray | None = None, allow_view: bool = False) -> UvMap:
    """Union of two partial maps; overlapping texels are (weighted) averages."""
    if a.data.shape != b.data.shape:
        raise ValueError(f"cannot blend maps of shape {a.data.shape} and {b.data.shape}")
    if a.space != b.space:
        raise ValueError(f"cannot blend {a.space!r} map with {b.space!r} map")
    if a.space == "view" and not allow_view:
        raise ValueError("view-space maps depend on their pose; convert to model space before blending")
    wa = np.ones(a.mask.shape) if weights_a is None else np.asarray(weights_a, dtype=np.float64)
    wb = np.ones(b.mask.shape) if weights_b is None else np.asarray(weights_b, dtype=np.float64)
    wa = np.where(a.mask, wa, 0.0)
    wb = np.where(b.mask, wb, 0.0)
    both = a.mask & b.mask
    data = np.zeros_like(a.data)
    only_a = a.mask & ~b.mask
    only_b = b.mask & ~a.mask
    data[only_a] = a.data[only_a]
    data[only_b] = b.data[only_b]
    tot = wa + wb
    avg = both & (tot > 0)
    data[avg] = (wa[avg, None] * a.data[avg] + wb[avg, None] * b.data[avg]) / tot[avg, None]
    eq = both & (tot <= 0)
    data[eq] = 0.5 * (a.data[eq] + b.data[eq])
    return UvMap(data, a.mask | b.mask, a.space)


def coverage_fraction(m: np.ndarray, reference: np.ndarray) -> float:
    ref = np.asarray(reference, bool)
    return float(np.sum(np.asarray(m, bool) & ref) / max(np.sum(ref), 1))
