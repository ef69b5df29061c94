"""Linear face model: container, synthesis, vertex normals, toy generator, FMM1 codec."""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"FACEMDL1"
N_LANDMARKS = 68
NOSE_TIP = 30


class ModelFormatError(ValueError):
    pass


class MalformedHeaderError(ModelFormatError):
    pass


class TruncatedPayloadError(ModelFormatError):
    pass


class ChecksumError(ModelFormatError):
    pass


@dataclass(frozen=True, eq=False)
class FaceModel:
    """Mean shape/albedo plus linear bases.

    Shapes and albedos are flattened per vertex as (x0, y0, z0, x1, ...), so a
    basis has 3V rows. Model space is nominally millimetres.
    """

    mean_shape: np.ndarray
    basis_id: np.ndarray
    basis_exp: np.ndarray
    mean_albedo: np.ndarray
    basis_tex: np.ndarray
    triangles: np.ndarray
    uv_coords: np.ndarray
    landmark_indices: np.ndarray

    def __post_init__(self):
        for name in ("mean_shape", "basis_id", "basis_exp", "mean_albedo", "basis_tex", "uv_coords"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        for name in ("triangles", "landmark_indices"):
            arr = np.asarray(getattr(self, name), dtype=np.int64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        self.validate()

    @property
    def n_vertices(self) -> int:
        return self.mean_shape.shape[0] // 3

    @property
    def n_id(self) -> int:
        return self.basis_id.shape[1]

    @property
    def n_exp(self) -> int:
        return self.basis_exp.shape[1]

    @property
    def n_tex(self) -> int:
        return self.basis_tex.shape[1]

    def validate(self) -> None:
        n3 = self.mean_shape.shape[0]
        if self.mean_shape.ndim != 1 or n3 % 3 or n3 == 0:
            raise ValueError(f"mean_shape must be a flat array of length 3V, got {self.mean_shape.shape}")
        V = n3 // 3
        for name in ("basis_id", "basis_exp", "basis_tex"):
            b = getattr(self, name)
            if b.ndim != 2 or b.shape[0] != n3:
                raise ValueError(f"{name} must have shape (3V={n3}, K), got {b.shape}")
            if b.shape[1] < 1:
                raise ValueError(f"{name} needs at least one column")
        if self.mean_albedo.shape != (n3,):
            raise ValueError(f"mean_albedo must have length {n3}, got {self.mean_albedo.shape}")
        if self.uv_coords.shape != (V, 2):
            raise ValueError(f"uv_coords must have shape ({V}, 2), got {self.uv_coords.shape}")
        if np.any(self.uv_coords < 0) or np.any(self.uv_coords > 1):
            raise ValueError("uv_coords must lie in [0, 1]^2")
        tri = self.triangles
        if tri.ndim != 2 or tri.shape[1] != 3:
            raise ValueError(f"triangles must have shape (T, 3), got {tri.shape}")
        if tri.size and (tri.min() < 0 or tri.max() >= V):
            raise ValueError("triangle index out of range")
        if np.any((tri[:, 0] == tri[:, 1]) | (tri[:, 1] == tri[:, 2]) | (tri[:, 0] == tri[:, 2])):
            raise ValueError("degenerate triangle (repeated vertex index)")
        lm = self.landmark_indices
        if lm.ndim != 1 or lm.size == 0:
            raise ValueError("landmark_indices must be a non-empty 1-D array")
        if lm.min() < 0 or lm.max() >= V:
            raise ValueError("landmark index out of range")
        if np.unique(lm).size != lm.size:
            raise ValueError("landmark indices must be distinct")


@dataclass
class ShapeCoeffs:
    x_id: np.ndarray
    x_exp: np.ndarray
    x_tex: np.ndarray

    def __post_init__(self):
        self.x_id = np.asarray(self.x_id, dtype=np.float64).reshape(-1)
        self.x_exp = np.asarray(self.x_exp, dtype=np.float64).reshape(-1)
        self.x_tex = np.asarray(self.x_tex, dtype=np.float64).reshape(-1)

    @classmethod
    def zeros(cls, model: FaceModel) -> "ShapeCoeffs":
        return cls(np.zeros(model.n_id), np.zeros(model.n_exp), np.zeros(model.n_tex))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.x_id, self.x_exp, self.x_tex])

    def copy(self) -> "ShapeCoeffs":
        return ShapeCoeffs(self.x_id.copy(), self.x_exp.copy(), self.x_tex.copy())


def _check_lengths(model: FaceModel, c: ShapeCoeffs) -> None:
    for name, vec, k in (("basis_id", c.x_id, model.n_id), ("basis_exp", c.x_exp, model.n_exp),
                         ("basis_tex", c.x_tex, model.n_tex)):
        if vec.shape[0] != k:
            raise ValueError(f"coefficient length {vec.shape[0]} does not match {name} with {k} columns")


def synthesize(model: FaceModel, c: ShapeCoeffs) -> tuple[np.ndarray, np.ndarray]:
    """Return (vertices V×3, albedo V×3) for the given coefficients."""
    _check_lengths(model, c)
    shape = model.mean_shape + model.basis_id @ c.x_id + model.basis_exp @ c.x_exp
    albedo = np.clip(model.mean_albedo + model.basis_tex @ c.x_tex, 0.0, 1.0)
    return shape.reshape(-1, 3), albedo.reshape(-1, 3)


def synthesize_vjp(model: FaceModel, c: ShapeCoeffs, g_vertices: np.ndarray | None,
                   g_albedo: np.ndarray | None) -> ShapeCoeffs:
    """Pull vertex/albedo cotangents back to coefficient cotangents."""
    _check_lengths(model, c)
    g_id = np.zeros(model.n_id)
    g_exp = np.zeros(model.n_exp)
    g_tex = np.zeros(model.n_tex)
    if g_vertices is not None:
        gv = np.asarray(g_vertices, dtype=np.float64).reshape(-1)
        g_id = model.basis_id.T @ gv
        g_exp = model.basis_exp.T @ gv
    if g_albedo is not None:
        raw = model.mean_albedo + model.basis_tex @ c.x_tex
        ga = np.asarray(g_albedo, dtype=np.float64).reshape(-1) * ((raw > 0.0) & (raw < 1.0))
        g_tex = model.basis_tex.T @ ga
    return ShapeCoeffs(g_id, g_exp, g_tex)


def _face_cross(vertices: np.ndarray, triangles: np.ndarray):
    v0 = vertices[triangles[:, 0]]
    e1 = vertices[triangles[:, 1]] - v0
    e2 = vertices[triangles[:, 2]] - v0
    return e1, e2, np.cross(e1, e2)


def _scatter3(index: np.ndarray, values: np.ndarray, n: int) -> np.ndarray:
    out = np.empty((n, 3))
    for k in range(3):
        out[:, k] = np.bincount(index, weights=values[:, k], minlength=n)
    return out


def _accumulate_normals(vertices, triangles):
    _, _, c = _face_cross(vertices, triangles)
    n = vertices.shape[0]
    idx = triangles.reshape(-1)
    acc = _scatter3(idx, np.repeat(c, 3, axis=0), n)
    return acc


def vertex_normals(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Area-weighted vertex normals following the triangle winding.

    Vertices without incident area get (0, 0, 1).
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    triangles = np.asarray(triangles, dtype=np.int64)
    acc = _accumulate_normals(vertices, triangles)
    norm = np.linalg.norm(acc, axis=1)
    out = np.tile([0.0, 0.0, 1.0], (vertices.shape[0], 1))
    ok = norm > 0
    out[ok] = acc[ok] / norm[ok, None]
    return out


def vertex_normals_vjp(vertices: np.ndarray, triangles: np.ndarray, g_normals: np.ndarray) -> np.ndarray:
    vertices = np.asarray(vertices, dtype=np.float64)
    triangles = np.asarray(triangles, dtype=np.int64)
    acc = _accumulate_normals(vertices, triangles)
    norm = np.linalg.norm(acc, axis=1)
    ok = norm > 0
    g_acc = np.zeros_like(acc)
    n = acc[ok] / norm[ok, None]
    g = g_normals[ok]
    g_acc[ok] = (g - n * np.sum(n * g, axis=1, keepdims=True)) / norm[ok, None]

    e1, e2, _ = _face_cross(vertices, triangles)
    g_c = g_acc[triangles[:, 0]] + g_acc[triangles[:, 1]] + g_acc[triangles[:, 2]]
    g_e1 = np.cross(e2, g_c)
    g_e2 = np.cross(g_c, e1)
    nv = vertices.shape[0]
    idx = np.concatenate([triangles[:, 1], triangles[:, 2], triangles[:, 0]])
    vals = np.concatenate([g_e1, g_e2, -(g_e1 + g_e2)])
    return _scatter3(idx, vals, nv)


def grid_triangles(rows: int, cols: int) -> np.ndarray:
    """Two triangles per grid cell, counter-clockwise in (column, row) order."""
    i, j = np.meshgrid(np.arange(rows - 1), np.arange(cols - 1), indexing="ij")
    a = (i * cols + j).reshape(-1)
    b = a + 1
    c = a + cols + 1
    d = a + cols
    return np.stack([np.stack([a, b, c], 1), np.stack([a, c, d], 1)], 1).reshape(-1, 3)


def _landmark_pattern() -> np.ndarray:
    """68 (u, v) sites in the usual jaw/brow/nose/eye/mouth ordering; v grows upward."""
    pts = []
    theta = np.linspace(np.pi, 2 * np.pi, 17)
    pts += list(zip(0.5 + 0.36 * np.cos(theta), 0.56 + 0.42 * np.sin(theta)))
    for u0 in (0.22, 0.56):
        us = np.linspace(u0, u0 + 0.22, 5)
        pts += [(u, 0.74 + 0.03 * np.sin(np.pi * (u - u0) / 0.22)) for u in us]
    pts += [(0.5, v) for v in np.linspace(0.67, 0.45, 4)]
    pts += [(u, 0.38 - 0.02 * np.cos(np.pi * (u - 0.42) / 0.16)) for u in np.linspace(0.42, 0.58, 5)]
    ang = np.linspace(np.pi, -np.pi, 6, endpoint=False)
    for cu in (0.34, 0.66):
        pts += list(zip(cu + 0.07 * np.cos(ang), 0.62 + 0.03 * np.sin(ang)))
    ang = np.linspace(np.pi, -np.pi, 12, endpoint=False)
    pts += list(zip(0.5 + 0.14 * np.cos(ang), 0.27 + 0.06 * np.sin(ang)))
    ang = np.linspace(np.pi, -np.pi, 8, endpoint=False)
    pts += list(zip(0.5 + 0.08 * np.cos(ang), 0.27 + 0.025 * np.sin(ang)))
    return np.asarray(pts)


def _snap_landmarks(uv: np.ndarray, sites: np.ndarray) -> np.ndarray:
    taken = set()
    # the nose tip is snapped first so it always lands on its nearest vertex
    order = [NOSE_TIP] + [k for k in range(len(sites)) if k != NOSE_TIP]
    chosen = {}
    for k in order:
        d = np.sum((uv - sites[k]) ** 2, axis=1)
        for idx in np.argsort(d, kind="stable"):
            if int(idx) not in taken:
                taken.add(int(idx))
                chosen[k] = int(idx)
                break
    out = [chosen[k] for k in range(len(sites))]
    return np.asarray(out, dtype=np.int64)


def _smooth_fields(rng: np.random.Generator, u: np.ndarray, v: np.ndarray, n: int, ncomp: int) -> np.ndarray:
    """n random low-frequency fields over (u, v), each with ncomp components: (n, V, ncomp)."""
    freqs = [(p, q) for p in range(3) for q in range(3) if p + q > 0]
    funcs = np.stack([np.cos(np.pi * p * u) * np.cos(np.pi * q * v) for p, q in freqs], axis=1)
    weights = rng.standard_normal((n, len(freqs), ncomp))
    weights /= 1.0 + np.array([p + q for p, q in freqs], dtype=float)[None, :, None]
    return np.einsum("vf,nfc->nvc", funcs, weights)


def _scaled_basis(fields: np.ndarray, max_norm: float) -> np.ndarray:
    cols = []
    for f in fields:
        peak = np.max(np.linalg.norm(f, axis=1))
        cols.append((f * (max_norm / peak)).reshape(-1))
    return np.stack(cols, axis=1)


def model_diameter(model: FaceModel) -> float:
    pts = model.mean_shape.reshape(-1, 3)
    return float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))


def generate_toy_model(seed: int, V_u: int = 32, K_id: int = 10, K_exp: int = 5, K_tex: int = 10) -> FaceModel:
    """Synthetic face-like model: a half-ellipsoid height field over a UV grid.

    The surface bulges toward -z (toward the camera, which looks down +z) and
    spans roughly 200 mm. Bases are smooth random fields; a unit coefficient
    moves no vertex by more than 5% of the diameter.
    """
    if V_u < 9:
        # 68 distinct landmark vertices need at least 9x9 grid vertices
        raise ValueError(f"V_u must be >= 9, got {V_u}")
    if min(K_id, K_exp, K_tex) < 1:
        raise ValueError("basis sizes must be >= 1")
    rng = np.random.default_rng(seed)
    g = np.linspace(0.0, 1.0, V_u)
    vv, uu = np.meshgrid(g, g, indexing="ij")
    u = uu.reshape(-1)
    v = vv.reshape(-1)
    uv = np.stack([u, v], axis=1)
    landmarks = _snap_landmarks(uv, _landmark_pattern())
    nose_u, nose_v = uv[landmarks[NOSE_TIP]]

    hx, hy, depth = 65.0, 80.0, 60.0
    x = (u - 0.5) * 2 * hx
    y = (v - 0.5) * 2 * hy
    z = -depth * np.sqrt(1.0 - (x / (1.5 * hx)) ** 2 - (y / (1.5 * hy)) ** 2)
    nose = np.exp(-((u - nose_u) ** 2 / (2 * 0.06 ** 2) + (v - nose_v) ** 2 / (2 * 0.1 ** 2)))
    z = z - 18.0 * nose
    z = z - z.mean()  # rotate about the surface centroid, as real models do
    mean_shape = np.stack([x, y, z], axis=1)
    diameter = float(np.linalg.norm(mean_shape.max(axis=0) - mean_shape.min(axis=0)))

    basis_id = _scaled_basis(_smooth_fields(rng, u, v, K_id, 3), 0.05 * diameter)
    basis_exp = _scaled_basis(_smooth_fields(rng, u, v, K_exp, 3), 0.05 * diameter)

    skin = np.array([0.72, 0.53, 0.45])
    tint = _smooth_fields(rng, u, v, 1, 3)[0]
    tint *= 0.06 / np.max(np.abs(tint))
    albedo = skin[None, :] + tint
    # darker eyes, brows and lips give the photometric term some structure
    sites = uv[landmarks]
    for group, depth_, sigma in ((range(17, 27), 0.25, 0.02), (range(36, 48), 0.35, 0.02),
                                 (range(48, 68), 0.2, 0.025)):
        for k in group:
            d2 = np.sum((uv - sites[k]) ** 2, axis=1)
            albedo = albedo * (1.0 - depth_ * np.exp(-d2 / (2 * sigma ** 2)))[:, None]
    albedo = np.clip(albedo, 0.05, 0.95)
    basis_tex = _scaled_basis(_smooth_fields(rng, u, v, K_tex, 3), 0.05)

    def f32(a):
        return np.asarray(a, dtype=np.float32).astype(np.float64)

    return FaceModel(
        mean_shape=f32(mean_shape.reshape(-1)),
        basis_id=f32(basis_id),
        basis_exp=f32(basis_exp),
        mean_albedo=f32(albedo.reshape(-1)),
        basis_tex=f32(basis_tex),
        triangles=grid_triangles(V_u, V_u),
        uv_coords=f32(uv),
        landmark_indices=landmarks,
    )


# --- FMM1 container -------------------------------------------------------

def encode_model(model: FaceModel) -> bytes:
    V = model.n_vertices
    header = json.dumps({
        "V": V, "T": int(model.triangles.shape[0]),
        "K_id": model.n_id, "K_exp": model.n_exp, "K_tex": model.n_tex,
        "landmark_count": int(model.landmark_indices.size),
    }, sort_keys=True).encode("utf-8")
    parts = [struct.pack("<I", len(header)), header]
    for arr in (model.mean_shape, model.basis_id.reshape(-1, order="F"), model.basis_exp.reshape(-1, order="F"),
                model.mean_albedo, model.basis_tex.reshape(-1, order="F"), model.uv_coords.reshape(-1)):
        parts.append(np.asarray(arr, dtype="<f4").tobytes())
    parts.append(np.asarray(model.triangles, dtype="<u4").tobytes())
    parts.append(np.asarray(model.landmark_indices, dtype="<u4").tobytes())
    payload = b"".join(parts)
    return MAGIC + payload + struct.pack("<I", zlib.crc32(payload))


def decode_model(data: bytes) -> FaceModel:
    if len(data) < len(MAGIC) + 4 or data[: len(MAGIC)] != MAGIC:
        raise MalformedHeaderError("malformed header: bad magic bytes")
    pos = len(MAGIC)
    (hlen,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if pos + hlen > len(data):
        raise TruncatedPayloadError("truncated payload: header runs past end of file")
    try:
        header = json.loads(data[pos: pos + hlen].decode("utf-8"))
        V, T = int(header["V"]), int(header["T"])
        kid, kexp, ktex = int(header["K_id"]), int(header["K_exp"]), int(header["K_tex"])
        nlm = int(header["landmark_count"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise MalformedHeaderError(f"malformed header: {exc}") from exc
    pos += hlen
    n3 = 3 * V
    counts = [n3, n3 * kid, n3 * kexp, n3, n3 * ktex, 2 * V]
    need = 4 * (sum(counts) + 3 * T + nlm)
    if len(data) < pos + need + 4:
        raise TruncatedPayloadError(
            f"truncated payload: need {pos + need + 4} bytes, file has {len(data)}")
    if len(data) > pos + need + 4:
        raise MalformedHeaderError("malformed header: trailing bytes after checksum")
    payload = data[len(MAGIC): pos + need]
    (crc,) = struct.unpack_from("<I", data, pos + need)
    if zlib.crc32(payload) != crc:
        raise ChecksumError("checksum mismatch")
    arrays = []
    for n in counts:
        arrays.append(np.frombuffer(data, dtype="<f4", count=n, offset=pos).astype(np.float64))
        pos += 4 * n
    tri = np.frombuffer(data, dtype="<u4", count=3 * T, offset=pos).astype(np.int64).reshape(T, 3)
    pos += 12 * T
    lm = np.frombuffer(data, dtype="<u4", count=nlm, offset=pos).astype(np.int64)
    mean_shape, bid, bexp, alb, btex, uv = arrays
    return FaceModel(
        mean_shape=mean_shape,
        basis_id=bid.reshape(n3, kid, order="F"),
        basis_exp=bexp.reshape(n3, kexp, order="F"),
        mean_albedo=alb,
        basis_tex=btex.reshape(n3, ktex, order="F"),
        triangles=tri,
        uv_coords=uv.reshape(V, 2),
        landmark_indices=lm,
    )


def save_model(path, model: FaceModel) -> None:
    Path(path).write_bytes(encode_model(model))


def load_model(path) -> FaceModel:
    return decode_model(Path(path).read_bytes())
