"""Surface alignment and error metrics used for evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

NOSE_CROP_MM = 95.0


class DegenerateInputError(ValueError):
    pass


class UndefinedMetricError(ValueError):
    pass


@dataclass
class SimilarityTransform:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray
    residuals: list[float] = field(default_factory=list, compare=False)  # RMS residual per ICP iteration

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        if self.rotation.shape != (3, 3):
            raise ValueError("rotation must be 3x3")

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls(1.0, np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def compose(self, inner: "SimilarityTransform") -> "SimilarityTransform":
        """self after inner."""
        return SimilarityTransform(self.scale * inner.scale, self.rotation @ inner.rotation,
                                   self.scale * self.rotation @ inner.translation + self.translation)


def _check_points(p, name: str) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != 3:
        raise ValueError(f"{name} must be N x 3, got {p.shape}")
    if not np.all(np.isfinite(p)):
        raise ValueError(f"{name} contains non-finite values")
    return p


def _check_spread(p: np.ndarray, name: str) -> None:
    if len(p) < 4:
        raise DegenerateInputError(f"{name} needs at least 4 points, got {len(p)}")
    s = np.linalg.svd(p - p.mean(axis=0), compute_uv=False)
    if s[0] == 0 or s[2] <= 1e-9 * s[0]:
        raise DegenerateInputError(f"{name} is coplanar or collinear")


def umeyama(src: np.ndarray, dst: np.ndarray, with_scale: bool = True) -> SimilarityTransform:
    """Least-squares similarity mapping src onto dst for known correspondences."""
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d
    cov = xd.T @ xs / len(src)
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    var_s = np.mean(np.sum(xs * xs, axis=1))
    scale = float(np.sum(D * np.diag(S)) / var_s) if with_scale else 1.0
    return SimilarityTransform(scale, R, mu_d - scale * R @ mu_s)


def _principal_frame(p: np.ndarray) -> np.ndarray:
    _, _, Vt = np.linalg.svd(p - p.mean(axis=0), full_matrices=False)
    return Vt  # rows are principal axes


def _initial_guesses(src: np.ndarray, dst: np.ndarray) -> list[SimilarityTransform]:
    """Centroid and RMS-radius matching, with identity rotation and the four proper principal-axis alignments."""
    rs = np.sqrt(np.mean(np.sum((src - src.mean(axis=0)) ** 2, axis=1)))
    rd = np.sqrt(np.mean(np.sum((dst - dst.mean(axis=0)) ** 2, axis=1)))
    s = rd / rs
    rotations = [np.eye(3)]
    Fs = _principal_frame(src)
    Fd = _principal_frame(dst)
    for signs in ((1, 1, 1), (1, -1, -1), (-1, 1, -1), (-1, -1, 1)):
        R = Fd.T @ np.diag(signs) @ Fs
        if np.linalg.det(R) < 0:
            R = Fd.T @ np.diag(signs) @ np.diag((1, 1, -1)) @ Fs
        rotations.append(R)
    return [SimilarityTransform(s, R, dst.mean(axis=0) - s * R @ src.mean(axis=0)) for R in rotations]


def _icp_from(src, match, T, iters, tol):
    residuals: list[float] = []
    moved = T.apply(src)
    corr = match(moved)
    residuals.append(float(np.sqrt(np.mean(np.sum((moved - corr) ** 2, axis=1)))))
    for _ in range(iters):
        T_new = umeyama(src, corr)
        moved_new = T_new.apply(src)
        corr_new = match(moved_new)
        r = float(np.sqrt(np.mean(np.sum((moved_new - corr_new) ** 2, axis=1))))
        if r > residuals[-1]:
            break  # round-off only; keep the history monotone
        T, corr = T_new, corr_new
        residuals.append(r)
        if residuals[-2] - r < tol:
            break
    return SimilarityTransform(T.scale, T.rotation, T.translation, residuals)


def icp_align(source, target, target_triangles=None, iters: int = 100, tol: float = 1e-10,
              init: SimilarityTransform | None = None) -> SimilarityTransform:
    """Similarity ICP taking `source` onto `target`.

    Correspondences are nearest target vertices, or closest surface points when
    `target_triangles` is given. Without `init`, ICP is started from centroid and
    RMS-radius matching under a few rotation guesses (identity and principal
    axes) using vertex matching; the run with the lowest final residual wins and
    is refined against the surface when triangles are given. The returned
    transform carries the RMS residual history of the final run.
    """
    src = _check_points(source, "source")
    dst = _check_points(target, "target")
    _check_spread(src, "source")
    _check_spread(dst, "target")
    surface = None if target_triangles is None else _Surface(dst, target_triangles)
    tree = cKDTree(dst)

    def nearest_vertex(moved):
        return dst[tree.query(moved)[1]]

    def nearest_surface(moved):
        return surface.closest(moved)[0]

    if init is None:
        best = None
        for T in _initial_guesses(src, dst):
            run = _icp_from(src, nearest_vertex, T, iters, tol)
            if best is None or run.residuals[-1] < best.residuals[-1]:
                best = run
        if surface is None:
            return best
        init = best
    return _icp_from(src, nearest_vertex if surface is None else nearest_surface, init, iters, tol)


# --- cropping -----------------------------------------------------------------------

@dataclass
class CroppedMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    kept: np.ndarray  # indices of kept vertices in the input

    @property
    def empty(self) -> bool:
        return len(self.vertices) == 0


def crop_radius(vertices, triangles, center, radius: float = NOSE_CROP_MM) -> CroppedMesh:
    """Keep vertices strictly closer than `radius` to `center`; drop triangles touching removed ones."""
    v = _check_points(vertices, "vertices")
    tris = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    if radius < 0:
        raise ValueError("radius must be non-negative")
    keep = np.linalg.norm(v - np.asarray(center, dtype=np.float64), axis=1) < radius
    remap = np.full(len(v), -1, dtype=np.int64)
    kept = np.flatnonzero(keep)
    remap[kept] = np.arange(len(kept))
    t = remap[tris] if len(tris) else tris
    t = t[np.all(t >= 0, axis=1)] if len(t) else t
    return CroppedMesh(v[kept], t, kept)


# --- point errors ---------------------------------------------------------------------

def point_to_point_rmse(a, b) -> float:
    a = _check_points(a, "a")
    b = _check_points(b, "b")
    if a.shape != b.shape:
        raise ValueError(f"point counts differ: {len(a)} vs {len(b)}")
    if len(a) == 0:
        raise ValueError("empty point sets")
    return float(np.sqrt(np.mean(np.sum((a - b) ** 2, axis=1))))


def closest_point_on_triangles(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray):
    """Closest point on triangle (a, b, c) to p, row-wise.

    Returns (q, interior) where interior marks closest points strictly inside the face.
    """
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    q = np.empty_like(p)
    done = np.zeros(len(p), dtype=bool)

    def put(sel, val):
        sel = sel & ~done
        q[sel] = val[sel]
        done[sel] = True

    with np.errstate(divide="ignore", invalid="ignore"):
        put((d1 <= 0) & (d2 <= 0), a)
        put((d3 >= 0) & (d4 <= d3), b)
        put((d6 >= 0) & (d5 <= d6), c)
        t = d1 / (d1 - d3)
        put((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + t[:, None] * ab)
        t = d2 / (d2 - d6)
        put((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + t[:, None] * ac)
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        put((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), b + t[:, None] * (c - b))
        interior = ~done
        denom = va + vb + vc
        v = vb / denom
        w = vc / denom
        put(interior, a + v[:, None] * ab + w[:, None] * ac)
    return q, interior


class _Surface:
    """Exact closest-point queries on a triangle mesh with bounding-sphere pruning."""

    def __init__(self, vertices: np.ndarray, triangles):
        self.v = vertices
        self.t = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.t) == 0:
            raise ValueError("target mesh has no triangles")
        if self.t.min() < 0 or self.t.max() >= len(vertices):
            raise IndexError("triangle index out of range")
        corners = vertices[self.t]
        self.centers = corners.mean(axis=1)
        self.radii = np.max(np.linalg.norm(corners - self.centers[:, None], axis=2), axis=1)
        self.max_radius = float(self.radii.max())
        self.center_tree = cKDTree(self.centers)
        used = np.unique(self.t)
        self.used = used
        self.vertex_tree = cKDTree(vertices[used])
        cross = np.cross(corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0])
        norm = np.linalg.norm(cross, axis=1, keepdims=True)
        self.normals = np.divide(cross, norm, out=np.zeros_like(cross), where=norm > 0)

    def closest(self, points: np.ndarray):
        """Return (closest points, triangle index, interior flag) for each query point."""
        # distance to the nearest mesh vertex bounds the surface distance from above
        bound, _ = self.vertex_tree.query(points)
        cand = self.center_tree.query_ball_point(points, bound + self.max_radius + 1e-12)
        owner = np.repeat(np.arange(len(points)), [len(c) for c in cand])
        tri = np.concatenate([np.asarray(c, dtype=np.int64) for c in cand]) if len(owner) else np.zeros(0, np.int64)
        # sort candidates per point so ties resolve to the lowest triangle index
        order = np.lexsort((tri, owner))
        owner, tri = owner[order], tri[order]
        corners = self.v[self.t[tri]]
        q, interior = closest_point_on_triangles(points[owner], corners[:, 0], corners[:, 1], corners[:, 2])
        d2 = np.sum((points[owner] - q) ** 2, axis=1)
        starts = np.searchsorted(owner, np.arange(len(points)))
        mins = np.minimum.reduceat(d2, starts)
        hit = np.flatnonzero(d2 == mins[owner])
        _, first = np.unique(owner[hit], return_index=True)
        best = hit[first]
        return q[best], tri[best], interior[best]


def point_to_plane(source, target_vertices, target_triangles) -> tuple[float, np.ndarray]:
    """Mean and per-point distance to the plane of the closest target face.

    When the closest point lies on a face boundary the plane is undefined and the
    point-to-point distance to that closest point is used instead.
    """
    p = _check_points(source, "source")
    v = _check_points(target_vertices, "target vertices")
    if len(v) == 0:
        raise ValueError("empty target")
    if len(p) == 0:
        raise ValueError("empty source")
    surf = _Surface(v, target_triangles)
    q, tri, interior = surf.closest(p)
    diff = p - q
    plane = np.abs(np.einsum("ij,ij->i", diff, surf.normals[tri]))
    dist = np.where(interior, plane, np.linalg.norm(diff, axis=1))
    return float(dist.mean()), dist


def depth_error(pred, gt, mask) -> float:
    """Mean absolute depth difference after min-max matching pred to gt over the mask."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != gt.shape or mask.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape}, gt {gt.shape}, mask {mask.shape}")
    if not mask.any():
        raise UndefinedMetricError("depth mask is empty")
    p = pred[mask]
    g = gt[mask]
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(g))):
        raise ValueError("non-finite depth inside the mask")
    p_lo, p_hi = p.min(), p.max()
    if p_hi == p_lo:
        raise UndefinedMetricError("predicted depth is constant over the mask")
    g_lo, g_hi = g.min(), g.max()
    # compare in normalised units so identical inputs give exactly zero
    pn = (p - p_lo) / (p_hi - p_lo)
    gn = (g - g_lo) / (g_hi - g_lo) if g_hi > g_lo else np.zeros_like(g)
    return float(np.mean(np.abs(pn - gn)) * (g_hi - g_lo))


def nose_tip(vertices: np.ndarray, landmark_indices=None, index: int = 30) -> np.ndarray:
    """Landmark vertex `index` when landmarks are known, else the vertex nearest the camera (min z)."""
    v = np.asarray(vertices, dtype=np.float64)
    if landmark_indices is not None:
        return v[int(np.asarray(landmark_indices)[index])]
    return v[int(np.argmin(v[:, 2]))]
