"""7-DoF pose and orthographic projection.

Rotation is R = Rz(rz) @ Ry(ry) @ Rx(rx). Projected coordinates are pixels with
the origin at the image centre, +x right and +y up; depth is the view-space z
and smaller depth is nearer the camera.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

POSE_KEYS = ("f", "rx", "ry", "rz", "tx", "ty", "tz")


@dataclass
class Pose:
    f: float = 1.0
    rx: float = 0.0
    ry: float = 0.0
    rz: float = 0.0
    tx: float = 0.0
    ty: float = 0.0
    tz: float = 0.0

    def __post_init__(self):
        for k in POSE_KEYS:
            setattr(self, k, float(getattr(self, k)))
        if not np.all(np.isfinite(self.to_vector())):
            raise ValueError("pose values must be finite")
        if self.f <= 0:
            raise ValueError(f"pose scale must be positive, got {self.f}")

    def to_vector(self) -> np.ndarray:
        return np.array([getattr(self, k) for k in POSE_KEYS])

    @classmethod
    def from_vector(cls, vec) -> "Pose":
        return cls(*[float(x) for x in vec])

    @property
    def rotation(self) -> np.ndarray:
        return rotation_matrix(self.rx, self.ry, self.rz)

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.tz])


def _axis_mats(rx, ry, rz):
    cx, sx = np.cos(rx), np.sin(rx)
    cy, sy = np.cos(ry), np.sin(ry)
    cz, sz = np.cos(rz), np.sin(rz)
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    dRx = np.array([[0, 0, 0], [0, -sx, -cx], [0, cx, -sx]])
    dRy = np.array([[-sy, 0, cy], [0, 0, 0], [-cy, 0, -sy]])
    dRz = np.array([[-sz, -cz, 0], [cz, -sz, 0], [0, 0, 0]])
    return (Rx, Ry, Rz), (dRx, dRy, dRz)


def rotation_matrix(rx: float, ry: float, rz: float) -> np.ndarray:
    (Rx, Ry, Rz), _ = _axis_mats(rx, ry, rz)
    return Rz @ Ry @ Rx


def rotation_matrix_vjp(rx: float, ry: float, rz: float, g_R: np.ndarray) -> np.ndarray:
    """Cotangents (d/drx, d/dry, d/drz) of a scalar with gradient g_R wrt R."""
    (Rx, Ry, Rz), (dRx, dRy, dRz) = _axis_mats(rx, ry, rz)
    return np.array([
        np.sum(g_R * (Rz @ Ry @ dRx)),
        np.sum(g_R * (Rz @ dRy @ Rx)),
        np.sum(g_R * (dRz @ Ry @ Rx)),
    ])


def transform(pose: Pose, vertices: np.ndarray) -> np.ndarray:
    """View-space positions f * R v + t, one row per vertex."""
    v = np.asarray(vertices, dtype=np.float64)
    return pose.f * v @ pose.rotation.T + pose.translation


def transform_project(pose: Pose, vertices: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    vp = transform(pose, vertices)
    return vp[:, :2].copy(), vp[:, 2].copy()


def transform_vjp(pose: Pose, vertices: np.ndarray, g_view: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Backward of `transform`: returns (pose cotangent as a 7-vector, vertex cotangents)."""
    v = np.asarray(vertices, dtype=np.float64)
    g = np.asarray(g_view, dtype=np.float64)
    R = pose.rotation
    rv = v @ R.T
    g_pose = np.empty(7)
    g_pose[0] = np.sum(g * rv)
    g_R = pose.f * (g.T @ v)
    g_pose[1:4] = rotation_matrix_vjp(pose.rx, pose.ry, pose.rz, g_R)
    g_pose[4:7] = g.sum(axis=0)
    g_vertices = pose.f * g @ R
    return g_pose, g_vertices


def transform_project_vjp(pose: Pose, vertices: np.ndarray, g_points: np.ndarray,
                          g_depth: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    g_view = np.zeros((len(vertices), 3))
    g_view[:, :2] = g_points
    if g_depth is not None:
        g_view[:, 2] = g_depth
    return transform_vjp(pose, vertices, g_view)


def _gather(vertices: np.ndarray, landmark_indices) -> np.ndarray:
    idx = np.asarray(landmark_indices, dtype=np.int64)
    n = len(vertices)
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise IndexError(f"landmark index out of range for {n} vertices")
    if idx.size and idx.min() < 0:
        raise IndexError("landmark indices must be non-negative")
    return np.asarray(vertices, dtype=np.float64)[idx]


def project_landmarks(pose: Pose, vertices: np.ndarray, landmark_indices) -> np.ndarray:
    pts, _ = transform_project(pose, _gather(vertices, landmark_indices))
    return pts


def project_landmarks_vjp(pose: Pose, vertices: np.ndarray, landmark_indices,
                          g_points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    idx = np.asarray(landmark_indices, dtype=np.int64)
    sub = _gather(vertices, idx)
    g_pose, g_sub = transform_project_vjp(pose, sub, g_points)
    g_vertices = np.zeros((len(vertices), 3))
    np.add.at(g_vertices, idx, g_sub)
    return g_pose, g_vertices


def view_to_model(pose: Pose, view_points: np.ndarray) -> np.ndarray:
    """Inverse of `transform`: v = R^T (v' - t) / f."""
    p = np.asarray(view_points, dtype=np.float64)
    return (p - pose.translation) @ pose.rotation / pose.f
