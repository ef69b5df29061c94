"""Second-order real spherical-harmonics lighting with Lambertian shading."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

N_SH = 9

_C0 = 0.5 / np.sqrt(np.pi)
_C1 = np.sqrt(3.0 / (4.0 * np.pi))
_C2 = 0.5 * np.sqrt(15.0 / np.pi)
_C20 = 0.25 * np.sqrt(5.0 / np.pi)
_C22 = 0.25 * np.sqrt(15.0 / np.pi)

# band-0 coefficient that makes the irradiance factor exactly 1
UNIT_AMBIENT = 1.0 / _C0


@dataclass
class ShLighting:
    """9 SH coefficients (rows) per RGB channel (columns)."""

    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = np.array(self.coeffs, dtype=np.float64)
        if self.coeffs.shape != (N_SH, 3):
            raise ValueError(f"SH coefficients must have shape (9, 3), got {self.coeffs.shape}")
        if not np.all(np.isfinite(self.coeffs)):
            raise ValueError("SH coefficients must be finite")

    @classmethod
    def ambient(cls, level: float = 1.0) -> "ShLighting":
        c = np.zeros((N_SH, 3))
        c[0] = level * UNIT_AMBIENT
        return cls(c)

    def to_list(self) -> list[float]:
        """27 floats, channel-major."""
        return [float(x) for x in self.coeffs.T.reshape(-1)]

    @classmethod
    def from_list(cls, values) -> "ShLighting":
        values = list(values)
        if len(values) != 3 * N_SH:
            raise ValueError(f"expected 27 SH values, got {len(values)}")
        return cls(np.asarray(values, dtype=np.float64).reshape(3, N_SH).T)


def _sh_unchecked(n: np.ndarray) -> np.ndarray:
    x, y, z = n[..., 0], n[..., 1], n[..., 2]
    return np.stack([
        np.full_like(x, _C0),
        _C1 * y,
        _C1 * z,
        _C1 * x,
        _C2 * x * y,
        _C2 * y * z,
        _C20 * (3.0 * z * z - 1.0),
        _C2 * x * z,
        _C22 * (x * x - y * y),
    ], axis=-1)


def sh_basis(n) -> np.ndarray:
    """SH basis at unit direction(s) n, ordered (0,0),(1,-1),(1,0),(1,1),(2,-2)...(2,2)."""
    n = np.asarray(n, dtype=np.float64)
    if n.shape[-1] != 3:
        raise ValueError("normals must have a trailing dimension of 3")
    if np.any(np.abs(np.linalg.norm(n, axis=-1) - 1.0) > 1e-6):
        raise ValueError("sh_basis requires unit-length normals")
    return _sh_unchecked(n)


def sh_basis_jacobian(n: np.ndarray) -> np.ndarray:
    """d basis / d n, shape (..., 9, 3)."""
    x, y, z = n[..., 0], n[..., 1], n[..., 2]
    zero = np.zeros_like(x)
    rows = [
        (zero, zero, zero),
        (zero, _C1 + zero, zero),
        (zero, zero, _C1 + zero),
        (_C1 + zero, zero, zero),
        (_C2 * y, _C2 * x, zero),
        (zero, _C2 * z, _C2 * y),
        (zero, zero, 6.0 * _C20 * z),
        (_C2 * z, zero, _C2 * x),
        (2.0 * _C22 * x, -2.0 * _C22 * y, zero),
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def shade(albedo, n, light: ShLighting) -> np.ndarray:
    """albedo * max(0, sum_k coeffs[k, c] Y_k(n)), per channel."""
    irr = sh_basis(n) @ light.coeffs
    return np.asarray(albedo, dtype=np.float64) * np.maximum(irr, 0.0)


def shade_vjp(albedo, n, light: ShLighting, g_out) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Cotangents for (albedo, normal, SH coefficients)."""
    albedo = np.asarray(albedo, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    g_out = np.asarray(g_out, dtype=np.float64)
    Y = _sh_unchecked(n)
    irr = Y @ light.coeffs
    lit = irr > 0
    g_albedo = g_out * np.where(lit, irr, 0.0)
    g_irr = g_out * albedo * lit
    Yf = Y.reshape(-1, N_SH)
    g_coeffs = Yf.T @ g_irr.reshape(-1, 3)
    g_Y = g_irr @ light.coeffs.T
    g_n = np.einsum("...k,...kj->...j", g_Y, sh_basis_jacobian(n))
    return g_albedo, g_n, g_coeffs
