"""File codecs: PNG images, OBJ meshes, landmark text, UVM1 maps and FPJ1 parameter files."""

from __future__ import annotations

import hashlib
import json
import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .camera import POSE_KEYS, Pose
from .facemodel import N_LANDMARKS, FaceModel, ShapeCoeffs, encode_model
from .lighting import ShLighting
from .losses import SceneParams
from .uvspace import SPACES, UvMap

DEPTH_DIVISOR = 10.0  # 16-bit depth PNG stores round(mm * 10)


class CodecError(ValueError):
    pass


# --- images -------------------------------------------------------------------------

def srgb_to_linear(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.where(x <= 0.04045, x / 12.92, ((x + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(x: np.ndarray) -> np.ndarray:
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * np.power(x, 1 / 2.4) - 0.055)


def _open_png(path) -> Image.Image:
    path = Path(path)
    try:
        img = Image.open(path)
        img.load()
    except FileNotFoundError:
        raise
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise CodecError(f"{path}: not a readable PNG ({exc})") from exc
    if img.format != "PNG":
        raise CodecError(f"{path}: expected PNG, found {img.format}")
    return img


def read_image(path) -> np.ndarray:
    """8-bit sRGB PNG -> H x W x 3 linear floats in [0, 1]."""
    img = _open_png(path)
    if img.mode in ("RGBA", "LA", "P"):
        img = img.convert("RGB")
    elif img.mode == "L":
        img = img.convert("RGB")
    elif img.mode != "RGB":
        raise CodecError(f"{path}: unsupported image mode {img.mode!r}; expected 8-bit RGB or grayscale")
    return srgb_to_linear(np.asarray(img, dtype=np.float64) / 255.0)


def write_image(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = np.repeat(image[:, :, None], 3, axis=2)
    if image.ndim != 3 or image.shape[2] != 3 or image.shape[0] == 0 or image.shape[1] == 0:
        raise ValueError(f"image must be H x W x 3, got {image.shape}")
    if not np.all(np.isfinite(image)):
        raise ValueError("image contains non-finite values")
    q = np.round(linear_to_srgb(image) * 255.0).astype(np.uint8)
    Image.fromarray(q, "RGB").save(Path(path), format="PNG")


def write_depth_png(path, depth_mm: np.ndarray, mask: np.ndarray) -> None:
    """16-bit grayscale PNG with value round(mm * 10); 0 marks invalid pixels."""
    depth_mm = np.asarray(depth_mm, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    q = np.zeros(depth_mm.shape, dtype=np.uint16)
    vals = np.round(depth_mm[mask] * DEPTH_DIVISOR)
    if vals.size and (vals.min() < 1 or vals.max() > 65535):
        raise ValueError("depth out of the 16-bit range (0.1 to 6553.5 mm)")
    q[mask] = vals.astype(np.uint16)
    Image.fromarray(q).save(Path(path), format="PNG")


def read_depth_png(path) -> tuple[np.ndarray, np.ndarray]:
    img = _open_png(path)
    if img.mode not in ("I;16", "I;16B", "I"):
        raise CodecError(f"{path}: depth PNG must be 16-bit grayscale, got mode {img.mode!r}")
    q = np.asarray(img, dtype=np.float64)
    return q / DEPTH_DIVISOR, q > 0


# --- OBJ ----------------------------------------------------------------------------

@dataclass
class ObjMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    uvs: np.ndarray | None = None
    uv_triangles: np.ndarray | None = None


def _obj_index(token: str, n: int, lineno: int, path) -> int:
    k = int(token)
    if k == 0:
        raise CodecError(f"{path}:{lineno}: OBJ indices are 1-based, got 0")
    k = k - 1 if k > 0 else n + k
    if not 0 <= k < n:
        raise CodecError(f"{path}:{lineno}: index {token} out of range ({n} available)")
    return k


def parse_obj(text: str, path="<obj>") -> ObjMesh:
    verts, uvs, faces, uv_faces = [], [], [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split("#", 1)[0].split()
        if not parts:
            continue
        tag = parts[0]
        try:
            if tag == "v":
                verts.append([float(x) for x in parts[1:4]])
                if len(parts) < 4:
                    raise ValueError("vertex needs 3 coordinates")
            elif tag == "vt":
                if len(parts) < 3:
                    raise ValueError("texture coordinate needs 2 values")
                uvs.append([float(x) for x in parts[1:3]])
            elif tag == "f":
                if len(parts) < 4:
                    raise ValueError("face needs at least 3 vertices")
                vi, ti = [], []
                for tok in parts[1:]:
                    slots = tok.split("/")
                    vi.append(_obj_index(slots[0], len(verts), lineno, path))
                    if len(slots) > 1 and slots[1]:
                        ti.append(_obj_index(slots[1], len(uvs), lineno, path))
                if ti and len(ti) != len(vi):
                    raise ValueError("mixed faces with and without texture indices")
                for k in range(1, len(vi) - 1):  # fan triangulation
                    faces.append([vi[0], vi[k], vi[k + 1]])
                    if ti:
                        uv_faces.append([ti[0], ti[k], ti[k + 1]])
        except CodecError:
            raise
        except ValueError as exc:
            raise CodecError(f"{path}:{lineno}: malformed {tag!r} line ({exc})") from exc
    if uv_faces and len(uv_faces) != len(faces):
        raise CodecError(f"{path}: some faces lack texture indices")
    return ObjMesh(np.asarray(verts, dtype=np.float64).reshape(-1, 3), np.asarray(faces, dtype=np.int64).reshape(-1, 3),
                   np.asarray(uvs, dtype=np.float64).reshape(-1, 2) if uvs else None,
                   np.asarray(uv_faces, dtype=np.int64).reshape(-1, 3) if uv_faces else None)


def format_obj(mesh: ObjMesh) -> str:
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    if mesh.uvs is not None:
        lines += [f"vt {u:.9g} {v:.9g}" for u, v in mesh.uvs]
    if mesh.uv_triangles is not None:
        for (a, b, c), (ta, tb, tc) in zip(mesh.triangles + 1, mesh.uv_triangles + 1):
            lines.append(f"f {a}/{ta} {b}/{tb} {c}/{tc}")
    else:
        lines += [f"f {a} {b} {c}" for a, b, c in mesh.triangles + 1]
    return "\n".join(lines) + "\n"


def read_obj(path) -> ObjMesh:
    return parse_obj(Path(path).read_text(encoding="utf-8"), path)


def write_obj(path, mesh: ObjMesh) -> None:
    Path(path).write_text(format_obj(mesh), encoding="utf-8")


# --- landmarks ------------------------------------------------------------------------

def parse_landmarks(text: str, path="<landmarks>", count: int = N_LANDMARKS) -> np.ndarray:
    rows = [ln for ln in text.splitlines() if ln.strip()]
    if len(rows) != count:
        raise CodecError(f"{path}: expected {count} landmark lines, found {len(rows)}")
    out = np.empty((count, 2))
    for i, ln in enumerate(rows):
        parts = ln.split()
        try:
            if len(parts) != 2:
                raise ValueError(f"expected 2 values, got {len(parts)}")
            out[i] = [float(parts[0]), float(parts[1])]
        except ValueError as exc:
            raise CodecError(f"{path}: landmark line {i + 1}: {exc}") from exc
    if not np.all(np.isfinite(out)):
        raise CodecError(f"{path}: non-finite landmark coordinate")
    return out


def read_landmarks(path, count: int = N_LANDMARKS) -> np.ndarray:
    return parse_landmarks(Path(path).read_text(encoding="utf-8"), path, count)


def write_landmarks(path, points: np.ndarray) -> None:
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 2:
        raise ValueError(f"landmarks must be N x 2, got {points.shape}")
    Path(path).write_text("".join(f"{x:.9g} {y:.9g}\n" for x, y in points), encoding="utf-8")


# --- UVM1 -------------------------------------------------------------------------------

UVM_MAGIC = b"UVMAP1\0\0"
_UVM_HEAD = struct.Struct("<IIIB")


def encode_uvmap(m: UvMap) -> bytes:
    if m.width == 0 or m.height == 0:
        raise ValueError("cannot encode a zero-size UV map")
    data = m.data.astype("<f4")
    payload = (_UVM_HEAD.pack(m.width, m.height, m.channels, SPACES.index(m.space)) + data.tobytes()
               + m.mask.astype(np.uint8).tobytes())
    return UVM_MAGIC + payload + struct.pack("<I", zlib.crc32(payload))


def decode_uvmap(blob: bytes, path="<uvmap>") -> UvMap:
    if len(blob) < len(UVM_MAGIC) + _UVM_HEAD.size + 4 or blob[: len(UVM_MAGIC)] != UVM_MAGIC:
        raise CodecError(f"{path}: not a UVM1 file (bad magic or too short)")
    w, h, c, tag = _UVM_HEAD.unpack_from(blob, len(UVM_MAGIC))
    if w == 0 or h == 0:
        raise CodecError(f"{path}: zero-size UV map")
    if c not in (1, 3) or tag >= len(SPACES):
        raise CodecError(f"{path}: bad channel count {c} or space tag {tag}")
    start = len(UVM_MAGIC) + _UVM_HEAD.size
    n = w * h
    end = start + 4 * n * c + n
    if len(blob) != end + 4:
        raise CodecError(f"{path}: size mismatch, expected {end + 4} bytes, got {len(blob)}")
    (crc,) = struct.unpack_from("<I", blob, end)
    if zlib.crc32(blob[len(UVM_MAGIC): end]) != crc:
        raise CodecError(f"{path}: checksum mismatch")
    data = np.frombuffer(blob, dtype="<f4", count=n * c, offset=start).astype(np.float64).reshape(h, w, c)
    mask = np.frombuffer(blob, dtype=np.uint8, count=n, offset=start + 4 * n * c).reshape(h, w)
    if np.any(mask > 1):
        raise CodecError(f"{path}: mask bytes must be 0 or 1")
    try:
        return UvMap(data, mask.astype(bool), SPACES[tag])
    except ValueError as exc:
        raise CodecError(f"{path}: {exc}") from exc


def read_uvmap(path) -> UvMap:
    return decode_uvmap(Path(path).read_bytes(), path)


def write_uvmap(path, m: UvMap) -> None:
    Path(path).write_bytes(encode_uvmap(m))


# --- FPJ1 -------------------------------------------------------------------------------

def model_hash(model: FaceModel) -> str:
    return hashlib.sha256(encode_model(model)).hexdigest()


def _dump(obj) -> str:
    # JSON with every float at 17 significant digits
    if isinstance(obj, dict):
        return "{" + ", ".join(f"{json.dumps(str(k))}: {_dump(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(_dump(v) for v in obj) + "]"
    if isinstance(obj, (bool, np.bool_)) or obj is None or isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    x = float(obj)
    if not math.isfinite(x):
        raise ValueError("parameters must be finite")
    return format(x, ".17g")


def encode_params(scene: SceneParams, model: FaceModel | None = None, image_size=None) -> str:
    meta = {"format": "FPJ1"}
    if model is not None:
        meta["model_hash"] = model_hash(model)
    if image_size is not None:
        meta["image_size"] = [int(image_size[0]), int(image_size[1])]
    doc = {
        "x_id": [float(x) for x in scene.coeffs.x_id],
        "x_exp": [float(x) for x in scene.coeffs.x_exp],
        "x_tex": [float(x) for x in scene.coeffs.x_tex],
        "pose": {k: float(getattr(scene.pose, k)) for k in POSE_KEYS},
        "sh": scene.lighting.to_list(),
        "meta": meta,
    }
    return _dump(doc) + "\n"


def _floats(doc: dict, key: str, path) -> np.ndarray:
    if key not in doc:
        raise CodecError(f"{path}: missing key {key!r}")
    val = doc[key]
    if not isinstance(val, list) or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in val):
        raise CodecError(f"{path}: {key!r} must be a list of numbers")
    return np.asarray(val, dtype=np.float64)


def decode_params(text: str, model: FaceModel | None = None, path="<params>") -> tuple[SceneParams, dict]:
    """Parse FPJ1 text; with `model`, coefficient lengths and the model hash are checked."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CodecError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise CodecError(f"{path}: top level must be an object")
    x_id, x_exp, x_tex = (_floats(doc, k, path) for k in ("x_id", "x_exp", "x_tex"))
    sh = _floats(doc, "sh", path)
    if sh.size != 27:
        raise CodecError(f"{path}: 'sh' must hold 27 values, got {sh.size}")
    pose_doc = doc.get("pose")
    if not isinstance(pose_doc, dict) or any(k not in pose_doc for k in POSE_KEYS):
        raise CodecError(f"{path}: 'pose' must have keys {', '.join(POSE_KEYS)}")
    meta = doc.get("meta", {})
    if not isinstance(meta, dict):
        raise CodecError(f"{path}: 'meta' must be an object")
    try:
        pose = Pose(**{k: float(pose_doc[k]) for k in POSE_KEYS})
        scene = SceneParams(ShapeCoeffs(x_id, x_exp, x_tex), pose, ShLighting.from_list(sh))
    except (TypeError, ValueError) as exc:
        raise CodecError(f"{path}: {exc}") from exc
    if model is not None:
        expect = (model.n_id, model.n_exp, model.n_tex)
        if (x_id.size, x_exp.size, x_tex.size) != expect:
            raise CodecError(f"{path}: coefficient lengths {(x_id.size, x_exp.size, x_tex.size)} do not match the "
                             f"model {expect}")
        if "model_hash" in meta and meta["model_hash"] != model_hash(model):
            raise CodecError(f"{path}: parameters were fitted with a different model")
    return scene, meta


def read_params(path, model: FaceModel | None = None) -> tuple[SceneParams, dict]:
    return decode_params(Path(path).read_text(encoding="utf-8"), model, path)


def write_params(path, scene: SceneParams, model: FaceModel | None = None, image_size=None) -> None:
    Path(path).write_text(encode_params(scene, model, image_size), encoding="utf-8")
