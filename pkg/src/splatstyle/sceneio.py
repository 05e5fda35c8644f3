"""Files in and out: posed scenes, Gaussian PLYs, network weights, PNG images.

Conventions
-----------
* Cameras are stored camera-to-world, right-handed, looking down -z with +y up.
* Pixel (0, 0) is the top-left pixel and its centre sits at coordinate (0, 0).
* ``scene.json`` holds ``{"frames": [{"file", "transform", "fx", "fy", "cx", "cy",
  "w", "h"}, ...]}``; ``transform`` is 16 numbers, row-major. Intrinsics may also
  be given once at top level and are then shared by all frames.
"""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from PIL import Image

from .gaussians import DEFAULT_FEATURE_DIM, GaussianSet, sh_count, sh_degree_of


class SceneValidationError(ValueError):
    pass


class PlyFormatError(ValueError):
    pass


class WeightValidationError(ValueError):
    pass


class ImageIOError(OSError):
    pass


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_json(path, obj) -> None:
    atomic_write_bytes(path, (json.dumps(obj, indent=2) + "\n").encode())


# ---------------------------------------------------------------------------
# cameras and scenes

# camera frame (x right, y up, looking down -z) -> image frame (x right, y down, z forward)
_FLIP = np.diag([1.0, -1.0, -1.0])


@dataclass
class Camera:
    camera_to_world: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        self.camera_to_world = np.asarray(self.camera_to_world, dtype=np.float64).reshape(4, 4)
        self.width = int(self.width)
        self.height = int(self.height)
        self.fx, self.fy, self.cx, self.cy = map(float, (self.fx, self.fy, self.cx, self.cy))

    def validate(self, tol: float = 1e-4) -> None:
        r = self.camera_to_world[:3, :3]
        if not np.all(np.isfinite(self.camera_to_world)):
            raise SceneValidationError("camera transform has non-finite entries")
        if np.abs(r.T @ r - np.eye(3)).max() > tol or np.linalg.det(r) < 0:
            raise SceneValidationError("camera rotation is not orthonormal with determinant +1")
        if not np.allclose(self.camera_to_world[3], [0, 0, 0, 1]):
            raise SceneValidationError("camera transform bottom row must be (0, 0, 0, 1)")
        if self.fx <= 0 or self.fy <= 0:
            raise SceneValidationError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise SceneValidationError("principal point outside the image")

    @property
    def center(self) -> np.ndarray:
        return self.camera_to_world[:3, 3].copy()

    def world_to_image_frame(self) -> tuple[np.ndarray, np.ndarray]:
        """Rotation and translation mapping world points into the (right, down, forward) frame."""
        r = self.camera_to_world[:3, :3]
        t = self.camera_to_world[:3, 3]
        rot = _FLIP @ r.T
        return rot, -rot @ t

    def project_points(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Pixel coordinates ``(N, 2)`` and forward depths ``(N,)`` of world points."""
        rot, tr = self.world_to_image_frame()
        p = np.asarray(pts, dtype=np.float64) @ rot.T + tr
        z = p[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = np.stack([self.fx * p[:, 0] / z + self.cx, self.fy * p[:, 1] / z + self.cy], axis=1)
        return uv, z

    def unproject(self, uv: np.ndarray, depth: np.ndarray) -> np.ndarray:
        rot, tr = self.world_to_image_frame()
        uv = np.asarray(uv, dtype=np.float64)
        depth = np.asarray(depth, dtype=np.float64)
        p = np.stack([(uv[:, 0] - self.cx) / self.fx * depth,
                      (uv[:, 1] - self.cy) / self.fy * depth, depth], axis=1)
        return (p - tr) @ rot

    @staticmethod
    def look_at(eye, target, up=(0.0, 1.0, 0.0), *, fx, fy, cx, cy, width, height) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        back = eye - np.asarray(target, dtype=np.float64)
        back /= np.linalg.norm(back)
        right = np.cross(np.asarray(up, dtype=np.float64), back)
        right /= np.linalg.norm(right)
        true_up = np.cross(back, right)
        c2w = np.eye(4)
        c2w[:3, 0], c2w[:3, 1], c2w[:3, 2], c2w[:3, 3] = right, true_up, back, eye
        return Camera(c2w, fx, fy, cx, cy, width, height)


@dataclass
class SceneDataset:
    cameras: list[Camera]
    images: list[np.ndarray]
    files: list[str] = field(default_factory=list)
    points: tuple[np.ndarray, np.ndarray] | None = None

    def __len__(self) -> int:
        return len(self.cameras)

    @property
    def resolution(self) -> tuple[int, int]:
        return (self.cameras[0].height, self.cameras[0].width) if self.cameras else (0, 0)

    def validate(self) -> None:
        if len(self.cameras) != len(self.images):
            raise SceneValidationError(
                f"{len(self.cameras)} cameras but {len(self.images)} images")
        res = None
        for i, (cam, img) in enumerate(zip(self.cameras, self.images)):
            cam.validate()
            if img.shape != (3, cam.height, cam.width):
                raise SceneValidationError(
                    f"frame {i}: image shape {img.shape} does not match camera "
                    f"{cam.width}x{cam.height}")
            if res is None:
                res = img.shape
            elif img.shape != res:
                raise SceneValidationError(f"frame {i}: resolution differs from frame 0")

    def scene_scale(self) -> float:
        """Radius of the camera centres around their centroid, padded by 10%."""
        centers = np.array([c.center for c in self.cameras])
        return float(1.1 * np.linalg.norm(centers - centers.mean(0), axis=1).max())


def load_scene(path: str | os.PathLike) -> SceneDataset:
    root = Path(path)
    index = root / "scene.json"
    if not index.is_file():
        raise FileNotFoundError(f"no scene.json in {root}")
    try:
        doc = json.loads(index.read_text())
        frames = doc["frames"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise SceneValidationError(f"malformed scene.json: {exc}") from exc
    cameras, images, files = [], [], []
    for i, fr in enumerate(frames):
        try:
            get = lambda k: fr[k] if k in fr else doc[k]  # noqa: E731
            m = np.array(fr["transform"], dtype=np.float64)
            if m.size != 16:
                raise SceneValidationError(f"frame {i}: transform needs 16 numbers")
            cam = Camera(m.reshape(4, 4), get("fx"), get("fy"), get("cx"), get("cy"),
                         get("w"), get("h"))
        except KeyError as exc:
            raise SceneValidationError(f"frame {i}: missing field {exc}") from exc
        cam.validate()
        img = load_image(root / fr["file"])
        cameras.append(cam)
        images.append(img)
        files.append(fr["file"])
    points = None
    if (root / "points.ply").is_file():
        points = load_points(root / "points.ply")
    ds = SceneDataset(cameras, images, files, points)
    ds.validate()
    return ds


def save_scene(ds: SceneDataset, path: str | os.PathLike) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    files = ds.files or [f"frame_{i:03d}.png" for i in range(len(ds))]
    frames = []
    for cam, img, name in zip(ds.cameras, ds.images, files):
        save_image(img, root / name)
        frames.append({
            "file": name,
            "transform": [float(v) for v in cam.camera_to_world.reshape(-1)],
            "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "w": cam.width, "h": cam.height,
        })
    atomic_write_json(root / "scene.json", {"frames": frames})
    if ds.points is not None:
        save_points(root / "points.ply", *ds.points)


# ---------------------------------------------------------------------------
# images


def load_image(path: str | os.PathLike) -> np.ndarray:
    """8-bit RGB PNG -> float32 grid ``(3, H, W)`` in [0, 1]."""
    try:
        with Image.open(path) as im:
            if im.mode != "RGB":
                raise ImageIOError(f"{path}: expected 8-bit RGB, got mode {im.mode}")
            arr = np.asarray(im, dtype=np.uint8)
    except ImageIOError:
        raise
    except FileNotFoundError:
        raise
    except OSError as exc:
        raise ImageIOError(f"{path}: unreadable image ({exc})") from exc
    return (arr.astype(np.float32) / np.float32(255.0)).transpose(2, 0, 1).copy()


def to_uint8(grid: np.ndarray) -> np.ndarray:
    g = np.clip(np.asarray(grid, dtype=np.float64), 0.0, 1.0)
    return np.rint(g * 255.0).astype(np.uint8).transpose(1, 2, 0)


def save_image(grid: np.ndarray, path: str | os.PathLike) -> None:
    """Clamp to [0, 1], quantize round-to-nearest, write an 8-bit RGB PNG."""
    grid = np.asarray(grid)
    if grid.ndim != 3 or grid.shape[0] != 3:
        raise ImageIOError(f"save_image expects a (3, H, W) grid, got {grid.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(grid), mode="RGB").save(path, format="PNG")


# ---------------------------------------------------------------------------
# PLY

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def read_ply_vertices(path: str | os.PathLike) -> np.ndarray:
    """Vertex element of a binary little-endian PLY as a structured array."""
    with open(path, "rb") as f:
        data = f.read()
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise PlyFormatError(f"{path}: not a PLY file")
    nl = data.find(b"\n", end)
    header = data[:end].decode("ascii", errors="replace").splitlines()
    body = data[nl + 1:]
    fmt = None
    elements: list[tuple[str, int, list[tuple[str, str]]]] = []
    for line in header[1:]:
        parts = line.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            fmt = parts[1] if len(parts) > 1 else None
        elif parts[0] == "element" and len(parts) == 3:
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise PlyFormatError(f"{path}: property before any element")
            if len(parts) != 3 or parts[1] == "list":
                raise PlyFormatError(f"{path}: unsupported property line {line!r}")
            if parts[1] not in _PLY_TYPES:
                raise PlyFormatError(f"{path}: unknown type {parts[1]!r} for property {parts[2]!r}")
            elements[-1][2].append((parts[2], "<" + _PLY_TYPES[parts[1]]))
        else:
            raise PlyFormatError(f"{path}: malformed header line {line!r}")
    if fmt != "binary_little_endian":
        raise PlyFormatError(f"{path}: only binary_little_endian PLY is supported (got {fmt})")
    offset = 0
    for name, count, props in elements:
        dt = np.dtype(props)
        if name == "vertex":
            if len(body) < offset + count * dt.itemsize:
                raise PlyFormatError(f"{path}: truncated vertex data")
            return np.frombuffer(body, dtype=dt, count=count, offset=offset).copy()
        offset += count * dt.itemsize
    raise PlyFormatError(f"{path}: no vertex element")


def write_ply_vertices(path: str | os.PathLike, columns: Mapping[str, np.ndarray], dtypes=None) -> None:
    names = list(columns)
    n = len(next(iter(columns.values()))) if names else 0
    inv = {"f4": "float", "f8": "double", "u1": "uchar", "i4": "int", "u4": "uint"}
    dts = [(k, "<" + (dtypes or {}).get(k, "f4")) for k in names]
    rec = np.empty(n, dtype=np.dtype(dts))
    for k in names:
        rec[k] = columns[k]
    lines = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    lines += [f"property {inv[dt[1:]]} {k}" for k, dt in dts]
    lines.append("end_header")
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("ascii") + rec.tobytes())


def load_gaussians(path: str | os.PathLike, default_feature_dim: int = DEFAULT_FEATURE_DIM) -> GaussianSet:
    v = read_ply_vertices(path)
    props = set(v.dtype.names or ())

    def col(name):
        if name not in props:
            raise PlyFormatError(f"{path}: missing property {name!r}")
        return v[name].astype(np.float32)

    def cols(names):
        return np.stack([col(k) for k in names], axis=1) if names else np.zeros((len(v), 0), np.float32)

    n = len(v)
    means = cols(["x", "y", "z"])
    quats = cols([f"rot_{i}" for i in range(4)])
    log_scales = cols([f"scale_{i}" for i in range(3)])
    opacity = col("opacity")
    dc = cols([f"f_dc_{i}" for i in range(3)])
    n_rest = sum(1 for p in props if p.startswith("f_rest_"))
    if n_rest % 3:
        raise PlyFormatError(f"{path}: f_rest_* count {n_rest} is not a multiple of 3")
    k = 1 + n_rest // 3
    try:
        sh_degree_of(k)
    except ValueError as exc:
        raise PlyFormatError(f"{path}: {exc}") from exc
    rest = cols([f"f_rest_{i}" for i in range(n_rest)]).reshape(n, 3, k - 1).transpose(0, 2, 1)
    sh = np.concatenate([dc[:, None, :], rest], axis=1)
    n_feat = sum(1 for p in props if p.startswith("feat_"))
    if n_feat:
        feats = cols([f"feat_{i}" for i in range(n_feat)])
        present = True
    else:
        feats = np.zeros((n, default_feature_dim), np.float32)
        present = False
    return GaussianSet(means, quats, log_scales, opacity, np.ascontiguousarray(sh), feats, present)


def save_gaussians(g: GaussianSet, path: str | os.PathLike) -> None:
    cols: dict[str, np.ndarray] = {}
    for i, k in enumerate("xyz"):
        cols[k] = g.means[:, i]
    for i in range(3):
        cols[f"f_dc_{i}"] = g.sh[:, 0, i]
    rest = g.sh[:, 1:, :].transpose(0, 2, 1).reshape(len(g), 3 * (g.sh.shape[1] - 1))
    for i in range(rest.shape[1]):
        cols[f"f_rest_{i}"] = rest[:, i]
    cols["opacity"] = g.opacity_logits
    for i in range(3):
        cols[f"scale_{i}"] = g.log_scales[:, i]
    for i in range(4):
        cols[f"rot_{i}"] = g.quats[:, i]
    if g.features_present:
        for i in range(g.feature_dim):
            cols[f"feat_{i}"] = g.features[:, i]
    write_ply_vertices(path, cols)


def load_points(path) -> tuple[np.ndarray, np.ndarray]:
    """Point cloud ``(xyz float32, rgb in [0,1])`` from a PLY with red/green/blue."""
    v = read_ply_vertices(path)
    for k in ("x", "y", "z", "red", "green", "blue"):
        if k not in (v.dtype.names or ()):
            raise PlyFormatError(f"{path}: missing property {k!r}")
    xyz = np.stack([v["x"], v["y"], v["z"]], 1).astype(np.float32)
    rgb = np.stack([v["red"], v["green"], v["blue"]], 1).astype(np.float32) / 255.0
    return xyz, rgb


def save_points(path, xyz: np.ndarray, rgb: np.ndarray) -> None:
    rgb8 = np.rint(np.clip(rgb, 0, 1) * 255).astype(np.uint8)
    cols = {"x": xyz[:, 0], "y": xyz[:, 1], "z": xyz[:, 2],
            "red": rgb8[:, 0], "green": rgb8[:, 1], "blue": rgb8[:, 2]}
    write_ply_vertices(path, cols, {"red": "u1", "green": "u1", "blue": "u1"})


# ---------------------------------------------------------------------------
# network weights


@dataclass
class NetWeights:
    params: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name) -> bool:
        return name in self.params

    def keys(self):
        return self.params.keys()


def _weight_paths(path) -> tuple[Path, Path]:
    p = Path(path)
    name = p.name
    for suffix in (".manifest.json", ".bin"):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
    return p.with_name(name + ".manifest.json"), p.with_name(name + ".bin")


def validate_weights(params: Mapping[str, np.ndarray], schema: Mapping[str, Sequence[int]]) -> None:
    if not params and schema:
        raise WeightValidationError(f"no weights given; architecture needs {len(schema)} entries")
    for name, shape in schema.items():
        if name not in params:
            raise WeightValidationError(f"missing weight entry {name!r}")
        if tuple(params[name].shape) != tuple(shape):
            raise WeightValidationError(
                f"weight entry {name!r} has shape {tuple(params[name].shape)}, expected {tuple(shape)}")
    extra = set(params) - set(schema)
    if extra:
        raise WeightValidationError(f"unexpected weight entries {sorted(extra)}")


def save_weights(path, weights: Mapping[str, np.ndarray] | NetWeights, meta: dict | None = None) -> None:
    """Write ``<name>.manifest.json`` and ``<name>.bin`` (little-endian float32)."""
    if isinstance(weights, NetWeights):
        meta = weights.meta if meta is None else meta
        weights = weights.params
    manifest_path, blob_path = _weight_paths(path)
    entries, chunks, offset = [], [], 0
    for name, arr in weights.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.nbytes
    atomic_write_bytes(blob_path, b"".join(chunks))
    atomic_write_json(manifest_path, {"format": "f32le", "blob": blob_path.name,
                                      "entries": entries, "meta": meta or {}})


def load_weights(path, schema: Mapping[str, Sequence[int]] | None = None) -> NetWeights:
    manifest_path, blob_path = _weight_paths(path)
    if not manifest_path.is_file():
        raise FileNotFoundError(f"no weight manifest at {manifest_path}")
    try:
        doc = json.loads(manifest_path.read_text())
        entries = doc["entries"]
    except (json.JSONDecodeError, KeyError) as exc:
        raise WeightValidationError(f"{manifest_path}: malformed manifest ({exc})") from exc
    blob_path = manifest_path.with_name(doc.get("blob", blob_path.name))
    blob = blob_path.read_bytes()
    params: dict[str, np.ndarray] = {}
    spans = []
    for e in entries:
        name, shape, off = e["name"], tuple(int(s) for s in e["shape"]), int(e["offset"])
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if off < 0 or off + nbytes > len(blob):
            raise WeightValidationError(f"entry {name!r} runs past the end of {blob_path.name}")
        spans.append((off, off + nbytes, name))
        params[name] = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=off).reshape(shape).astype(np.float32)
    spans.sort()
    for (a0, a1, an), (b0, b1, bn) in zip(spans, spans[1:]):
        if b0 < a1:
            raise WeightValidationError(f"entries {an!r} and {bn!r} overlap")
    total = sum(s[1] - s[0] for s in spans)
    if total != len(blob):
        raise WeightValidationError(f"blob holds {len(blob)} bytes, manifest accounts for {total}")
    if schema is not None:
        validate_weights(params, schema)
    return NetWeights(params, doc.get("meta", {}))
