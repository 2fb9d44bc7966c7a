"""File I/O for Gaussian scenes, cameras, masks and instance maps.

Scene coordinates are kept in scene units (meters by default); ``unit_scale``
converts scene units to centimeters for trait reporting.  All loaded
structures are immutable in practice: only :class:`MaskPool` consumed flags
are mutated, and only by the association loop.
"""
from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import CalibrationError, EmptySceneError, FormatError, InputError

logger = logging.getLogger(__name__)

# Per-channel SH coefficient counts for degrees 0..3 and the matching number
# of "rest" (non-DC) properties in the standard splat PLY layout.
_SH_REST_COUNTS = {0: 0, 1: 9, 2: 24, 3: 45}


@dataclass(frozen=True)
class Gaussian:
    """A single Gaussian primitive (row view into a scene)."""

    position: np.ndarray      # (3,) scene units
    scale_log: np.ndarray     # (3,) log of axis scales
    rotation: np.ndarray      # (4,) unit quaternion (w, x, y, z)
    opacity_logit: float
    sh_coeffs: np.ndarray     # (3, C) per-channel SH coefficients
    instance_id: int          # 0 = unassigned

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.scale_log)

    @property
    def opacity(self) -> float:
        return float(1.0 / (1.0 + np.exp(-self.opacity_logit)))


@dataclass
class GaussianScene:
    """A Gaussian-splat scene stored as arrays over Gaussian index k.

    Index k is the identity of a Gaussian for the lifetime of a run; no
    operation reorders the arrays.
    """

    positions: np.ndarray      # (K, 3) float64
    scale_log: np.ndarray      # (K, 3) float64
    rotation: np.ndarray       # (K, 4) float64, unit quaternions (w, x, y, z)
    opacity_logit: np.ndarray  # (K,)   float64
    sh_coeffs: np.ndarray      # (K, 3, C) float64, C in {1, 4, 9, 16}
    instance_id: np.ndarray    # (K,)   int64, 0 = unassigned
    unit_scale: float = 100.0  # scene units -> centimeters

    def __len__(self) -> int:
        return self.positions.shape[0]

    def __getitem__(self, k: int) -> Gaussian:
        return Gaussian(
            position=self.positions[k],
            scale_log=self.scale_log[k],
            rotation=self.rotation[k],
            opacity_logit=float(self.opacity_logit[k]),
            sh_coeffs=self.sh_coeffs[k],
            instance_id=int(self.instance_id[k]),
        )

    @property
    def sh_degree(self) -> int:
        return {1: 0, 4: 1, 9: 2, 16: 3}[self.sh_coeffs.shape[2]]

    def opacities(self) -> np.ndarray:
        """Activated opacities sigmoid(opacity_logit), in (0, 1)."""
        return 1.0 / (1.0 + np.exp(-self.opacity_logit))

    def scales(self) -> np.ndarray:
        """Activated per-axis scales exp(scale_log), strictly positive."""
        return np.exp(self.scale_log)

    def validate(self) -> None:
        k = len(self)
        if self.scale_log.shape != (k, 3) or self.rotation.shape != (k, 4):
            raise InputError("scene arrays have inconsistent lengths")
        norms = np.linalg.norm(self.rotation, axis=1)
        if k and not np.allclose(norms, 1.0, atol=1e-6):
            raise InputError("scene contains non-unit quaternions")
        if np.any(self.instance_id < 0):
            raise InputError("negative instance_id")


@dataclass(frozen=True)
class View:
    """A calibrated pinhole camera, OpenCV convention (+z forward, +y down)."""

    id: str
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    world_to_camera: np.ndarray  # (4, 4) rigid transform

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    def camera_center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Project world points to pixel coordinates; returns (pixels, depths)."""
        cam = points @ self.rotation.T + self.translation
        z = cam[:, 2]
        px = np.stack([self.fx * cam[:, 0] / z + self.cx,
                       self.fy * cam[:, 1] / z + self.cy], axis=1)
        return px, z


@dataclass
class MaskRecord:
    """One instance-agnostic binary mask for one view."""

    view_id: str
    mask_id: int
    bitmap: np.ndarray      # (H, W) bool
    bbox: tuple[int, int, int, int]  # (x0, y0, w, h), tight
    area: int
    consumed: bool = False


class MaskPool:
    """Per-view collections of masks with consumed/available bookkeeping."""

    def __init__(self) -> None:
        self._by_view: dict[str, list[MaskRecord]] = {}

    def add(self, record: MaskRecord) -> None:
        self._by_view.setdefault(record.view_id, []).append(record)

    def view_ids(self) -> list[str]:
        return sorted(self._by_view)

    def records(self, view_id: str) -> list[MaskRecord]:
        return self._by_view.get(view_id, [])

    def unconsumed(self, view_id: str) -> list[MaskRecord]:
        return [m for m in self.records(view_id) if not m.consumed]

    def all_unconsumed(self) -> list[MaskRecord]:
        return [m for vid in self.view_ids() for m in self.unconsumed(vid)]

    def get(self, view_id: str, mask_id: int) -> MaskRecord:
        for m in self.records(view_id):
            if m.mask_id == mask_id:
                return m
        raise KeyError((view_id, mask_id))

    def consume(self, view_id: str, mask_id: int) -> None:
        self.get(view_id, mask_id).consumed = True

    def size(self) -> int:
        return sum(len(v) for v in self._by_view.values())

    def n_unconsumed(self) -> int:
        return len(self.all_unconsumed())


@dataclass
class InstanceMap:
    """instance_id -> Gaussian indices, with per-instance mask provenance."""

    members: dict[int, np.ndarray] = field(default_factory=dict)
    sources: dict[int, list[tuple[str, int]]] = field(default_factory=dict)

    def instance_ids(self) -> list[int]:
        return sorted(self.members)

    def add(self, instance_id: int, gaussians: np.ndarray,
            sources: list[tuple[str, int]]) -> None:
        if instance_id in self.members:
            raise InputError(f"duplicate instance_id {instance_id}")
        self.members[instance_id] = np.asarray(gaussians, dtype=np.int64)
        self.sources[instance_id] = list(sources)

    def validate_against(self, scene: GaussianScene) -> None:
        seen: set[int] = set()
        for iid, idx in self.members.items():
            if len(idx) and (idx.min() < 0 or idx.max() >= len(scene)):
                raise InputError(f"instance {iid} references Gaussians outside the scene")
            dup = seen.intersection(idx.tolist())
            if dup:
                raise InputError(f"Gaussian {min(dup)} assigned to more than one instance")
            seen.update(idx.tolist())


# ---------------------------------------------------------------------------
# PLY scene files
# ---------------------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


def _parse_ply_header(fh) -> tuple[str, int, list[tuple[str, str]], dict[str, str]]:
    """Returns (format, vertex_count, [(name, numpy dtype)], comments)."""
    magic = fh.readline().strip()
    if magic != b"ply":
        raise FormatError("not a PLY file (missing 'ply' magic)")
    fmt = None
    props: list[tuple[str, str]] = []
    count = None
    in_vertex = False
    comments: dict[str, str] = {}
    while True:
        line = fh.readline()
        if not line:
            raise FormatError("unterminated PLY header")
        tokens = line.decode("ascii", errors="replace").split()
        if not tokens:
            continue
        if tokens[0] == "format":
            fmt = tokens[1]
        elif tokens[0] == "comment":
            if len(tokens) >= 3:
                comments[tokens[1]] = tokens[2]
        elif tokens[0] == "element":
            in_vertex = tokens[1] == "vertex"
            if in_vertex:
                count = int(tokens[2])
        elif tokens[0] == "property" and in_vertex:
            if tokens[1] == "list":
                raise FormatError("list properties are not supported for vertices")
            if tokens[1] not in _PLY_TYPES:
                raise FormatError(f"unsupported PLY property type '{tokens[1]}'")
            props.append((tokens[2], _PLY_TYPES[tokens[1]]))
        elif tokens[0] == "end_header":
            break
    if fmt not in ("binary_little_endian", "ascii"):
        raise FormatError(f"unsupported PLY format '{fmt}'")
    if count is None:
        raise FormatError("PLY has no vertex element")
    return fmt, count, props, comments


def load_scene_ply(path: str | Path) -> GaussianScene:
    """Load a Gaussian scene from a splat PLY file.

    Expects the standard splat layout (x, y, z, f_dc_0..2, f_rest_*, opacity,
    scale_0..2, rot_0..3); the rest block is channel-major.  An optional
    integer ``instance_id`` property is honored; quaternions are normalized.
    """
    path = Path(path)
    with open(path, "rb") as fh:
        fmt, count, props, comments = _parse_ply_header(fh)
        if count == 0:
            raise EmptySceneError(f"{path} contains zero vertices")
        names = [n for n, _ in props]
        if fmt == "binary_little_endian":
            dtype = np.dtype([(n, "<" + t) for n, t in props])
            data = np.frombuffer(fh.read(dtype.itemsize * count), dtype=dtype, count=count)
        else:
            raw = np.loadtxt(fh, dtype=np.float64, ndmin=2)
            if raw.shape[1] != len(props):
                raise FormatError("ASCII PLY row width does not match property count")
            data = {n: raw[:, i] for i, (n, _) in enumerate(props)}

    def col(name: str) -> np.ndarray:
        if name not in names:
            raise FormatError(f"missing required PLY property '{name}'")
        return np.asarray(data[name], dtype=np.float64)

    positions = np.stack([col("x"), col("y"), col("z")], axis=1)
    scale_log = np.stack([col(f"scale_{i}") for i in range(3)], axis=1)
    rotation = np.stack([col(f"rot_{i}") for i in range(4)], axis=1)
    opacity_logit = col("opacity")
    dc = np.stack([col(f"f_dc_{i}") for i in range(3)], axis=1)  # (K, 3)

    rest_names = sorted((n for n in names if re.fullmatch(r"f_rest_\d+", n)),
                        key=lambda n: int(n.split("_")[-1]))
    n_rest = len(rest_names)
    if n_rest not in _SH_REST_COUNTS.values():
        raise FormatError(f"unsupported SH layout: {n_rest} f_rest properties")
    per_channel = n_rest // 3 if n_rest else 0
    sh = np.zeros((count, 3, per_channel + 1))
    sh[:, :, 0] = dc
    if n_rest:
        rest = np.stack([np.asarray(data[n], dtype=np.float64) for n in rest_names], axis=1)
        sh[:, :, 1:] = rest.reshape(count, 3, per_channel)  # channel-major block

    norms = np.linalg.norm(rotation, axis=1)
    if np.any(norms < 1e-12):
        raise FormatError("zero-norm quaternion in PLY")
    rotation = rotation / norms[:, None]

    if "instance_id" in names:
        instance_id = np.asarray(data["instance_id"], dtype=np.int64)
    else:
        instance_id = np.zeros(count, dtype=np.int64)

    unit_scale = float(comments.get("unit_scale", 100.0))
    scene = GaussianScene(positions, scale_log, rotation, opacity_logit, sh,
                          instance_id, unit_scale)
    scene.validate()
    return scene


def save_scene_ply(scene: GaussianScene, path: str | Path) -> None:
    """Write a scene in the standard splat layout plus an ``instance_id`` column.

    Binary little-endian; floats stored as float32, so load(save(scene))
    agrees field-wise within 1e-6 for unit-scale coordinates.
    """
    if len(scene) == 0:
        raise EmptySceneError("refusing to write an empty scene")
    per_channel = scene.sh_coeffs.shape[2] - 1
    n_rest = per_channel * 3

    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
              ("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4")]
    fields += [(f"f_dc_{i}", "<f4") for i in range(3)]
    fields += [(f"f_rest_{i}", "<f4") for i in range(n_rest)]
    fields += [("opacity", "<f4")]
    fields += [(f"scale_{i}", "<f4") for i in range(3)]
    fields += [(f"rot_{i}", "<f4") for i in range(4)]
    fields += [("instance_id", "<u4")]

    out = np.zeros(len(scene), dtype=np.dtype(fields))
    out["x"], out["y"], out["z"] = scene.positions.T
    for i in range(3):
        out[f"f_dc_{i}"] = scene.sh_coeffs[:, i, 0]
    rest = scene.sh_coeffs[:, :, 1:].reshape(len(scene), n_rest)
    for i in range(n_rest):
        out[f"f_rest_{i}"] = rest[:, i]
    out["opacity"] = scene.opacity_logit
    for i in range(3):
        out[f"scale_{i}"] = scene.scale_log[:, i]
    for i in range(4):
        out[f"rot_{i}"] = scene.rotation[:, i]
    out["instance_id"] = scene.instance_id.astype(np.uint32)

    type_names = {"<f4": "float", "<u4": "uint"}
    header = ["ply", "format binary_little_endian 1.0",
              f"comment unit_scale {scene.unit_scale!r}",
              f"element vertex {len(scene)}"]
    header += [f"property {type_names[t]} {n}" for n, t in fields]
    header.append("end_header")

    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(out.tobytes())


# ---------------------------------------------------------------------------
# Cameras
# ---------------------------------------------------------------------------

def _orthonormalize(rot: np.ndarray) -> np.ndarray:
    """Polar decomposition: nearest orthonormal matrix, or raise if too far off."""
    u, s, vt = np.linalg.svd(rot)
    if np.max(np.abs(s - 1.0)) > 1e-3:
        raise CalibrationError(
            f"rotation block is not orthonormal (singular values {s})")
    r = u @ vt
    if np.linalg.det(r) < 0:
        raise CalibrationError("rotation block is a reflection")
    return r


def load_cameras(path: str | Path) -> list[View]:
    """Load pinhole cameras from JSON.

    Layout: array of {id, width, height, fx, fy, cx, cy, world_to_camera}
    where world_to_camera holds 16 row-major floats.  Rotation blocks within
    1e-3 of orthonormal are snapped by polar decomposition; anything further
    off is rejected.
    """
    with open(path) as fh:
        raw = json.load(fh)
    if not isinstance(raw, list) or not raw:
        raise FormatError("cameras JSON must be a non-empty array")
    views: list[View] = []
    seen: set[str] = set()
    for entry in raw:
        vid = str(entry["id"])
        if vid in seen:
            raise FormatError(f"duplicate camera id '{vid}'")
        seen.add(vid)
        w2c = np.asarray(entry["world_to_camera"], dtype=np.float64).reshape(4, 4)
        if not np.allclose(w2c[3], [0.0, 0.0, 0.0, 1.0], atol=1e-9):
            raise CalibrationError(f"camera '{vid}': bottom row must be (0,0,0,1)")
        w2c = w2c.copy()
        w2c[:3, :3] = _orthonormalize(w2c[:3, :3])
        fx, fy = float(entry["fx"]), float(entry["fy"])
        if fx <= 0 or fy <= 0:
            raise CalibrationError(f"camera '{vid}': non-positive focal length")
        views.append(View(
            id=vid, width=int(entry["width"]), height=int(entry["height"]),
            fx=fx, fy=fy, cx=float(entry["cx"]), cy=float(entry["cy"]),
            world_to_camera=w2c))
    return views


def save_cameras(views: list[View], path: str | Path) -> None:
    entries = [{
        "id": v.id, "width": v.width, "height": v.height,
        "fx": v.fx, "fy": v.fy, "cx": v.cx, "cy": v.cy,
        "world_to_camera": [float(x) for x in v.world_to_camera.reshape(-1)],
    } for v in views]
    with open(path, "w") as fh:
        json.dump(entries, fh, indent=1, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Mask trees
# ---------------------------------------------------------------------------

def mask_bbox_area(bitmap: np.ndarray) -> tuple[tuple[int, int, int, int], int]:
    """Tight bounding rectangle (x0, y0, w, h) and foreground pixel count."""
    ys, xs = np.nonzero(bitmap)
    if len(xs) == 0:
        return (0, 0, 0, 0), 0
    x0, x1 = int(xs.min()), int(xs.max())
    y0, y1 = int(ys.min()), int(ys.max())
    return (x0, y0, x1 - x0 + 1, y1 - y0 + 1), int(len(xs))


def load_masks(root: str | Path, views: list[View] | None = None) -> MaskPool:
    """Load a mask tree root/<view_id>/<mask_id>.png into a pool.

    Foreground is any 8-bit value >= 128.  All-background masks are skipped
    with a warning.  When ``views`` is given, each mask must match its view's
    (width, height).
    """
    root = Path(root)
    if not root.is_dir():
        raise InputError(f"mask root {root} is not a directory")
    sizes = {v.id: (v.width, v.height) for v in views} if views else {}
    pool = MaskPool()
    for view_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        view_id = view_dir.name
        for png in sorted(view_dir.glob("*.png")):
            if not png.stem.isdigit():
                raise FormatError(f"mask filename {png} is not an integer id")
            img = Image.open(png)
            if img.mode != "L":
                img = img.convert("L")
            arr = np.asarray(img)
            if view_id in sizes and (arr.shape[1], arr.shape[0]) != sizes[view_id]:
                raise FormatError(
                    f"mask {png} size {arr.shape[::-1]} does not match view "
                    f"'{view_id}' size {sizes[view_id]}")
            bitmap = arr >= 128
            bbox, area = mask_bbox_area(bitmap)
            if area == 0:
                logger.warning("skipping all-background mask %s", png)
                continue
            pool.add(MaskRecord(view_id=view_id, mask_id=int(png.stem),
                                bitmap=bitmap, bbox=bbox, area=area))
    return pool


def save_mask(bitmap: np.ndarray, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.where(bitmap, 255, 0).astype(np.uint8), mode="L").save(path)


# ---------------------------------------------------------------------------
# Instance maps
# ---------------------------------------------------------------------------

def save_instance_map(imap: InstanceMap, path: str | Path) -> None:
    payload = {
        str(iid): {
            "gaussians": [int(k) for k in imap.members[iid]],
            "sources": [[vid, int(mid)] for vid, mid in imap.sources[iid]],
        }
        for iid in imap.instance_ids()
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_instance_map(path: str | Path) -> InstanceMap:
    with open(path) as fh:
        payload = json.load(fh)
    imap = InstanceMap()
    for key, entry in payload.items():
        imap.add(int(key), np.asarray(entry["gaussians"], dtype=np.int64),
                 [(str(v), int(m)) for v, m in entry["sources"]])
    return imap


# ---------------------------------------------------------------------------
# Plain point clouds (reference scans) and render image files
# ---------------------------------------------------------------------------

def load_point_cloud(path: str | Path) -> np.ndarray:
    """Load (N, 3) points from a whitespace XYZ file or a PLY with x/y/z."""
    path = Path(path)
    if path.suffix.lower() == ".ply":
        with open(path, "rb") as fh:
            fmt, count, props, _ = _parse_ply_header(fh)
            names = [n for n, _ in props]
            for axis in ("x", "y", "z"):
                if axis not in names:
                    raise FormatError(f"point PLY missing property '{axis}'")
            if fmt == "binary_little_endian":
                dtype = np.dtype([(n, "<" + t) for n, t in props])
                data = np.frombuffer(fh.read(dtype.itemsize * count),
                                     dtype=dtype, count=count)
                cols = {n: np.asarray(data[n], dtype=np.float64) for n in ("x", "y", "z")}
            elif count == 0:
                cols = {n: np.zeros(0) for n in ("x", "y", "z")}
            else:
                raw = np.loadtxt(fh, dtype=np.float64, ndmin=2)
                cols = {n: raw[:, names.index(n)] for n in ("x", "y", "z")}
        return np.stack([cols["x"], cols["y"], cols["z"]], axis=1)
    if not Path(path).read_text().strip():
        return np.zeros((0, 3))
    pts = np.loadtxt(path, dtype=np.float64, ndmin=2)
    if pts.shape[1] < 3:
        raise FormatError(f"{path} has fewer than 3 columns")
    return pts[:, :3]


def save_xyz(points: np.ndarray, path: str | Path) -> None:
    points = np.asarray(points, dtype=np.float64)
    with open(path, "w") as fh:
        for x, y, z in points:
            fh.write(f"{x:.9g} {y:.9g} {z:.9g}\n")


def save_pfm(image: np.ndarray, path: str | Path) -> None:
    """Write a float image as PFM (grayscale 'Pf' or color 'PF', little-endian)."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 2:
        magic = b"Pf"
        h, w = image.shape
    elif image.ndim == 3 and image.shape[2] == 3:
        magic = b"PF"
        h, w = image.shape[:2]
    else:
        raise InputError("PFM image must be (H, W) or (H, W, 3)")
    with open(path, "wb") as fh:
        fh.write(magic + b"\n")
        fh.write(f"{w} {h}\n".encode("ascii"))
        fh.write(b"-1.0\n")  # negative scale marks little-endian
        fh.write(np.flipud(image).astype("<f4").tobytes())  # rows bottom-up


def save_png(image: np.ndarray, path: str | Path) -> None:
    """Write a [0, 1] float image (grayscale or RGB) as an 8-bit PNG."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    arr8 = np.round(arr * 255.0).astype(np.uint8)
    mode = "L" if arr8.ndim == 2 else "RGB"
    Image.fromarray(arr8, mode=mode).save(Path(path))
