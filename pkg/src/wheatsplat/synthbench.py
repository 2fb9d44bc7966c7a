"""Synthetic splat scenes with known instances for desk-scale testing.

Generates a plot of ellipsoidal "wheat heads" as Gaussian clusters over a
clutter layer, an overhead ring of calibrated cameras, per-view instance
masks (ideal, optionally corrupted), a ground-truth record, and a reference
point cloud sampled from the true head surfaces.  Everything is driven by a
single RNG seed so runs are byte-reproducible.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import InputError
from .rasterizer import (flatten_contributions, project_gaussians,
                         render_label_mask)
from .scene_io import (GaussianScene, InstanceMap, MaskPool, MaskRecord, View,
                       mask_bbox_area)

logger = logging.getLogger(__name__)

# Plot geometry in scene units (meters). Heads sit on a jittered grid at
# crop height; clutter fills the layer below; cameras circle overhead.
GRID_SPACING = 0.15
XY_JITTER = 0.02
HEAD_HEIGHT = 0.55
Z_JITTER = 0.01
CLUTTER_Z = (0.1, 0.4)
CAMERA_HEIGHT = 1.8
CAMERA_RING_RADIUS = 0.35
FOCAL_FACTOR = 1.2
MAX_HEAD_TILT = math.radians(40.0)  # from horizontal; heads mostly nod over


@dataclass
class SynthConfig:
    n_heads: int = 20
    head_semi_axes_cm: tuple[float, float, float] = (4.0, 1.2, 1.2)
    gaussians_per_head: tuple[int, int] = (100, 300)
    clutter_gaussians: int = 300
    n_views: int = 8
    image_size: int = 256
    mask_dropout: float = 0.0
    mask_morph_noise: int = 0
    rng_seed: int = 0
    unit_scale: float = 100.0
    reference_points_per_head: int = 1500
    # Blending-weight contour of the ideal masks.  Real detector masks hug
    # the visible extent of a head, which sits well below the 0.5 contour.
    mask_threshold: float = 0.3
    # Fraction of head Gaussians concentrated in a thin shell under the
    # surface; photometrically trained splats cluster where the visible
    # surface is, with only a minority of interior floaters.
    surface_fraction: float = 0.7
    # Per-head uniform scale factor range [1-j, 1+j] applied to the semi
    # axes, so the trait regression has real size variation to recover.
    head_size_jitter: float = 0.12

    def __post_init__(self) -> None:
        if self.n_heads < 1 or self.n_views < 2:
            raise InputError("need n_heads >= 1 and n_views >= 2")
        if not 0.0 <= self.mask_dropout <= 1.0:
            raise InputError("mask_dropout must be in [0, 1]")
        if min(self.clutter_gaussians, self.mask_morph_noise,
               self.reference_points_per_head) < 0:
            raise InputError("counts must be >= 0")
        lo, hi = self.gaussians_per_head
        if lo < 1 or hi < lo:
            raise InputError("gaussians_per_head must be a valid range")
        if any(a <= 0 for a in self.head_semi_axes_cm):
            raise InputError("head semi-axes must be positive")
        if self.image_size < 32:
            raise InputError("image_size must be >= 32")
        if not 0.0 < self.mask_threshold < 1.0:
            raise InputError("mask_threshold must be in (0, 1)")
        if not 0.0 <= self.surface_fraction <= 1.0:
            raise InputError("surface_fraction must be in [0, 1]")
        if not 0.0 <= self.head_size_jitter < 1.0:
            raise InputError("head_size_jitter must be in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["head_semi_axes_cm"] = list(self.head_semi_axes_cm)
        d["gaussians_per_head"] = list(self.gaussians_per_head)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "SynthConfig":
        known = cls().__dict__.keys()
        unknown = set(data) - set(known)
        if unknown:
            raise InputError(f"unknown synth config keys: {sorted(unknown)}")
        kwargs = dict(data)
        for key in ("head_semi_axes_cm", "gaussians_per_head"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


@dataclass
class HeadTruth:
    head_id: int
    gaussians: np.ndarray  # indices into the scene
    center: np.ndarray  # (3,) scene units
    semi_axes: np.ndarray  # (3,) scene units, descending
    orientation: np.ndarray  # (3, 3), rows are head axes in world frame

    def analytic_traits(self, unit_scale: float) -> dict:
        a, b, c = self.semi_axes * unit_scale
        return {"length_cm": 2.0 * a, "width_cm": c,
                "volume_cm3": 4.0 / 3.0 * math.pi * a * b * c}


@dataclass
class GroundTruth:
    heads: list[HeadTruth] = field(default_factory=list)
    # (view_id, head_id) -> ideal binary mask; empty footprints omitted.
    ideal_masks: dict[tuple[str, int], np.ndarray] = field(default_factory=dict)


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def _head_orientation(rng: np.random.Generator) -> np.ndarray:
    """Rows are the head's long/middle/short axes, leaning near horizontal."""
    azimuth = rng.uniform(0.0, 2.0 * math.pi)
    tilt = rng.uniform(-MAX_HEAD_TILT, MAX_HEAD_TILT)
    long_axis = np.array([math.cos(azimuth) * math.cos(tilt),
                          math.sin(azimuth) * math.cos(tilt),
                          math.sin(tilt)])
    spin = rng.uniform(0.0, 2.0 * math.pi)
    ref = np.array([0.0, 0.0, 1.0])
    side = np.cross(ref, long_axis)
    side /= np.linalg.norm(side)
    third = np.cross(long_axis, side)
    cos_s, sin_s = math.cos(spin), math.sin(spin)
    middle = cos_s * side + sin_s * third
    short = np.cross(long_axis, middle)
    return np.stack([long_axis, middle, short])


def _place_heads(config: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    n_cols = math.ceil(math.sqrt(config.n_heads))
    n_rows = math.ceil(config.n_heads / n_cols)
    base = []
    for i in range(config.n_heads):
        row, col = divmod(i, n_cols)
        base.append([(col - (n_cols - 1) / 2.0) * GRID_SPACING,
                     (row - (n_rows - 1) / 2.0) * GRID_SPACING,
                     HEAD_HEIGHT])
    base = np.asarray(base)
    limit = (2.02 * (1.0 + config.head_size_jitter)
             * max(config.head_semi_axes_cm) / config.unit_scale)
    for attempt in range(100):
        jitter = np.column_stack([
            rng.uniform(-XY_JITTER, XY_JITTER, config.n_heads),
            rng.uniform(-XY_JITTER, XY_JITTER, config.n_heads),
            rng.uniform(-Z_JITTER, Z_JITTER, config.n_heads)])
        centers = base + jitter
        if config.n_heads == 1:
            return centers
        diff = centers[:, None, :] - centers[None, :, :]
        dist = np.linalg.norm(diff, axis=2)
        np.fill_diagonal(dist, np.inf)
        if dist.min() >= limit:
            return centers
    raise InputError("could not place heads without overlap; "
                     "reduce n_heads or head size")


def make_overhead_views(n_views: int, image_size: int,
                        target: np.ndarray | None = None,
                        height: float = CAMERA_HEIGHT,
                        ring_radius: float = CAMERA_RING_RADIUS) -> list[View]:
    """Cameras on a horizontal ring above ``target``, all looking at it."""
    target = np.array([0.0, 0.0, HEAD_HEIGHT]) if target is None else target
    focal = FOCAL_FACTOR * image_size
    views = []
    for i in range(n_views):
        phi = 2.0 * math.pi * i / n_views
        center = target + np.array([ring_radius * math.cos(phi),
                                    ring_radius * math.sin(phi),
                                    height - target[2]])
        forward = target - center
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.array([0.0, 0.0, 1.0]))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])
        w2c = np.eye(4)
        w2c[:3, :3] = rot
        w2c[:3, 3] = -rot @ center
        views.append(View(id=f"view_{i:03d}", width=image_size,
                          height=image_size, fx=focal, fy=focal,
                          cx=image_size / 2.0, cy=image_size / 2.0,
                          world_to_camera=w2c))
    return views


def _disk(radius: int) -> np.ndarray:
    grid = np.arange(-radius, radius + 1)
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    return xx ** 2 + yy ** 2 <= radius ** 2


def generate(config: SynthConfig
             ) -> tuple[GaussianScene, list[View], MaskPool, GroundTruth]:
    """Build (scene, views, mask pool, ground truth) from one seed."""
    rng = np.random.default_rng(config.rng_seed)
    centers = _place_heads(config, rng)
    semi = np.asarray(config.head_semi_axes_cm) / config.unit_scale

    positions, scale_log, rotation, opacity, colors = [], [], [], [], []
    heads: list[HeadTruth] = []
    cursor = 0
    lo, hi = config.gaussians_per_head
    for head_id in range(1, config.n_heads + 1):
        orient = _head_orientation(rng)
        size = 1.0 + rng.uniform(-1.0, 1.0) * config.head_size_jitter
        head_semi = semi * size
        n = int(rng.integers(lo, hi + 1))
        direction = rng.normal(size=(n, 3))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        # Most splats hug a thin shell under the surface (where photometric
        # evidence lives); the rest are interior floaters.
        radial = np.where(rng.uniform(0.0, 1.0, n) < config.surface_fraction,
                          rng.uniform(0.93, 1.0, n),
                          rng.uniform(0.0, 1.0, n) ** (1.0 / 3.0))
        local = direction * radial[:, None] * head_semi
        positions.append(centers[head_id - 1] + local @ orient)
        head_volume = 4.0 / 3.0 * math.pi * float(np.prod(head_semi))
        spacing = (head_volume / n) ** (1.0 / 3.0)
        scale_log.append(np.log(0.6 * spacing)
                         + rng.normal(0.0, 0.15, (n, 3)))
        quat = rng.normal(size=(n, 4))
        rotation.append(quat / np.linalg.norm(quat, axis=1, keepdims=True))
        opacity.append(rng.normal(1.5, 0.25, n))
        base_color = rng.uniform(-1.0, 1.0, 3)
        colors.append(base_color + rng.normal(0.0, 0.05, (n, 3)))
        heads.append(HeadTruth(head_id=head_id,
                               gaussians=np.arange(cursor, cursor + n),
                               center=centers[head_id - 1],
                               semi_axes=head_semi, orientation=orient))
        cursor += n

    if config.clutter_gaussians:
        n = config.clutter_gaussians
        extent = centers[:, :2].min(axis=0) - 0.1, centers[:, :2].max(axis=0) + 0.1
        xy = rng.uniform(extent[0], extent[1], (n, 2))
        z = rng.uniform(CLUTTER_Z[0], CLUTTER_Z[1], n)
        positions.append(np.column_stack([xy, z]))
        scale_log.append(np.log(0.006) + rng.normal(0.0, 0.2, (n, 3)))
        quat = rng.normal(size=(n, 4))
        rotation.append(quat / np.linalg.norm(quat, axis=1, keepdims=True))
        opacity.append(rng.normal(1.5, 0.25, n))
        colors.append(rng.uniform(-1.2, 0.3, (n, 3)))

    sh = np.concatenate(colors)[:, :, None]  # degree-0 SH, one DC per channel
    scene = GaussianScene(
        positions=np.concatenate(positions),
        scale_log=np.concatenate(scale_log),
        rotation=np.concatenate(rotation),
        opacity_logit=np.concatenate(opacity),
        sh_coeffs=sh,
        instance_id=np.zeros(cursor + (config.clutter_gaussians or 0),
                             dtype=np.int64),
        unit_scale=config.unit_scale,
    )
    scene.validate()

    views = make_overhead_views(config.n_views, config.image_size,
                                target=np.array([0.0, 0.0, HEAD_HEIGHT]))

    truth = GroundTruth(heads=heads)
    for view in views:
        splats = flatten_contributions(project_gaussians(scene, view), view,
                                       len(scene))
        for head in heads:
            labels = np.zeros(len(scene), dtype=bool)
            labels[head.gaussians] = True
            mask = render_label_mask(scene, view, labels,
                                     threshold=config.mask_threshold,
                                     splats=splats)
            if mask.any():
                truth.ideal_masks[(view.id, head.head_id)] = mask

    pool = MaskPool()
    structure = _disk(config.mask_morph_noise) if config.mask_morph_noise else None
    for view in views:
        for head in heads:
            mask = truth.ideal_masks.get((view.id, head.head_id))
            if mask is None:
                continue
            if rng.uniform() < config.mask_dropout:
                continue
            if structure is not None:
                op = (ndimage.binary_erosion if rng.uniform() < 0.5
                      else ndimage.binary_dilation)
                mask = op(mask, structure=structure)
            bbox, area = mask_bbox_area(mask)
            if area == 0:
                logger.warning("morph noise erased mask (%s, head %d)",
                               view.id, head.head_id)
                continue
            pool.add(MaskRecord(view_id=view.id, mask_id=head.head_id,
                                bitmap=mask, bbox=bbox, area=area))
    return scene, views, pool, truth


def sample_reference_cloud(truth: GroundTruth, config: SynthConfig) -> np.ndarray:
    """Points on the true head surfaces, a stand-in for an aligned scan."""
    rng = np.random.default_rng([config.rng_seed, 7])
    clouds = []
    for head in truth.heads:
        direction = rng.normal(size=(config.reference_points_per_head, 3))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        local = direction * head.semi_axes
        clouds.append(head.center + local @ head.orientation)
    return np.concatenate(clouds)


def score_against_truth(instances: InstanceMap, truth: GroundTruth) -> dict:
    """Hungarian set-IoU matching of predicted index sets to true heads.

    detected_fraction counts true heads matched at IoU >= 0.5;
    mean_set_iou averages matched IoU over all true heads (unmatched = 0).
    """
    from scipy.optimize import linear_sum_assignment

    pred_ids = instances.instance_ids()
    n_true = len(truth.heads)
    if not pred_ids:
        return {"detected_fraction": 0.0, "mean_set_iou": 0.0,
                "id_map": {}, "method": "hungarian"}
    iou = np.zeros((len(pred_ids), n_true))
    for i, pid in enumerate(pred_ids):
        pred = set(instances.members[pid].tolist())
        for j, head in enumerate(truth.heads):
            true = set(head.gaussians.tolist())
            inter = len(pred & true)
            union = len(pred | true)
            iou[i, j] = inter / union if union else 0.0
    rows, cols = linear_sum_assignment(-iou)
    id_map = {}
    matched_iou = np.zeros(n_true)
    for r, c in zip(rows, cols):
        if iou[r, c] > 0.0:
            id_map[int(pred_ids[r])] = int(truth.heads[c].head_id)
            matched_iou[c] = iou[r, c]
    return {
        "detected_fraction": float(np.mean(matched_iou >= 0.5)),
        "mean_set_iou": float(matched_iou.mean()),
        "id_map": id_map,
        "method": "hungarian",
    }


def save_truth(truth: GroundTruth, config: SynthConfig, path: str | Path) -> None:
    payload = {
        "config": config.to_dict(),
        "heads": [
            {
                "head_id": h.head_id,
                "gaussians": [int(k) for k in h.gaussians],
                "center": h.center.tolist(),
                "semi_axes": h.semi_axes.tolist(),
                "orientation": h.orientation.tolist(),
                "traits": h.analytic_traits(config.unit_scale),
            }
            for h in truth.heads
        ],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_truth(path: str | Path) -> tuple[GroundTruth, SynthConfig]:
    """Rebuild ground truth (without ideal masks) and its config from JSON."""
    with open(path) as fh:
        payload = json.load(fh)
    config = SynthConfig.from_dict(payload["config"])
    truth = GroundTruth()
    for entry in payload["heads"]:
        truth.heads.append(HeadTruth(
            head_id=int(entry["head_id"]),
            gaussians=np.asarray(entry["gaussians"], dtype=np.int64),
            center=np.asarray(entry["center"]),
            semi_axes=np.asarray(entry["semi_axes"]),
            orientation=np.asarray(entry["orientation"]),
        ))
    return truth, config
