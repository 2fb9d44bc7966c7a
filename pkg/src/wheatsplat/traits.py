"""Per-instance point-cloud preprocessing and trait measurement.

An instance cloud (Gaussian centroids of one wheat head) is subsampled,
reduced to its dominant density cluster, and cleaned by statistical outlier
removal; length, width and volume are then measured on the filtered points.
Traits are reported in centimeters via the scene's unit scale.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace

import numpy as np
from scipy.integrate import simpson
from scipy.interpolate import UnivariateSpline
from scipy.spatial import ConvexHull, QhullError, cKDTree
from sklearn.cluster import HDBSCAN

from .errors import InputError, Unmeasurable
from .scene_io import GaussianScene, InstanceMap

logger = logging.getLogger(__name__)

STAGES = ("raw", "subsampled", "clustered", "filtered")


@dataclass
class TraitConfig:
    max_points: int = 5000
    min_points: int = 30
    hdbscan_min_cluster_size: int = 15
    hdbscan_min_samples: int = 5
    sor_neighbors: int = 16
    sor_std_factor: float = 2.0
    sor_passes: int = 2
    # Density floor for cluster selection, as a percentile of each point's
    # min_samples-th neighbor distance; 0 disables the floor.  Without it a
    # single near-uniform cloud is shredded into leaf clusters and its sparse
    # fringe (which carries the extreme extent) is discarded as noise.
    hdbscan_epsilon_percentile: float = 95.0
    max_bins: int = 50
    arc_samples: int = 1001
    # Multiplier on the spline residual budget n_bins * sigma^2.  The budget
    # equals the expected residual of the true midline only on average, so a
    # bare 1.0 makes half of all clouds exceed it and chase noise with extra
    # knots; the headroom keeps the fit on the smooth side.
    spline_headroom: float = 3.0
    width_percentile: float = 99.0
    # Width is reported as the one-sided 99th-percentile distance from the
    # PC1-PC2 plane; set 2.0 to report full thickness instead.
    thickness_factor: float = 1.0
    unit_scale: float = 100.0
    seed: int = 0


@dataclass
class InstanceCloud:
    instance_id: int
    points: np.ndarray  # (N, 3) scene units
    stage: str = "raw"

    def __post_init__(self) -> None:
        if self.stage not in STAGES:
            raise InputError(f"unknown stage '{self.stage}'")

    def __len__(self) -> int:
        return len(self.points)

    def advanced(self, points: np.ndarray, stage: str) -> "InstanceCloud":
        if STAGES.index(stage) <= STAGES.index(self.stage):
            raise InputError(f"stage may only advance ({self.stage} -> {stage})")
        return replace(self, points=points, stage=stage)


@dataclass
class TraitRecord:
    instance_id: int
    length_cm: float | None
    width_cm: float | None
    volume_cm3: float | None
    n_points_raw: int
    n_points_final: int
    group: str = ""
    flags: str = ""


def _require(cloud: InstanceCloud, config: TraitConfig, stage: str) -> None:
    if len(cloud) < config.min_points:
        raise Unmeasurable(f"{stage}:{len(cloud)}<{config.min_points}")


def subsample_points(points: np.ndarray, max_points: int,
                     rng: np.random.Generator) -> np.ndarray:
    """Uniform random subsample without replacement, original order kept."""
    if len(points) <= max_points:
        return points
    keep = np.sort(rng.choice(len(points), size=max_points, replace=False))
    return points[keep]


def dominant_cluster(points: np.ndarray, min_cluster_size: int,
                     min_samples: int,
                     epsilon_percentile: float = 95.0) -> np.ndarray:
    """Largest HDBSCAN cluster (Euclidean metric); noise points dropped.

    ``epsilon_percentile`` sets a scale-adaptive merge floor: clusters whose
    separation is below that percentile of the min_samples-th neighbor
    distance are not split, so a single connected cloud is kept whole while
    genuinely detached blobs (separation far above typical spacing) still
    come apart.
    """
    if len(points) <= min_samples:
        return points[:0]  # too few points to estimate density: all noise
    epsilon = 0.0
    if epsilon_percentile > 0:
        dists, _ = cKDTree(points).query(points, k=min_samples + 1)
        epsilon = float(np.percentile(dists[:, -1], epsilon_percentile))
    labels = HDBSCAN(min_cluster_size=min_cluster_size,
                     min_samples=min_samples,
                     cluster_selection_epsilon=epsilon,
                     allow_single_cluster=True).fit_predict(points)
    valid = labels[labels >= 0]
    if valid.size == 0:
        return points[:0]
    counts = np.bincount(valid)
    return points[labels == int(np.argmax(counts))]


def remove_statistical_outliers(points: np.ndarray, k_neighbors: int,
                                std_factor: float) -> np.ndarray:
    """One SOR pass: drop points whose mean k-NN distance is anomalously large."""
    n = len(points)
    if n <= 2:
        return points
    k = min(k_neighbors + 1, n)  # +1: the query point is its own neighbor
    dists, _ = cKDTree(points).query(points, k=k)
    mean_d = dists[:, 1:].mean(axis=1)
    keep = mean_d <= mean_d.mean() + std_factor * mean_d.std()
    return points[keep]


def preprocess(cloud: InstanceCloud, config: TraitConfig) -> InstanceCloud:
    """Subsample -> dominant HDBSCAN cluster -> repeated SOR.

    Raises :class:`Unmeasurable` when any stage leaves fewer than
    ``min_points`` points.  The RNG is seeded by (seed, instance_id) so
    per-instance results do not depend on processing order.
    """
    _require(cloud, config, "raw")
    rng = np.random.default_rng([config.seed, cloud.instance_id])

    pts = subsample_points(cloud.points, config.max_points, rng)
    cloud = cloud.advanced(pts, "subsampled")
    _require(cloud, config, "subsampled")

    pts = dominant_cluster(cloud.points, config.hdbscan_min_cluster_size,
                           config.hdbscan_min_samples,
                           config.hdbscan_epsilon_percentile)
    cloud = cloud.advanced(pts, "clustered")
    _require(cloud, config, "clustered")

    pts = cloud.points
    for _ in range(config.sor_passes):
        pts = remove_statistical_outliers(pts, config.sor_neighbors,
                                          config.sor_std_factor)
    cloud = cloud.advanced(pts, "filtered")
    _require(cloud, config, "filtered")
    return cloud


def principal_axes(points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(centroid, axes, variances): rows of ``axes`` are PC1..PC3, variances
    descending; ties keep ascending-eigenvalue index order.  Axis signs are
    fixed so each axis's largest-magnitude component is positive."""
    centroid = points.mean(axis=0)
    centered = points - centroid
    cov = centered.T @ centered / max(len(points) - 1, 1)
    evals, evecs = np.linalg.eigh(cov)  # ascending
    order = np.argsort(-evals, kind="stable")
    axes = evecs[:, order].T
    for i in range(3):
        j = int(np.argmax(np.abs(axes[i])))
        if axes[i, j] < 0:
            axes[i] = -axes[i]
    return centroid, axes, evals[order]


def _check_pca_rank(variances: np.ndarray) -> None:
    if variances[1] <= max(variances[0], 1.0) * 1e-12:
        raise Unmeasurable("degenerate-pca")


def _detrended_noise_scale(u: np.ndarray, v: np.ndarray) -> float:
    """Robust noise std of v(u) from consecutive 3-point linear detrending."""
    order = np.argsort(u, kind="stable")
    us, vs = u[order], v[order]
    if len(us) < 3:
        return 0.0
    span = us[2:] - us[:-2]
    ok = span > 0
    if not ok.any():
        return 0.0
    a = (us[2:] - us[1:-1])[ok] / span[ok]
    b = 1.0 - a
    resid = vs[1:-1][ok] - (a * vs[:-2][ok] + b * vs[2:][ok])
    resid /= np.sqrt(1.0 + a ** 2 + b ** 2)
    return 1.4826 * float(np.median(np.abs(resid)))


def measure_length(cloud: InstanceCloud, config: TraitConfig,
                   axes: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None
                   ) -> float:
    """Arc length of a smoothing spline through the PC1-PC2 projection, in cm.

    Points are projected to (u, v) = (PC1, PC2) coordinates, bin-averaged
    into at most ``max_bins`` equal-width u-bins, and fit with a cubic
    smoothing spline whose residual budget comes from a robust noise scale
    estimated on locally detrended point triplets.  Arc length integrates
    sqrt(1 + v'(u)^2) over the data's u extent by composite Simpson.
    """
    if len(cloud) < config.min_points:
        raise Unmeasurable(f"length:{len(cloud)}<{config.min_points}")
    centroid, pcs, variances = axes or principal_axes(cloud.points)
    _check_pca_rank(variances)
    centered = cloud.points - centroid
    u = centered @ pcs[0]
    v = centered @ pcs[1]

    u_min, u_max = float(u.min()), float(u.max())
    if u_max <= u_min:
        raise Unmeasurable("degenerate-pca")
    # Bin count adapts downward so bins average ~3 points; singleton bins
    # would otherwise leave the noise scale unobservable.
    n_bins = min(config.max_bins, max(4, len(u) // 3))
    edges = np.linspace(u_min, u_max, n_bins + 1)
    which = np.clip(np.digitize(u, edges) - 1, 0, n_bins - 1)
    counts = np.bincount(which, minlength=n_bins)
    used = counts > 0
    sums_u = np.bincount(which, weights=u, minlength=n_bins)
    sums_v = np.bincount(which, weights=v, minlength=n_bins)
    ub = sums_u[used] / counts[used]
    vb = sums_v[used] / counts[used]
    wb = counts[used].astype(float)

    # Anchor the extreme samples as their own unit-weight sites so the fit
    # spans the full u-range; without them a steep end cap (think of the
    # vertical tangents of a circular arc) is averaged into its bin and the
    # extrapolated end slope under-measures the arc.
    gap = 1e-9 * (u_max - u_min)
    i_lo, i_hi = int(np.argmin(u)), int(np.argmax(u))
    if ub[0] - u[i_lo] > gap:
        ub, vb, wb = (np.insert(a, 0, x) for a, x in
                      ((ub, u[i_lo]), (vb, v[i_lo]), (wb, 1.0)))
    if u[i_hi] - ub[-1] > gap:
        ub, vb, wb = (np.append(a, x) for a, x in
                      ((ub, u[i_hi]), (vb, v[i_hi]), (wb, 1.0)))

    # Noise scale from locally detrended triplets along u (difference-based
    # variance estimation): each middle point is compared with the line
    # through its neighbors, so a smooth midline contributes only
    # O(spacing^2) while noise passes through at full strength.  A global
    # trend-fit residual would count genuine curvature as noise and
    # over-smooth curved midlines.
    sigma = _detrended_noise_scale(u, v)
    scale = max(u_max - u_min, float(np.abs(v).max()))
    if sigma < 1e-5 * scale:
        sigma = 0.0  # effectively noiseless: interpolate instead of looping
    smoothing = config.spline_headroom * len(ub) * sigma ** 2

    k = min(3, len(ub) - 1)
    if k < 1:
        raise Unmeasurable("length:too-few-bins")
    # Weight ~ 1/std of each bin mean so sparse edge bins cannot spend the
    # whole residual budget.
    spline = UnivariateSpline(ub, vb, w=np.sqrt(wb), k=k, s=smoothing)
    grid = np.linspace(u_min, u_max, config.arc_samples)
    dv = spline.derivative()(grid)
    arc = float(simpson(np.sqrt(1.0 + dv ** 2), x=grid))
    return arc * config.unit_scale


def measure_width(cloud: InstanceCloud, config: TraitConfig,
                  axes: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None
                  ) -> float:
    """Robust maximum distance of points from the PC1-PC2 plane, in cm.

    The 99th percentile (linear interpolation) of |PC3 coordinate|,
    optionally doubled via ``thickness_factor``.
    """
    if len(cloud) < config.min_points:
        raise Unmeasurable(f"width:{len(cloud)}<{config.min_points}")
    centroid, pcs, variances = axes or principal_axes(cloud.points)
    _check_pca_rank(variances)
    dist = np.abs((cloud.points - centroid) @ pcs[2])
    w = float(np.percentile(dist, config.width_percentile))
    return w * config.thickness_factor * config.unit_scale


def hull_volume(points: np.ndarray) -> float:
    """Convex-hull volume (Quickhull facets, signed tetrahedra from the centroid)."""
    if len(points) < 4:
        raise Unmeasurable("volume:<4-points")
    try:
        hull = ConvexHull(points)
    except QhullError as err:
        raise Unmeasurable("volume:degenerate-hull") from err
    origin = points.mean(axis=0)
    tri = points[hull.simplices] - origin  # (F, 3, 3)
    dets = np.einsum("fi,fi->f", tri[:, 0], np.cross(tri[:, 1], tri[:, 2]))
    return float(np.abs(dets).sum() / 6.0)


def measure_volume(cloud: InstanceCloud, config: TraitConfig) -> float:
    """Convex-hull volume of the filtered cloud, in cm^3."""
    return hull_volume(cloud.points) * config.unit_scale ** 3


def measure_all(scene: GaussianScene, instance_map: InstanceMap,
                config: TraitConfig,
                groups: dict[int, str] | None = None) -> list[TraitRecord]:
    """Preprocess and measure every instance; unmeasurable ones are flagged."""
    instance_map.validate_against(scene)
    records: list[TraitRecord] = []
    for iid in instance_map.instance_ids():
        pts = scene.positions[instance_map.members[iid]]
        group = (groups or {}).get(iid, "")
        cloud = InstanceCloud(instance_id=iid, points=pts)
        try:
            filtered = preprocess(cloud, config)
            axes = principal_axes(filtered.points)
            length = measure_length(filtered, config, axes)
            width = measure_width(filtered, config, axes)
            volume = measure_volume(filtered, config)
            records.append(TraitRecord(iid, length, width, volume,
                                       len(cloud), len(filtered), group))
        except Unmeasurable as err:
            logger.warning("instance %d unmeasurable: %s", iid, err.reason)
            records.append(TraitRecord(iid, None, None, None, len(cloud), 0,
                                       group, flags=f"unmeasurable:{err.reason}"))
    return records


TRAIT_CSV_COLUMNS = ("instance_id", "length_cm", "width_cm", "volume_cm3",
                     "n_points_raw", "n_points_final", "group", "flags")


def write_traits_csv(records: list[TraitRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRAIT_CSV_COLUMNS)
        for r in records:
            writer.writerow([
                r.instance_id,
                "" if r.length_cm is None else format(r.length_cm, ".9g"),
                "" if r.width_cm is None else format(r.width_cm, ".9g"),
                "" if r.volume_cm3 is None else format(r.volume_cm3, ".9g"),
                r.n_points_raw, r.n_points_final, r.group, r.flags,
            ])


def read_traits_csv(path) -> list[TraitRecord]:
    records = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            records.append(TraitRecord(
                instance_id=int(row["instance_id"]),
                length_cm=float(row["length_cm"]) if row["length_cm"] else None,
                width_cm=float(row["width_cm"]) if row["width_cm"] else None,
                volume_cm3=float(row["volume_cm3"]) if row["volume_cm3"] else None,
                n_points_raw=int(row["n_points_raw"]),
                n_points_final=int(row["n_points_final"]),
                group=row.get("group", ""),
                flags=row.get("flags", ""),
            ))
    return records
