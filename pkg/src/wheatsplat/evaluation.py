"""Alignment, cross-modality instance matching, and evaluation statistics.

Covers rigid registration of reference scans into the scene frame (Kabsch
plus trimmed ICP), assignment of reference points to extracted instances,
2D mask agreement metrics, trait regression statistics, one-way ANOVA,
robust outlier filtering (FAST-MCD), and image PSNR/SSIM.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
from scipy.stats import chi2, f as f_dist, pearsonr

from .errors import AlignmentError, EvaluationError, InputError
from .scene_io import GaussianScene, InstanceMap

logger = logging.getLogger(__name__)

MCD_CHI2_GATE = 5.9915  # chi-square quantile(0.95, 2 dof), 4 decimals


# ---------------------------------------------------------------------------
# Rigid transforms and registration
# ---------------------------------------------------------------------------

@dataclass
class RigidTransform:
    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,)
    scale: float = 1.0

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def validate(self) -> None:
        r = np.asarray(self.rotation, dtype=np.float64)
        if r.shape != (3, 3):
            raise AlignmentError("rotation must be 3x3")
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-6:
            raise AlignmentError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise AlignmentError("rotation determinant is not +1")

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return self.scale * points @ self.rotation.T + self.translation

    def compose(self, inner: "RigidTransform") -> "RigidTransform":
        """Transform equivalent to applying ``inner`` first, then ``self``."""
        return RigidTransform(
            rotation=self.rotation @ inner.rotation,
            translation=self.scale * self.rotation @ inner.translation
            + self.translation,
            scale=self.scale * inner.scale,
        )

    def inverse(self) -> "RigidTransform":
        inv_scale = 1.0 / self.scale
        return RigidTransform(
            rotation=self.rotation.T,
            translation=-inv_scale * self.rotation.T @ self.translation,
            scale=inv_scale,
        )

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.tolist(),
                "translation": self.translation.tolist(),
                "scale": float(self.scale)}

    @classmethod
    def from_dict(cls, data: dict) -> "RigidTransform":
        t = cls(rotation=np.asarray(data["rotation"], dtype=np.float64),
                translation=np.asarray(data["translation"], dtype=np.float64),
                scale=float(data.get("scale", 1.0)))
        t.validate()
        return t


def kabsch_align(source_pts: np.ndarray, target_pts: np.ndarray,
                 with_scale: bool = False) -> RigidTransform:
    """Least-squares rigid (optionally similarity) transform between paired
    points, via SVD of the cross-covariance with reflection correction."""
    src = np.asarray(source_pts, dtype=np.float64)
    dst = np.asarray(target_pts, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise AlignmentError("paired point lists must both be (N, 3)")
    if len(src) < 3:
        raise AlignmentError("at least 3 point pairs required")
    src_mean = src.mean(axis=0)
    dst_mean = dst.mean(axis=0)
    src_c = src - src_mean
    dst_c = dst - dst_mean
    sv = np.linalg.svd(src_c, compute_uv=False)
    if sv[1] <= 1e-12 * max(sv[0], 1.0):
        raise AlignmentError("point pairs are collinear or degenerate")
    u, s, vt = np.linalg.svd(src_c.T @ dst_c)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    flip = np.ones(3)
    flip[-1] = d
    rotation = vt.T @ (flip[:, None] * u.T)
    if with_scale:
        scale = float((s * flip).sum() / (src_c ** 2).sum())
    else:
        scale = 1.0
    translation = dst_mean - scale * rotation @ src_mean
    return RigidTransform(rotation=rotation, translation=translation,
                          scale=scale)


@dataclass
class IcpConfig:
    max_iterations: int = 50
    trim_fraction: float = 0.8
    min_improvement: float = 1e-6  # scene units of trimmed RMS

    def __post_init__(self) -> None:
        if not 0.0 < self.trim_fraction <= 1.0:
            raise InputError("trim_fraction must be in (0, 1]")
        if self.max_iterations < 1:
            raise InputError("max_iterations must be >= 1")


def icp_align(source_cloud: np.ndarray, target_cloud: np.ndarray,
              init: RigidTransform | None = None,
              config: IcpConfig | None = None
              ) -> tuple[RigidTransform, dict]:
    """Trimmed point-to-point ICP refining ``init`` (identity by default).

    Each iteration matches transformed source points to their nearest
    target neighbor, keeps the closest ``trim_fraction`` of pairs, and
    applies a Kabsch update.  Iteration stops after ``max_iterations`` or
    when the trimmed RMS improves by less than ``min_improvement``.
    Non-convergence is not an error: the best transform seen is returned
    together with diagnostics (iterations, rms_history, final trimmed RMS,
    converged flag, and a high_residual flag set when the final RMS
    exceeds 5% of the target bounding-box diagonal).
    """
    src = np.asarray(source_cloud, dtype=np.float64)
    dst = np.asarray(target_cloud, dtype=np.float64)
    if len(src) < 100 or len(dst) < 100:
        raise AlignmentError("ICP requires at least 100 points per cloud")
    config = config or IcpConfig()
    current = init or RigidTransform.identity()
    tree = cKDTree(dst)
    n_keep = max(3, int(round(config.trim_fraction * len(src))))
    diag = float(np.linalg.norm(dst.max(axis=0) - dst.min(axis=0)))

    def trimmed_match(transform: RigidTransform):
        moved = transform.apply(src)
        dists, nearest = tree.query(moved)
        order = np.argsort(dists, kind="stable")[:n_keep]
        rms = float(np.sqrt(np.mean(dists[order] ** 2)))
        return rms, moved[order], dst[nearest[order]]

    best_rms, best = np.inf, current
    history: list[float] = []
    converged = False
    for _ in range(config.max_iterations):
        rms, moved, matched = trimmed_match(current)
        history.append(rms)
        if rms < best_rms:
            best_rms, best = rms, current
        if len(history) >= 2 and history[-2] - rms < config.min_improvement:
            converged = True
            break
        current = kabsch_align(moved, matched).compose(current)
    else:
        rms, _, _ = trimmed_match(current)
        history.append(rms)
        if rms < best_rms:
            best_rms, best = rms, current

    diagnostics = {
        "iterations": len(history),
        "rms_history": history,
        "rms": best_rms,
        "converged": converged,
        "high_residual": bool(best_rms > 0.05 * diag),
        "trimmed_pairs": n_keep,
    }
    return best, diagnostics


# ---------------------------------------------------------------------------
# Cross-modality instance matching
# ---------------------------------------------------------------------------

@dataclass
class OrientedBox:
    center: np.ndarray  # (3,)
    axes: np.ndarray  # (3, 3) rows are unit axes
    half_extents: np.ndarray  # (3,) buffer included

    def contains(self, points: np.ndarray) -> np.ndarray:
        local = np.abs((points - self.center) @ self.axes.T)
        return np.all(local <= self.half_extents + 1e-12, axis=1)


@dataclass
class InstanceMatch:
    instance_id: int
    extracted_points: np.ndarray  # (N, 3)
    reference_points: np.ndarray  # (M, 3) cropped + box-assigned
    obb: OrientedBox


def _pca_obb(points: np.ndarray, buffer_units: float) -> OrientedBox:
    from .traits import principal_axes

    center, axes, _ = principal_axes(points)
    local = np.abs((points - center) @ axes.T)
    half = local.max(axis=0) + buffer_units
    return OrientedBox(center=center, axes=axes, half_extents=half)


def match_instances(scene: GaussianScene, instance_map: InstanceMap,
                    reference_cloud: np.ndarray, crop_dist_cm: float = 1.5,
                    buffer_cm: float = 1.0) -> list[InstanceMatch]:
    """Assign aligned reference points to extracted instances.

    Reference points farther than ``crop_dist_cm`` from every extracted
    point are dropped.  Each instance gets a PCA-aligned oriented bounding
    box grown by ``buffer_cm``; surviving reference points inside exactly
    one box join that instance, and points inside several boxes go to the
    instance whose own points are nearest.
    """
    instance_map.validate_against(scene)
    ref = np.asarray(reference_cloud, dtype=np.float64)
    if ref.ndim != 2 or ref.shape[1] != 3:
        raise InputError("reference cloud must be (N, 3)")
    ids = instance_map.instance_ids()
    if not ids:
        raise EvaluationError("no extracted instances to match against")
    crop = crop_dist_cm / scene.unit_scale
    buffer_units = buffer_cm / scene.unit_scale

    inst_points = {iid: scene.positions[instance_map.members[iid]]
                   for iid in ids}
    all_pts = np.concatenate([inst_points[iid] for iid in ids], axis=0)
    dists, _ = cKDTree(all_pts).query(ref)
    kept = ref[dists <= crop]
    if len(kept) == 0:
        raise EvaluationError(
            f"no reference points within {crop_dist_cm} cm of any instance")

    boxes = {iid: _pca_obb(inst_points[iid], buffer_units) for iid in ids}
    inside = np.stack([boxes[iid].contains(kept) for iid in ids])  # (I, M)
    n_boxes = inside.sum(axis=0)
    owner = np.full(len(kept), -1, dtype=np.int64)
    for row, iid in enumerate(ids):
        owner[(n_boxes == 1) & inside[row]] = iid

    contested = np.nonzero(n_boxes > 1)[0]
    if contested.size:
        trees = {iid: cKDTree(inst_points[iid]) for iid in ids}
        for m in contested:
            candidates = [ids[row] for row in range(len(ids)) if inside[row, m]]
            nearest = [(trees[iid].query(kept[m])[0], iid) for iid in candidates]
            owner[m] = min(nearest)[1]

    matches = []
    for iid in ids:
        matches.append(InstanceMatch(
            instance_id=iid,
            extracted_points=inst_points[iid],
            reference_points=kept[owner == iid],
            obb=boxes[iid],
        ))
    return matches


# ---------------------------------------------------------------------------
# Mask and image metrics
# ---------------------------------------------------------------------------

def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def _windowed_mean(image: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable Gaussian-weighted mean, valid window positions only."""
    pad = len(kernel) // 2
    out = ndimage.correlate1d(image, kernel, axis=0, mode="constant")
    out = ndimage.correlate1d(out, kernel, axis=1, mode="constant")
    return out[pad:image.shape[0] - pad, pad:image.shape[1] - pad]


def ssim(a: np.ndarray, b: np.ndarray, window: int = 11, sigma: float = 1.5,
         c1: float = 1e-4, c2: float = 9e-4) -> float:
    """Mean structural similarity over valid window positions, range-1 data.

    The window shrinks to the largest odd size fitting the image when the
    image is smaller than 11 pixels on a side.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise InputError("images must share one 2D shape")
    window = min(window, a.shape[0], a.shape[1])
    if window % 2 == 0:
        window -= 1
    if window < 1:
        raise InputError("image too small for SSIM")
    kernel = _gaussian_kernel(window, sigma)
    mu_a = _windowed_mean(a, kernel)
    mu_b = _windowed_mean(b, kernel)
    var_a = _windowed_mean(a * a, kernel) - mu_a ** 2
    var_b = _windowed_mean(b * b, kernel) - mu_b ** 2
    cov = _windowed_mean(a * b, kernel) - mu_a * mu_b
    score = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)
             / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)))
    return float(score.mean())


def mask_metrics(pred: np.ndarray, gt: np.ndarray) -> dict:
    """IoU, precision, recall, F1, MSE, and SSIM for two binary masks.

    Two empty masks agree vacuously: iou/precision/recall/f1 are 1 and the
    result carries ``vacuous: True``.
    """
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise InputError("masks must share one shape")
    tp = float(np.count_nonzero(pred & gt))
    fp = float(np.count_nonzero(pred & ~gt))
    fn = float(np.count_nonzero(~pred & gt))
    vacuous = tp + fp + fn == 0
    if vacuous:
        logger.warning("mask_metrics: both masks empty, vacuous agreement")
        iou = precision = recall = f1 = 1.0
    else:
        iou = tp / (tp + fp + fn)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = (2 * precision * recall / (precision + recall)
              if precision + recall else 0.0)
    a = pred.astype(np.float64)
    b = gt.astype(np.float64)
    return {
        "iou": iou, "precision": precision, "recall": recall, "f1": f1,
        "mse": float(np.mean((a - b) ** 2)), "ssim": ssim(a, b),
        "vacuous": vacuous,
    }


def image_psnr_ssim(a: np.ndarray, b: np.ndarray) -> dict:
    """PSNR (dB, capped at 100) and SSIM for two float images in [0, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InputError("images must share one shape")
    mse = float(np.mean((a - b) ** 2))
    psnr = 100.0 if mse == 0.0 else min(100.0, float(10.0 * np.log10(1.0 / mse)))
    return {"psnr": psnr, "ssim": ssim(a, b)}


# ---------------------------------------------------------------------------
# Regression statistics, ANOVA, robust filtering
# ---------------------------------------------------------------------------

@dataclass
class TraitStats:
    rho: float
    p_value: float
    mae: float
    mape: float
    n: int

    def __post_init__(self) -> None:
        if self.mape < 0 or abs(self.rho) > 1 + 1e-12:
            raise EvaluationError("inconsistent regression statistics")


@dataclass
class RegressionReport:
    level: str  # per_instance | per_group
    stats: dict[str, TraitStats] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"level": self.level,
                "stats": {k: vars(v) for k, v in self.stats.items()}}


def _pair_stats(est: np.ndarray, ref: np.ndarray) -> TraitStats:
    if len(est) < 3:
        raise EvaluationError("at least 3 paired values required")
    rho, p_value = pearsonr(est, ref)
    mae = float(np.mean(np.abs(est - ref)))
    nonzero = ref != 0
    if not nonzero.all():
        logger.warning("regression: excluded %d zero-reference pairs from MAPE",
                       int((~nonzero).sum()))
    if nonzero.any():
        mape = float(100.0 * np.mean(np.abs(est[nonzero] - ref[nonzero])
                                     / np.abs(ref[nonzero])))
    else:
        mape = float("nan")
    return TraitStats(rho=float(rho), p_value=float(p_value), mae=mae,
                      mape=mape, n=len(est))


def regression_report(est: dict[str, np.ndarray], ref: dict[str, np.ndarray],
                      level: str = "per_instance",
                      groups: list | None = None) -> RegressionReport:
    """Pearson rho (two-sided t-test p), MAE, and MAPE per trait.

    ``est`` and ``ref`` map trait names to aligned value arrays.  At the
    per_group level both series are first averaged within each group and
    the statistics are computed over the group means.
    """
    if level not in ("per_instance", "per_group"):
        raise InputError(f"unknown level '{level}'")
    if set(est) != set(ref):
        raise InputError("est and ref must cover the same traits")
    report = RegressionReport(level=level)
    for trait in sorted(est):
        e = np.asarray(est[trait], dtype=np.float64)
        r = np.asarray(ref[trait], dtype=np.float64)
        if e.shape != r.shape:
            raise InputError(f"trait '{trait}': est/ref lengths differ")
        if level == "per_group":
            if groups is None or len(groups) != len(e):
                raise InputError("per_group level requires a group per pair")
            keys = sorted(set(groups))
            sel = [np.asarray([g == key for g in groups]) for key in keys]
            e = np.array([e[s].mean() for s in sel])
            r = np.array([r[s].mean() for s in sel])
        report.stats[trait] = _pair_stats(e, r)
    return report


def anova_f(values, groups) -> dict:
    """One-way ANOVA: F statistic, p-value, and degrees of freedom."""
    values = np.asarray(values, dtype=np.float64)
    if len(values) != len(groups):
        raise InputError("values and groups must align")
    keys = sorted(set(groups))
    members = [values[np.asarray([g == key for g in groups])] for key in keys]
    if len(members) < 2 or any(len(m) < 2 for m in members):
        raise EvaluationError("ANOVA needs >= 2 groups with >= 2 values each")
    grand = values.mean()
    ss_between = sum(len(m) * (m.mean() - grand) ** 2 for m in members)
    ss_within = sum(((m - m.mean()) ** 2).sum() for m in members)
    df_between = len(members) - 1
    df_within = len(values) - len(members)
    ms_between = ss_between / df_between
    if ss_within == 0.0:
        logger.warning("ANOVA: zero within-group variance")
        return {"f_statistic": float("inf"), "p_value": 0.0,
                "df_between": df_between, "df_within": df_within}
    f_stat = float(ms_between / (ss_within / df_within))
    p_value = float(f_dist.sf(f_stat, df_between, df_within))
    return {"f_statistic": f_stat, "p_value": p_value,
            "df_between": df_between, "df_within": df_within}


def _mahalanobis_sq(x: np.ndarray, mean: np.ndarray,
                    cov: np.ndarray) -> np.ndarray:
    diff = x - mean
    solved = np.linalg.solve(cov, diff.T)
    return np.einsum("ij,ji->i", diff, solved)


def mcd_outlier_filter(pairs, threshold: float = MCD_CHI2_GATE,
                       n_starts: int = 500, seed: int = 0) -> np.ndarray:
    """Indices of pairs kept by a FAST-MCD robust covariance gate.

    Runs ``n_starts`` deterministically seeded starts of subset size
    h = floor((n+3)/2), iterating C-steps to convergence, keeps the
    lowest-determinant covariance, applies the median-chi-square
    consistency correction, and keeps pairs whose squared Mahalanobis
    distance is at most ``threshold``.  A singular robust covariance
    falls back to a trimmed classical estimate with a warning.
    """
    x = np.asarray(pairs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 2:
        raise InputError("pairs must be (N, 2)")
    n, p = x.shape
    if n < 10:
        raise EvaluationError("MCD requires at least 10 pairs")
    h = (n + 3) // 2

    def estimate(subset: np.ndarray):
        mean = x[subset].mean(axis=0)
        diff = x[subset] - mean
        cov = diff.T @ diff / (len(subset) - 1)
        return mean, cov

    def c_steps(mean, cov):
        prev: np.ndarray | None = None
        for _ in range(100):
            d2 = _mahalanobis_sq(x, mean, cov)
            subset = np.sort(np.argsort(d2, kind="stable")[:h])
            if prev is not None and np.array_equal(subset, prev):
                break
            prev = subset
            mean, cov = estimate(subset)
        return mean, cov

    best_det, best = np.inf, None
    for start in range(n_starts):
        rng = np.random.default_rng([seed, start])
        subset = rng.choice(n, size=p + 1, replace=False)
        mean, cov = estimate(subset)
        grow = p + 1
        while np.linalg.det(cov) <= 0 and grow < n:
            grow += 1
            subset = rng.choice(n, size=grow, replace=False)
            mean, cov = estimate(subset)
        if np.linalg.det(cov) <= 0:
            continue
        mean, cov = c_steps(mean, cov)
        det = np.linalg.det(cov)
        if det < best_det:
            best_det, best = det, (mean, cov)

    if best is None or best_det <= np.finfo(np.float64).tiny:
        logger.warning("MCD covariance singular, falling back to trimmed "
                       "classical estimator")
        mean = x.mean(axis=0)
        cov = np.cov(x, rowvar=False)
        d2 = _mahalanobis_sq(x, mean, cov)
        subset = np.sort(np.argsort(d2, kind="stable")[:h])
        mean = x[subset].mean(axis=0)
        diff = x[subset] - mean
        cov = diff.T @ diff / (h - 1)
    else:
        mean, cov = best

    d2 = _mahalanobis_sq(x, mean, cov)
    cov = cov * (np.median(d2) / chi2.ppf(0.5, p))
    d2 = _mahalanobis_sq(x, mean, cov)
    return np.nonzero(d2 <= threshold)[0]
