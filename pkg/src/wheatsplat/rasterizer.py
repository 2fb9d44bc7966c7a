"""Forward splat rasterization: projection, alpha compositing, vote ledgers.

Per pixel the compositor evaluates X = sum_k x_k * alpha_k * T_k over
depth-sorted splats, where T_k is the transmittance accumulated in front of
splat k.  The same pass produces blended-weight images, alpha images, binary
label masks, and per-Gaussian foreground/background contribution sums used by
the label solver.

Fixed rasterization constants (chosen to mirror the ubiquitous splat
renderer defaults so pre-trained scenes render comparably):

* alpha clamped at 0.99,
* contributions with alpha < 1/255 are skipped,
* pixels stop accumulating once transmittance drops below 1e-4,
* a +0.3 low-pass is added to both 2D covariance diagonals before inversion,
* splat radius = ceil(3 * sqrt(max eigenvalue)) with support clipped to the
  integer rectangle [floor(mean - radius), floor(mean + radius)] on each axis.

Pixels are sampled at integer grid coordinates, i.e. pixel (i, j) samples the
continuous image plane at exactly (i, j); the principal point lives in the
same frame.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import FormatError, InputError
from .scene_io import GaussianScene, View

ALPHA_CLAMP = 0.99
ALPHA_SKIP = 1.0 / 255.0
T_STOP = 1e-4
LOWPASS = 0.3
TILE = 16

# Real SH basis constants, degrees 0..3 (standard splat convention).
_SH_C0 = 0.28209479177387814
_SH_C1 = 0.4886025119029199
_SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
          -1.0925484305920792, 0.5462742152960396)
_SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
          0.3731763325901154, -0.4570457994644658, 1.445305721320277,
          -0.5900435899266435)


@dataclass
class Splat2D:
    """Depth-sorted batch of projected Gaussians for one view.

    Fields are arrays over the surviving (non-culled) splats; row i of every
    array describes the same splat.
    """

    gaussian_index: np.ndarray  # (M,)  int64, index into the scene
    mean2d: np.ndarray          # (M, 2) pixels
    conic: np.ndarray           # (M, 3) inverse 2D covariance (a, b, c)
    depth: np.ndarray           # (M,)  camera z, scene units
    radius: np.ndarray          # (M,)  int64 pixels, >= 1
    opacity: np.ndarray         # (M,)  activated opacity

    def __len__(self) -> int:
        return len(self.gaussian_index)


@dataclass
class RenderOutput:
    """Blended images from one rasterization pass."""

    weight_image: np.ndarray          # (H, W) or (H, W, C): sum x*alpha*T
    alpha_image: np.ndarray           # (H, W): sum alpha*T
    rgb_image: np.ndarray | None = None


class ContributionLedger:
    """Per-Gaussian blended-contribution sums split by mask membership.

    s_plus[k] accumulates alpha*T over mask-foreground pixels and s_minus[k]
    over background pixels, across however many views were rasterized into
    the ledger.  Gate rules match the compositor exactly, so
    s_plus + s_minus equals each Gaussian's total blended contribution.
    """

    def __init__(self, n_gaussians: int):
        self.s_plus = np.zeros(n_gaussians)
        self.s_minus = np.zeros(n_gaussians)
        self.n_views = 0

    def total(self) -> np.ndarray:
        return self.s_plus + self.s_minus

    def merge(self, other: "ContributionLedger") -> "ContributionLedger":
        if len(self.s_plus) != len(other.s_plus):
            raise InputError("cannot merge ledgers of different scene sizes")
        self.s_plus += other.s_plus
        self.s_minus += other.s_minus
        self.n_views += other.n_views
        return self


def quaternions_to_matrices(q: np.ndarray) -> np.ndarray:
    """(K, 4) unit quaternions (w, x, y, z) -> (K, 3, 3) rotation matrices."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    m = np.empty((len(q), 3, 3))
    m[:, 0, 0] = 1 - 2 * (y * y + z * z)
    m[:, 0, 1] = 2 * (x * y - w * z)
    m[:, 0, 2] = 2 * (x * z + w * y)
    m[:, 1, 0] = 2 * (x * y + w * z)
    m[:, 1, 1] = 1 - 2 * (x * x + z * z)
    m[:, 1, 2] = 2 * (y * z - w * x)
    m[:, 2, 0] = 2 * (x * z - w * y)
    m[:, 2, 1] = 2 * (y * z + w * x)
    m[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def splat_rect(mean2d: np.ndarray, radius: np.ndarray,
               width: int, height: int) -> np.ndarray:
    """Integer support rectangles (x0, x1, y0, y1), half-open, image-clipped."""
    x0 = np.maximum(0, np.floor(mean2d[:, 0] - radius)).astype(np.int64)
    x1 = np.minimum(width, np.floor(mean2d[:, 0] + radius).astype(np.int64) + 1)
    y0 = np.maximum(0, np.floor(mean2d[:, 1] - radius)).astype(np.int64)
    y1 = np.minimum(height, np.floor(mean2d[:, 1] + radius).astype(np.int64) + 1)
    return np.stack([x0, x1, y0, y1], axis=1)


def project_gaussians(scene: GaussianScene, view: View,
                      near: float = 0.01) -> Splat2D:
    """Project scene Gaussians into a view; cull behind-camera and off-image.

    2D covariance follows the EWA chain: world covariance
    Sigma = R diag(s)^2 R^T, camera-frame Sigma_c = W Sigma W^T, then
    Sigma' = J Sigma_c J^T with J the perspective Jacobian at the Gaussian
    center.  A +0.3 low-pass is added to the diagonal before inversion.
    Output is sorted by (depth, gaussian index).
    """
    if near <= 0:
        raise InputError("near plane must be positive")
    k = len(scene)
    if k == 0:
        return _empty_splats()

    rot_w2c = view.rotation
    cam = scene.positions @ rot_w2c.T + view.translation
    in_front = cam[:, 2] > near
    if not np.any(in_front):
        return _empty_splats()

    idx = np.nonzero(in_front)[0]
    cam = cam[idx]
    x, y, z = cam[:, 0], cam[:, 1], cam[:, 2]

    rmat = quaternions_to_matrices(scene.rotation[idx])
    s = np.exp(scene.scale_log[idx])
    msqrt = rmat * s[:, None, :]                       # R diag(s)
    cov_world = msqrt @ msqrt.transpose(0, 2, 1)        # (M, 3, 3)
    cov_cam = np.einsum("ij,kjl,ml->kim", rot_w2c, cov_world, rot_w2c)

    inv_z = 1.0 / z
    jac = np.zeros((len(idx), 2, 3))
    jac[:, 0, 0] = view.fx * inv_z
    jac[:, 0, 2] = -view.fx * x * inv_z ** 2
    jac[:, 1, 1] = view.fy * inv_z
    jac[:, 1, 2] = -view.fy * y * inv_z ** 2
    cov2d = jac @ cov_cam @ jac.transpose(0, 2, 1)      # (M, 2, 2)
    cov2d[:, 0, 0] += LOWPASS
    cov2d[:, 1, 1] += LOWPASS

    a = cov2d[:, 0, 0]
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1]
    det = a * c - b * b
    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = np.maximum(1, np.ceil(3.0 * np.sqrt(lam_max)).astype(np.int64))

    mean2d = np.stack([view.fx * x * inv_z + view.cx,
                       view.fy * y * inv_z + view.cy], axis=1)
    rect = splat_rect(mean2d, radius, view.width, view.height)
    visible = (det > 0) & (rect[:, 0] < rect[:, 1]) & (rect[:, 2] < rect[:, 3])
    if not np.any(visible):
        return _empty_splats()

    idx, mean2d, radius = idx[visible], mean2d[visible], radius[visible]
    a, b, c, det, z = a[visible], b[visible], c[visible], det[visible], z[visible]
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    opacity = 1.0 / (1.0 + np.exp(-scene.opacity_logit[idx]))

    order = np.lexsort((idx, z))
    return Splat2D(gaussian_index=idx[order].astype(np.int64),
                   mean2d=mean2d[order], conic=conic[order],
                   depth=z[order], radius=radius[order],
                   opacity=opacity[order])


def _empty_splats() -> Splat2D:
    return Splat2D(np.zeros(0, dtype=np.int64), np.zeros((0, 2)),
                   np.zeros((0, 3)), np.zeros(0), np.zeros(0, dtype=np.int64),
                   np.zeros(0))


def _composite(splats: Splat2D, x_per_splat: np.ndarray, width: int, height: int,
               fg_mask: np.ndarray | None = None,
               ledger: ContributionLedger | None = None
               ) -> tuple[np.ndarray, np.ndarray]:
    """Tiled front-to-back compositor shared by every render mode.

    ``x_per_splat`` is (M, C).  When ``ledger`` is given, each splat's
    contribution alpha*T is added to s_plus over ``fg_mask`` pixels and to
    s_minus elsewhere.  Tiles are processed in row-major order and splats in
    depth order within each tile, so results are deterministic.
    """
    n_channels = x_per_splat.shape[1]
    weight = np.zeros((height, width, n_channels))
    alpha_image = np.zeros((height, width))
    trans = np.ones((height, width))

    order = np.lexsort((splats.gaussian_index, splats.depth))
    rects = splat_rect(splats.mean2d, splats.radius, width, height)

    n_tx = (width + TILE - 1) // TILE
    n_ty = (height + TILE - 1) // TILE
    tile_lists: list[list[int]] = [[] for _ in range(n_tx * n_ty)]
    for i in order:
        x0, x1, y0, y1 = rects[i]
        for ty in range(y0 // TILE, (y1 - 1) // TILE + 1):
            for tx in range(x0 // TILE, (x1 - 1) // TILE + 1):
                tile_lists[ty * n_tx + tx].append(i)

    for ty in range(n_ty):
        py0, py1 = ty * TILE, min((ty + 1) * TILE, height)
        for tx in range(n_tx):
            ids = tile_lists[ty * n_tx + tx]
            if not ids:
                continue
            px0, px1 = tx * TILE, min((tx + 1) * TILE, width)
            t_tile = trans[py0:py1, px0:px1]
            w_tile = weight[py0:py1, px0:px1]
            a_tile = alpha_image[py0:py1, px0:px1]
            fg_tile = fg_mask[py0:py1, px0:px1] if fg_mask is not None else None
            for i in ids:
                x0, x1, y0, y1 = rects[i]
                wx0, wx1 = max(x0, px0), min(x1, px1)
                wy0, wy1 = max(y0, py0), min(y1, py1)
                dx = np.arange(wx0, wx1) - splats.mean2d[i, 0]
                dy = np.arange(wy0, wy1) - splats.mean2d[i, 1]
                ca, cb, cc = splats.conic[i]
                q = (ca * dx[None, :] ** 2
                     + 2.0 * cb * dy[:, None] * dx[None, :]
                     + cc * dy[:, None] ** 2)
                alpha = np.minimum(ALPHA_CLAMP, splats.opacity[i] * np.exp(-0.5 * q))
                tw = t_tile[wy0 - py0:wy1 - py0, wx0 - px0:wx1 - px0]
                live = (alpha >= ALPHA_SKIP) & (tw >= T_STOP)
                if not live.any():
                    continue
                a_eff = np.where(live, alpha, 0.0)
                contrib = a_eff * tw
                w_tile[wy0 - py0:wy1 - py0, wx0 - px0:wx1 - px0] += (
                    contrib[:, :, None] * x_per_splat[i])
                a_tile[wy0 - py0:wy1 - py0, wx0 - px0:wx1 - px0] += contrib
                tw *= 1.0 - a_eff
                if ledger is not None:
                    k = splats.gaussian_index[i]
                    fgw = fg_tile[wy0 - py0:wy1 - py0, wx0 - px0:wx1 - px0]
                    plus = contrib[fgw].sum()
                    ledger.s_plus[k] += plus
                    ledger.s_minus[k] += contrib.sum() - plus
    return weight, alpha_image


@dataclass
class SplatContributions:
    """Flattened compositing results of one view, for repeated re-renders.

    One sequential compositing pass freezes every live (splat, pixel)
    contribution alpha*T into parallel arrays.  Rendering any per-Gaussian
    scalar, or accumulating a mask ledger, then reduces to one vectorized
    scatter-add that reproduces the compositor's per-entry values (summation
    order may differ, so images agree to float rounding, not bitwise).
    """

    width: int
    height: int
    n_gaussians: int
    gaussian_index: np.ndarray  # (nnz,) int64
    pixel_index: np.ndarray     # (nnz,) int64, row-major y * width + x
    contribution: np.ndarray    # (nnz,) alpha * T
    alpha_image: np.ndarray     # (H, W) sum alpha * T

    def render_scalar(self, per_gaussian_x: np.ndarray) -> np.ndarray:
        x = np.asarray(per_gaussian_x, dtype=np.float64)
        if x.shape != (self.n_gaussians,):
            raise InputError("per-Gaussian x must be (K,)")
        vals = self.contribution * x[self.gaussian_index]
        flat = np.bincount(self.pixel_index, weights=vals,
                           minlength=self.width * self.height)
        return flat.reshape(self.height, self.width)

    def render_mask(self, labels: np.ndarray, threshold: float = 0.5) -> np.ndarray:
        return self.render_scalar(np.asarray(labels, dtype=np.float64)) >= threshold

    def ledger_terms(self, fg_mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(s_plus, s_minus) per Gaussian for one view's foreground mask."""
        fg_mask = np.asarray(fg_mask, dtype=bool)
        if fg_mask.shape != (self.height, self.width):
            raise InputError("mask shape does not match view size")
        inside = fg_mask.reshape(-1)[self.pixel_index]
        s_plus = np.bincount(self.gaussian_index,
                             weights=self.contribution * inside,
                             minlength=self.n_gaussians)
        s_minus = np.bincount(self.gaussian_index,
                              weights=self.contribution * ~inside,
                              minlength=self.n_gaussians)
        return s_plus, s_minus


def flatten_contributions(splats: Splat2D, view: View,
                          n_gaussians: int) -> SplatContributions:
    """Run the compositing pass once, recording every live contribution."""
    trans = np.ones((view.height, view.width))
    alpha_image = np.zeros((view.height, view.width))
    rects = splat_rect(splats.mean2d, splats.radius, view.width, view.height)
    order = np.lexsort((splats.gaussian_index, splats.depth))
    gidx: list[np.ndarray] = []
    pidx: list[np.ndarray] = []
    vals: list[np.ndarray] = []
    for i in order:
        x0, x1, y0, y1 = rects[i]
        dx = np.arange(x0, x1) - splats.mean2d[i, 0]
        dy = np.arange(y0, y1) - splats.mean2d[i, 1]
        ca, cb, cc = splats.conic[i]
        q = (ca * dx[None, :] ** 2
             + 2.0 * cb * dy[:, None] * dx[None, :]
             + cc * dy[:, None] ** 2)
        alpha = np.minimum(ALPHA_CLAMP, splats.opacity[i] * np.exp(-0.5 * q))
        tw = trans[y0:y1, x0:x1]
        live = (alpha >= ALPHA_SKIP) & (tw >= T_STOP)
        if not live.any():
            continue
        a_eff = np.where(live, alpha, 0.0)
        contrib = a_eff * tw
        ly, lx = np.nonzero(live)
        gidx.append(np.full(len(ly), splats.gaussian_index[i], dtype=np.int64))
        pidx.append((ly + y0) * view.width + (lx + x0))
        vals.append(contrib[ly, lx])
        alpha_image[y0:y1, x0:x1] += contrib
        tw *= 1.0 - a_eff
    if gidx:
        gi = np.concatenate(gidx)
        pi = np.concatenate(pidx)
        cv = np.concatenate(vals)
    else:
        gi = np.zeros(0, dtype=np.int64)
        pi = np.zeros(0, dtype=np.int64)
        cv = np.zeros(0)
    return SplatContributions(width=view.width, height=view.height,
                              n_gaussians=n_gaussians, gaussian_index=gi,
                              pixel_index=pi, contribution=cv,
                              alpha_image=alpha_image)


def rasterize(splats: Splat2D, per_gaussian_x: np.ndarray,
              view: View) -> RenderOutput:
    """Blend a per-Gaussian property into an image: X = sum x*alpha*T.

    ``per_gaussian_x`` is indexed by Gaussian index and may be (K,) for a
    scalar property or (K, C) for a multi-channel one.
    """
    x = np.asarray(per_gaussian_x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise InputError("per-Gaussian x values must be finite")
    squeeze = x.ndim == 1
    if squeeze:
        x = x[:, None]
    x_per_splat = x[splats.gaussian_index] if len(splats) else np.zeros((0, x.shape[1]))
    weight, alpha = _composite(splats, x_per_splat, view.width, view.height)
    if squeeze:
        weight = weight[:, :, 0]
    return RenderOutput(weight_image=weight, alpha_image=alpha)


def eval_sh(sh: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Evaluate per-channel SH coefficients along unit directions.

    ``sh`` is (K, 3, C) with C in {1, 4, 9, 16}; returns raw values before
    the +0.5 shift and clamp.
    """
    n_coeffs = sh.shape[2]
    if n_coeffs not in (1, 4, 9, 16):
        raise FormatError(f"unsupported SH coefficient count {n_coeffs}")
    out = _SH_C0 * sh[:, :, 0]
    if n_coeffs == 1:
        return out
    x, y, z = dirs[:, 0:1], dirs[:, 1:2], dirs[:, 2:3]
    out = out - _SH_C1 * y * sh[:, :, 1] + _SH_C1 * z * sh[:, :, 2] \
        - _SH_C1 * x * sh[:, :, 3]
    if n_coeffs == 4:
        return out
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    out = (out
           + _SH_C2[0] * xy * sh[:, :, 4]
           + _SH_C2[1] * yz * sh[:, :, 5]
           + _SH_C2[2] * (2.0 * zz - xx - yy) * sh[:, :, 6]
           + _SH_C2[3] * xz * sh[:, :, 7]
           + _SH_C2[4] * (xx - yy) * sh[:, :, 8])
    if n_coeffs == 9:
        return out
    out = (out
           + _SH_C3[0] * y * (3.0 * xx - yy) * sh[:, :, 9]
           + _SH_C3[1] * xy * z * sh[:, :, 10]
           + _SH_C3[2] * y * (4.0 * zz - xx - yy) * sh[:, :, 11]
           + _SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy) * sh[:, :, 12]
           + _SH_C3[4] * x * (4.0 * zz - xx - yy) * sh[:, :, 13]
           + _SH_C3[5] * z * (xx - yy) * sh[:, :, 14]
           + _SH_C3[6] * x * (xx - 3.0 * yy) * sh[:, :, 15])
    return out


def render_rgb(scene: GaussianScene, view: View, near: float = 0.01,
               splats: Splat2D | None = None) -> RenderOutput:
    """Render the scene's SH color: view-dependent color per Gaussian, blended."""
    if splats is None:
        splats = project_gaussians(scene, view, near)
    center = view.camera_center()
    dirs = scene.positions - center
    dirs = dirs / np.maximum(np.linalg.norm(dirs, axis=1, keepdims=True), 1e-12)
    colors = np.clip(eval_sh(scene.sh_coeffs, dirs) + 0.5, 0.0, None)
    x_per_splat = colors[splats.gaussian_index] if len(splats) else np.zeros((0, 3))
    rgb, alpha = _composite(splats, x_per_splat, view.width, view.height)
    return RenderOutput(weight_image=rgb, alpha_image=alpha, rgb_image=rgb)


def render_label_mask(scene: GaussianScene, view: View, labels: np.ndarray,
                      threshold: float = 0.5, near: float = 0.01,
                      splats: Splat2D | SplatContributions | None = None
                      ) -> np.ndarray:
    """Rasterize a binary label vector and threshold into a (H, W) bool mask.

    ``splats`` may be a projected batch or a flattened contribution cache;
    both reproduce the same blended weights.
    """
    labels = np.asarray(labels)
    if labels.shape[0] != len(scene):
        raise InputError("label vector length must equal scene size")
    if not 0.0 < threshold < 1.0:
        raise InputError("threshold must lie in (0, 1)")
    if isinstance(splats, SplatContributions):
        return splats.render_mask(labels, threshold)
    if splats is None:
        splats = project_gaussians(scene, view, near)
    out = rasterize(splats, labels.astype(np.float64), view)
    return out.weight_image >= threshold


def accumulate_contributions(
        scene: GaussianScene,
        views_with_masks: list[tuple[View, np.ndarray]],
        near: float = 0.01,
        splat_cache: dict[str, "Splat2D | SplatContributions"] | None = None
        ) -> ContributionLedger:
    """Accumulate per-Gaussian foreground/background vote sums over views.

    For every rasterized pixel, each Gaussian's blended contribution alpha*T
    is added to s_plus when the pixel is mask-foreground, else to s_minus.
    Cache entries may be projected batches or flattened contribution caches.
    """
    ledger = ContributionLedger(len(scene))
    ones = np.ones((len(scene), 1))
    for view, mask in views_with_masks:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (view.height, view.width):
            raise InputError(
                f"mask shape {mask.shape} does not match view '{view.id}' "
                f"({view.height}, {view.width})")
        if splat_cache is not None and view.id in splat_cache:
            splats = splat_cache[view.id]
        else:
            splats = project_gaussians(scene, view, near)
            if splat_cache is not None:
                splat_cache[view.id] = splats
        if isinstance(splats, SplatContributions):
            s_plus, s_minus = splats.ledger_terms(mask)
            ledger.s_plus += s_plus
            ledger.s_minus += s_minus
        else:
            x_per_splat = (ones[splats.gaussian_index] if len(splats)
                           else np.zeros((0, 1)))
            _composite(splats, x_per_splat, view.width, view.height,
                       fg_mask=mask, ledger=ledger)
        ledger.n_views += 1
    return ledger
