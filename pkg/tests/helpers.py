"""Shared fixtures: random scene builders and naive reference renderers.

The naive renderers deliberately avoid the tiled code path: one walks pixels
and the other walks splats over full-image windows, both applying the
documented blending rules directly, so they can serve as independent oracles
for the tiled compositor.
"""
from __future__ import annotations

import numpy as np

from wheatsplat.rasterizer import (ALPHA_CLAMP, ALPHA_SKIP, T_STOP, Splat2D,
                                   splat_rect)
from wheatsplat.scene_io import GaussianScene, View
from wheatsplat.synthbench import make_overhead_views


def random_scene(n: int, rng: np.random.Generator, sh_coeffs: int = 1,
                 center: np.ndarray | None = None,
                 spread: float = 0.3) -> GaussianScene:
    """Random well-conditioned scene scattered near ``center``."""
    center = np.array([0.0, 0.0, 0.55]) if center is None else center
    quat = rng.normal(size=(n, 4))
    quat /= np.linalg.norm(quat, axis=1, keepdims=True)
    return GaussianScene(
        positions=center + rng.uniform(-spread, spread, (n, 3)),
        scale_log=rng.uniform(np.log(0.003), np.log(0.03), (n, 3)),
        rotation=quat,
        opacity_logit=rng.normal(0.5, 1.5, n),
        sh_coeffs=rng.normal(0.0, 0.5, (n, 3, sh_coeffs)),
        instance_id=np.zeros(n, dtype=np.int64),
    )


def one_view(image_size: int = 64, n_views: int = 1,
             ring_radius: float = 0.35) -> list[View]:
    return make_overhead_views(n_views, image_size, ring_radius=ring_radius)


def naive_composite_pixels(splats: Splat2D, x_per_splat: np.ndarray,
                           width: int, height: int) -> np.ndarray:
    """Per-pixel front-to-back blending, straight from the blending rules."""
    order = np.lexsort((splats.gaussian_index, splats.depth))
    rects = splat_rect(splats.mean2d, splats.radius, width, height)
    channels = x_per_splat.shape[1]
    image = np.zeros((height, width, channels))
    for py in range(height):
        for px in range(width):
            t = 1.0
            acc = np.zeros(channels)
            for i in order:
                x0, x1, y0, y1 = rects[i]
                if not (x0 <= px < x1 and y0 <= py < y1):
                    continue
                if t < T_STOP:
                    break
                dx = px - splats.mean2d[i, 0]
                dy = py - splats.mean2d[i, 1]
                ca, cb, cc = splats.conic[i]
                q = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
                alpha = min(ALPHA_CLAMP, splats.opacity[i] * np.exp(-0.5 * q))
                if alpha < ALPHA_SKIP:
                    continue
                acc += alpha * t * x_per_splat[i]
                t *= 1.0 - alpha
            image[py, px] = acc
    return image


def naive_composite_splats(splats: Splat2D, x_per_splat: np.ndarray,
                           width: int, height: int) -> np.ndarray:
    """Splat-sequential blending over full-image windows (no tiling)."""
    order = np.lexsort((splats.gaussian_index, splats.depth))
    rects = splat_rect(splats.mean2d, splats.radius, width, height)
    channels = x_per_splat.shape[1]
    image = np.zeros((height, width, channels))
    trans = np.ones((height, width))
    for i in order:
        x0, x1, y0, y1 = rects[i]
        xs = np.arange(x0, x1)[None, :] - splats.mean2d[i, 0]
        ys = np.arange(y0, y1)[:, None] - splats.mean2d[i, 1]
        ca, cb, cc = splats.conic[i]
        q = ca * xs ** 2 + 2.0 * cb * xs * ys + cc * ys ** 2
        alpha = np.minimum(ALPHA_CLAMP, splats.opacity[i] * np.exp(-0.5 * q))
        window = trans[y0:y1, x0:x1]
        gate = (alpha >= ALPHA_SKIP) & (window >= T_STOP)
        alpha = np.where(gate, alpha, 0.0)
        image[y0:y1, x0:x1] += (alpha * window)[:, :, None] * x_per_splat[i]
        window *= 1.0 - alpha
    return image
