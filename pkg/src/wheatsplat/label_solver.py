"""Closed-form binary label assignment for one target instance.

Because blended weights never exceed 1 and masks are binary, the summed
absolute residual between a rendered label image and the provided masks is
exactly linear in the per-Gaussian labels.  Minimizing it therefore
decomposes per Gaussian into a weighted majority vote over that Gaussian's
foreground vs background contribution sums, shifted by a background bias.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .rasterizer import ContributionLedger, Splat2D, project_gaussians, rasterize
from .scene_io import GaussianScene, View


@dataclass
class SolverConfig:
    """Vote parameters.

    gamma in [-1, 1): a Gaussian is labeled foreground when its foreground
    share of total contribution exceeds (1 + gamma) / 2, so gamma = 0 is the
    unbiased majority vote and positive gamma biases toward background to
    absorb mask noise.  min_total_contribution suppresses labels on
    Gaussians that barely render anywhere.
    """

    gamma: float = 0.1
    min_total_contribution: float = 1e-4

    def __post_init__(self) -> None:
        if not -1.0 <= self.gamma < 1.0:
            raise InputError("gamma must lie in [-1, 1)")
        if self.min_total_contribution < 0:
            raise InputError("min_total_contribution must be >= 0")


@dataclass
class LabelAssignment:
    """Binary labels over Gaussian indices for one target instance."""

    labels: np.ndarray  # (K,) bool
    target_instance: int = 0

    def __len__(self) -> int:
        return len(self.labels)

    def indices(self) -> np.ndarray:
        return np.nonzero(self.labels)[0]


def solve_labels(ledger: ContributionLedger, config: SolverConfig,
                 eligible: np.ndarray | None = None,
                 target_instance: int = 0) -> LabelAssignment:
    """Weighted majority vote with background bias.

    W_k = 1 iff s_plus / (s_plus + s_minus) > (1 + gamma) / 2 and the total
    contribution reaches min_total_contribution.  ``eligible`` masks out
    Gaussians that may not be labeled (e.g. already assigned elsewhere).
    """
    if ledger.n_views < 1:
        raise InputError("ledger must accumulate at least one view")
    total = ledger.total()
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(total > 0, ledger.s_plus / np.where(total > 0, total, 1.0), 0.0)
    labels = (ratio > 0.5 * (1.0 + config.gamma)) & \
             (total >= config.min_total_contribution) & (total > 0)
    if eligible is not None:
        labels &= np.asarray(eligible, dtype=bool)
    return LabelAssignment(labels=labels, target_instance=target_instance)


def evaluate_objective(scene: GaussianScene,
                       views_with_masks: list[tuple[View, np.ndarray]],
                       labels: np.ndarray | LabelAssignment,
                       near: float = 0.01,
                       splat_cache: dict[str, Splat2D] | None = None) -> float:
    """Summed absolute residual between rendered label weights and masks.

    Uses the continuous (pre-binarization) rendered weight, summed over all
    provided views and pixels.
    """
    if isinstance(labels, LabelAssignment):
        labels = labels.labels
    x = np.asarray(labels, dtype=np.float64)
    if x.shape[0] != len(scene):
        raise InputError("label vector length must equal scene size")
    total = 0.0
    for view, mask in views_with_masks:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (view.height, view.width):
            raise InputError(f"mask shape {mask.shape} does not match view '{view.id}'")
        if splat_cache is not None and view.id in splat_cache:
            splats = splat_cache[view.id]
        else:
            splats = project_gaussians(scene, view, near)
            if splat_cache is not None:
                splat_cache[view.id] = splats
        out = rasterize(splats, x, view)
        total += float(np.abs(out.weight_image - mask.astype(np.float64)).sum())
    return total
