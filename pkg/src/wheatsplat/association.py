"""Multi-view instance association: the match-and-fine-tune loop.

Starting from a single unconsumed seed mask, labels are lifted to 3D, the
labeled set is re-projected into the other views, candidate masks are matched
by IoU and gated by precision, the labels are re-solved from the grown mask
set, and the loop repeats until the pool is exhausted.  Each accepted lift
mints a fresh instance ID and stamps its Gaussians.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .label_solver import LabelAssignment, SolverConfig, solve_labels
from .rasterizer import (SplatContributions, accumulate_contributions,
                         flatten_contributions, project_gaussians,
                         render_label_mask)
from .scene_io import GaussianScene, InstanceMap, MaskPool, MaskRecord, View

logger = logging.getLogger(__name__)

LABEL_MASK_THRESHOLD = 0.5


@dataclass
class AssociationConfig:
    precision_threshold: float = 0.8
    refine_rounds: int = 2
    min_instance_gaussians: int = 20
    seed_order: str = "area_desc"  # or "view_order"

    def __post_init__(self) -> None:
        if not 0.0 < self.precision_threshold <= 1.0:
            raise InputError("precision_threshold must lie in (0, 1]")
        if self.refine_rounds < 1:
            raise InputError("refine_rounds must be >= 1")
        if self.seed_order not in ("area_desc", "view_order"):
            raise InputError(f"unknown seed_order '{self.seed_order}'")


@dataclass
class MatchSet:
    """The masks matched to one minted instance; at most one per view."""

    instance_id: int
    members: list[tuple[str, int]]
    seed: tuple[str, int]


def mask_precision_iou(rendered: np.ndarray,
                       candidate: np.ndarray) -> tuple[float, float]:
    """(precision, IoU) of a rendered mask against a candidate mask."""
    inter = float(np.logical_and(rendered, candidate).sum())
    n_rendered = float(rendered.sum())
    union = n_rendered + float(candidate.sum()) - inter
    precision = inter / n_rendered if n_rendered else 0.0
    iou = inter / union if union else 0.0
    return precision, iou


def match_in_view(rendered: np.ndarray, pool: MaskPool, view_id: str,
                  threshold: float) -> tuple[int, float, float] | None:
    """Best unconsumed candidate by IoU, gated by precision.

    Returns (mask_id, precision, iou) for the argmax-IoU candidate (ties
    broken by smaller mask_id) when precision(rendered, candidate) exceeds
    ``threshold``; None otherwise.  An empty rendered mask matches nothing.
    """
    if not rendered.any():
        return None
    best: tuple[int, float, float] | None = None
    best_iou = -1.0
    for record in sorted(pool.unconsumed(view_id), key=lambda m: m.mask_id):
        precision, iou = mask_precision_iou(rendered, record.bitmap)
        if iou > best_iou:
            best_iou = iou
            best = (record.mask_id, precision, iou)
    if best is None:
        return None
    if best[1] > threshold:
        return best
    return None


def _pick_seed(pool: MaskPool, seed_order: str) -> MaskRecord | None:
    candidates = pool.all_unconsumed()
    if not candidates:
        return None
    if seed_order == "area_desc":
        # Largest mask first; deterministic tie-break on (view_id, mask_id).
        return min(candidates, key=lambda m: (-m.area, m.view_id, m.mask_id))
    return min(candidates, key=lambda m: (m.view_id, m.mask_id))


def associate_all(scene: GaussianScene, views: list[View], pool: MaskPool,
                  solver_config: SolverConfig, assoc_config: AssociationConfig,
                  near: float = 0.01, threads: int = 1) -> InstanceMap:
    """Run the full association loop; stamps scene.instance_id in place.

    Each outer iteration consumes at least its seed mask, so the loop
    terminates in at most pool-size iterations.  Already-stamped Gaussians
    never participate in later solves (hard assignment), though they still
    occlude during rendering.  Instance IDs are minted 1..N in creation
    order.  Returns the instance map.
    """
    view_by_id = {v.id: v for v in views}
    missing = [vid for vid in pool.view_ids() if vid not in view_by_id]
    if missing:
        raise InputError(f"masks reference unknown views: {missing}")

    # One projection + compositing pass per view, flattened; every later
    # solve and re-render is a vectorized lookup into this cache.
    splat_cache: dict[str, SplatContributions] = {}

    def splats_for(view: View) -> SplatContributions:
        if view.id not in splat_cache:
            splat_cache[view.id] = flatten_contributions(
                project_gaussians(scene, view, near), view, len(scene))
        return splat_cache[view.id]

    def solve_from(members: list[tuple[str, int]],
                   eligible: np.ndarray) -> LabelAssignment:
        pairs = [(view_by_id[vid], pool.get(vid, mid).bitmap) for vid, mid in members]
        ledger = accumulate_contributions(scene, pairs, near, splat_cache)
        return solve_labels(ledger, solver_config, eligible=eligible)

    def try_match(view: View, labels: LabelAssignment
                  ) -> tuple[int, float, float] | None:
        rendered = render_label_mask(scene, view, labels.labels,
                                     LABEL_MASK_THRESHOLD, near,
                                     splats=splats_for(view))
        return match_in_view(rendered, pool, view.id,
                             assoc_config.precision_threshold)

    imap = InstanceMap()
    next_id = 1
    ordered_views = sorted(views, key=lambda v: v.id)
    # Warm the projection cache up front so threaded rounds only read it.
    for view in ordered_views:
        splats_for(view)

    while True:
        seed = _pick_seed(pool, assoc_config.seed_order)
        if seed is None:
            break
        eligible = scene.instance_id == 0
        members = [(seed.view_id, seed.mask_id)]
        labels = solve_from(members, eligible)

        for _ in range(assoc_config.refine_rounds):
            member_views = {vid for vid, _ in members}
            open_views = [v for v in ordered_views if v.id not in member_views]
            if threads > 1 and len(open_views) > 1:
                with ThreadPoolExecutor(max_workers=threads) as pool_exec:
                    results = list(pool_exec.map(
                        lambda v: try_match(v, labels), open_views))
            else:
                results = [try_match(v, labels) for v in open_views]
            added = False
            for view, result in zip(open_views, results):
                if result is not None:
                    members.append((view.id, result[0]))
                    added = True
            if added:
                labels = solve_from(members, eligible)
            else:
                break

        chosen = labels.indices()
        if len(chosen) >= assoc_config.min_instance_gaussians:
            scene.instance_id[chosen] = next_id
            imap.add(next_id, chosen, members)
            for vid, mid in members:
                pool.consume(vid, mid)
            logger.info("instance %d: %d Gaussians from %d masks",
                        next_id, len(chosen), len(members))
            next_id += 1
        else:
            # Failed lift: only the seed is retired; other matched masks
            # stay available for later instances.
            pool.consume(seed.view_id, seed.mask_id)
            logger.info("discarded lift from seed (%s, %d): %d Gaussians",
                        seed.view_id, seed.mask_id, len(chosen))
    return imap
