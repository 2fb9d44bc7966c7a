"""Command-line pipeline: synth, render, segment, traits, align, evaluate.

Every subcommand writes its data outputs plus a ``*.manifest.json`` run
record (config snapshot, RNG seed, input hashes, version, wall time).
Exit codes: 0 success, 1 input or config error, 2 internal failure.
Logs go to stderr; data goes to files only.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .association import AssociationConfig, associate_all
from .errors import EvaluationError, InputError, Unmeasurable, WheatsplatError
from .evaluation import (IcpConfig, RigidTransform, icp_align, kabsch_align,
                         match_instances, mcd_outlier_filter, regression_report)
from .label_solver import SolverConfig
from .rasterizer import render_label_mask, render_rgb
from .scene_io import (InstanceMap, load_cameras, load_instance_map,
                       load_masks, load_point_cloud, load_scene_ply,
                       save_cameras, save_instance_map, save_mask, save_pfm,
                       save_png, save_scene_ply, save_xyz)
from .synthbench import SynthConfig, generate, sample_reference_cloud, save_truth
from .traits import (InstanceCloud, TraitConfig, measure_all, measure_length,
                     measure_volume, measure_width, preprocess,
                     principal_axes, read_traits_csv, write_traits_csv)

logger = logging.getLogger(__name__)

TRAIT_NAMES = ("length_cm", "width_cm", "volume_cm3")


# ---------------------------------------------------------------------------
# Run manifests
# ---------------------------------------------------------------------------

def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _hash_inputs(paths: list[Path | None]) -> dict[str, str]:
    hashes: dict[str, str] = {}
    for path in paths:
        if path is None:
            continue
        path = Path(path)
        if path.is_dir():
            for f in sorted(p for p in path.rglob("*") if p.is_file()):
                hashes[str(f)] = _sha256(f)
        elif path.is_file():
            hashes[str(path)] = _sha256(path)
    return hashes


def write_manifest(manifest_path: Path, subcommand: str, config: dict,
                   rng_seed: int | None, inputs: list[Path | None],
                   outputs: list[Path], start_time: float) -> None:
    manifest = {
        "subcommand": subcommand,
        "config": config,
        "rng_seed": rng_seed,
        "inputs": _hash_inputs(inputs),
        "outputs": [str(p) for p in outputs],
        "version": __version__,
        "wall_time_s": round(time.monotonic() - start_time, 3),
    }
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _ensure_new(paths: list[Path], force: bool) -> None:
    """Outputs are write-once unless --force is given."""
    if force:
        return
    for path in paths:
        if Path(path).exists():
            raise InputError(f"output {path} already exists (use --force)")


def _dump_json(payload: dict, path: Path) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Subcommand implementations
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    start = time.monotonic()
    settings = {}
    if args.config:
        with open(args.config) as fh:
            settings.update(json.load(fh))
    overrides = {"n_heads": args.n_heads, "n_views": args.n_views,
                 "image_size": args.image_size,
                 "clutter_gaussians": args.clutter,
                 "mask_dropout": args.dropout,
                 "mask_morph_noise": args.morph_noise,
                 "rng_seed": args.seed}
    settings.update({k: v for k, v in overrides.items() if v is not None})
    config = SynthConfig.from_dict(settings)

    out_dir = Path(args.out_dir)
    scene_path = out_dir / "scene.ply"
    cameras_path = out_dir / "cameras.json"
    masks_dir = out_dir / "masks"
    truth_path = out_dir / "truth.json"
    reference_path = out_dir / "reference.xyz"
    _ensure_new([scene_path, cameras_path, masks_dir, truth_path,
                 reference_path], args.force)
    out_dir.mkdir(parents=True, exist_ok=True)

    scene, views, pool, truth = generate(config)
    save_scene_ply(scene, scene_path)
    save_cameras(views, cameras_path)
    for view in views:
        for record in pool.records(view.id):
            save_mask(record.bitmap, masks_dir / view.id / f"{record.mask_id}.png")
    save_truth(truth, config, truth_path)
    save_xyz(sample_reference_cloud(truth, config), reference_path)

    outputs = [scene_path, cameras_path, masks_dir, truth_path, reference_path]
    write_manifest(out_dir / "manifest.json", "synth", config.to_dict(),
                   config.rng_seed, [args.config and Path(args.config)],
                   outputs, start)
    logger.info("synth: %d Gaussians, %d views, %d masks -> %s",
                len(scene), len(views), pool.size(), out_dir)
    return 0


def cmd_render(args) -> int:
    start = time.monotonic()
    scene = load_scene_ply(args.scene)
    views = {v.id: v for v in load_cameras(args.cameras)}
    if args.view_id not in views:
        raise InputError(f"view '{args.view_id}' not found in {args.cameras}")
    view = views[args.view_id]
    out_png = Path(args.out)
    out_pfm = out_png.with_suffix(".pfm")
    _ensure_new([out_png], args.force)
    out_png.parent.mkdir(parents=True, exist_ok=True)

    if args.mode == "rgb":
        result = render_rgb(scene, view)
        save_png(result.rgb_image, out_png)
        save_pfm(result.rgb_image, out_pfm)
        outputs = [out_png, out_pfm]
    elif args.mode == "alpha":
        result = render_rgb(scene, view)
        save_png(result.alpha_image, out_png)
        save_pfm(result.alpha_image, out_pfm)
        outputs = [out_png, out_pfm]
    else:  # label
        if args.instance_id is None:
            labels = scene.instance_id > 0
        else:
            labels = scene.instance_id == args.instance_id
        if not labels.any():
            logger.warning("render: no Gaussians carry the requested label")
        mask = render_label_mask(scene, view, labels, threshold=args.threshold)
        save_mask(mask, out_png)
        outputs = [out_png]

    config = {"mode": args.mode, "view_id": args.view_id,
              "threshold": args.threshold, "instance_id": args.instance_id}
    write_manifest(out_png.with_suffix(out_png.suffix + ".manifest.json"),
                   "render", config, None,
                   [Path(args.scene), Path(args.cameras)], outputs, start)
    return 0


def cmd_segment(args) -> int:
    start = time.monotonic()
    scene = load_scene_ply(args.scene)
    views = load_cameras(args.cameras)
    pool = load_masks(args.masks, views)
    out_ply = Path(args.out_ply)
    out_instances = Path(args.out_instances)
    _ensure_new([out_ply, out_instances], args.force)

    solver_config = SolverConfig(gamma=args.gamma,
                                 min_total_contribution=args.min_total_contribution)
    assoc_config = AssociationConfig(
        precision_threshold=args.precision_threshold,
        refine_rounds=args.refine_rounds,
        min_instance_gaussians=args.min_instance_gaussians)
    threads = args.threads or os.cpu_count() or 1
    imap = associate_all(scene, views, pool, solver_config, assoc_config,
                         threads=threads)
    save_scene_ply(scene, out_ply)
    save_instance_map(imap, out_instances)

    config = {"gamma": args.gamma,
              "min_total_contribution": args.min_total_contribution,
              "precision_threshold": args.precision_threshold,
              "refine_rounds": args.refine_rounds,
              "min_instance_gaussians": args.min_instance_gaussians,
              "threads": threads}
    write_manifest(out_ply.with_suffix(out_ply.suffix + ".manifest.json"),
                   "segment", config, None,
                   [Path(args.scene), Path(args.cameras), Path(args.masks)],
                   [out_ply, out_instances], start)
    logger.info("segment: %d instances from %d masks", len(imap.members),
                pool.size())
    return 0


def _instance_map_from_scene(scene) -> InstanceMap:
    imap = InstanceMap()
    for iid in sorted(int(i) for i in np.unique(scene.instance_id) if i > 0):
        imap.add(iid, np.nonzero(scene.instance_id == iid)[0], [])
    return imap


def _load_groups(path: str | None) -> dict[int, str]:
    if not path:
        return {}
    with open(path) as fh:
        raw = json.load(fh)
    return {int(k): str(v) for k, v in raw.items()}


def cmd_traits(args) -> int:
    start = time.monotonic()
    scene = load_scene_ply(args.scene)
    imap = _instance_map_from_scene(scene)
    if not imap.members:
        raise InputError(f"{args.scene} carries no instance labels")
    unit_scale = args.unit_scale if args.unit_scale is not None else scene.unit_scale
    config = TraitConfig(seed=args.seed, unit_scale=unit_scale)
    groups = _load_groups(args.groups)
    out_csv = Path(args.out_csv)
    _ensure_new([out_csv], args.force)
    out_csv.parent.mkdir(parents=True, exist_ok=True)

    records = measure_all(scene, imap, config, groups)
    write_traits_csv(records, out_csv)
    outputs = [out_csv]
    if not args.no_figures:
        from .figures import save_trait_histograms

        fig_path = out_csv.with_suffix(".png")
        save_trait_histograms(records, fig_path)
        outputs.append(fig_path)

    write_manifest(out_csv.with_suffix(out_csv.suffix + ".manifest.json"),
                   "traits", {"seed": args.seed, "unit_scale": unit_scale},
                   args.seed,
                   [Path(args.scene), args.groups and Path(args.groups)],
                   outputs, start)
    measured = sum(1 for r in records if not r.flags)
    logger.info("traits: %d/%d instances measured", measured, len(records))
    return 0


def cmd_align(args) -> int:
    start = time.monotonic()
    source = load_point_cloud(args.source)
    target = load_point_cloud(args.target)
    out_path = Path(args.out_transform)
    _ensure_new([out_path], args.force)

    if args.pairs:
        with open(args.pairs) as fh:
            pairs = json.load(fh)
        transform = kabsch_align(np.asarray(pairs["source"], dtype=np.float64),
                                 np.asarray(pairs["target"], dtype=np.float64),
                                 with_scale=args.with_scale)
        n_pairs = len(pairs["source"])
    else:
        transform = RigidTransform.identity()
        n_pairs = 0

    icp_diag = None
    if not args.skip_icp:
        transform, icp_diag = icp_align(
            source, target, init=transform,
            config=IcpConfig(max_iterations=args.max_iterations,
                             trim_fraction=args.trim_fraction))
    payload = {"transform": transform.to_dict(), "icp": icp_diag,
               "kabsch_pairs": n_pairs}
    _dump_json(payload, out_path)

    config = {"with_scale": args.with_scale, "skip_icp": args.skip_icp,
              "max_iterations": args.max_iterations,
              "trim_fraction": args.trim_fraction}
    write_manifest(out_path.with_suffix(out_path.suffix + ".manifest.json"),
                   "align", config, None,
                   [Path(args.source), Path(args.target),
                    args.pairs and Path(args.pairs)], [out_path], start)
    if icp_diag:
        logger.info("align: rms %.6g after %d iterations", icp_diag["rms"],
                    icp_diag["iterations"])
    return 0


def _measure_reference_traits(matches, config: TraitConfig) -> dict[int, dict]:
    """Trait values measured on each instance's matched reference points."""
    out: dict[int, dict] = {}
    for match in matches:
        cloud = InstanceCloud(instance_id=match.instance_id,
                              points=np.asarray(match.reference_points))
        try:
            filtered = preprocess(cloud, config)
            axes = principal_axes(filtered.points)
            out[match.instance_id] = {
                "length_cm": measure_length(filtered, config, axes),
                "width_cm": measure_width(filtered, config, axes),
                "volume_cm3": measure_volume(filtered, config),
            }
        except Unmeasurable as err:
            logger.warning("reference instance %d unmeasurable: %s",
                           match.instance_id, err.reason)
    return out


def cmd_evaluate(args) -> int:
    start = time.monotonic()
    scene = load_scene_ply(args.scene)
    if args.instances:
        imap = load_instance_map(args.instances)
    else:
        imap = _instance_map_from_scene(scene)
    if not imap.members:
        raise InputError("no instances to evaluate")
    out_report = Path(args.out_report)
    out_csv = out_report.with_suffix(".csv")
    out_fig = out_report.with_suffix(".png")
    _ensure_new([out_report, out_csv], args.force)
    out_report.parent.mkdir(parents=True, exist_ok=True)

    config = TraitConfig(seed=args.seed, unit_scale=scene.unit_scale)
    groups = _load_groups(args.groups)

    if args.traits_csv:
        est_records = read_traits_csv(args.traits_csv)
    else:
        est_records = measure_all(scene, imap, config, groups)
    est_by_id = {r.instance_id: r for r in est_records}

    reference = load_point_cloud(args.reference)
    matches = match_instances(scene, imap, reference,
                              crop_dist_cm=args.crop_dist_cm,
                              buffer_cm=args.buffer_cm)
    if args.ref_traits_csv:
        ref_by_id = {r.instance_id: {t: getattr(r, t) for t in TRAIT_NAMES}
                     for r in read_traits_csv(args.ref_traits_csv)}
    else:
        ref_by_id = _measure_reference_traits(matches, config)

    paired_ids: dict[str, list[int]] = {}
    est_vals: dict[str, np.ndarray] = {}
    ref_vals: dict[str, np.ndarray] = {}
    for trait in TRAIT_NAMES:
        ids = [iid for iid in imap.instance_ids()
               if iid in est_by_id and iid in ref_by_id
               and getattr(est_by_id[iid], trait) is not None
               and ref_by_id[iid].get(trait) is not None]
        paired_ids[trait] = ids
        est_vals[trait] = np.array([getattr(est_by_id[i], trait) for i in ids])
        ref_vals[trait] = np.array([ref_by_id[i][trait] for i in ids])

    kept_ids: dict[str, list[int]] = {}
    for trait in TRAIT_NAMES:
        ids = paired_ids[trait]
        if args.outlier_filter == "mcd" and len(ids) >= 10:
            kept = mcd_outlier_filter(
                np.column_stack([ref_vals[trait], est_vals[trait]]))
            kept_ids[trait] = [ids[i] for i in kept]
            est_vals[trait] = est_vals[trait][kept]
            ref_vals[trait] = ref_vals[trait][kept]
        else:
            if args.outlier_filter == "mcd" and ids:
                logger.warning("evaluate: too few %s pairs for MCD, "
                               "filter skipped", trait)
            kept_ids[trait] = list(ids)

    usable = {t for t in TRAIT_NAMES if len(kept_ids[t]) >= 3}
    if not usable:
        raise EvaluationError("fewer than 3 paired instances for every trait")
    report = regression_report({t: est_vals[t] for t in sorted(usable)},
                               {t: ref_vals[t] for t in sorted(usable)})
    per_group = None
    if groups:
        groupable = {t for t in usable
                     if all(i in groups for i in kept_ids[t])
                     and len({groups[i] for i in kept_ids[t]}) >= 3}
        if groupable:
            per_group = {}
            for trait in sorted(groupable):
                rep = regression_report(
                    {trait: est_vals[trait]}, {trait: ref_vals[trait]},
                    level="per_group",
                    groups=[groups[i] for i in kept_ids[trait]])
                per_group[trait] = vars(rep.stats[trait])

    payload = {
        "n_instances": len(imap.members),
        "n_reference_points": int(len(reference)),
        "matched_reference_points": {str(m.instance_id): int(len(m.reference_points))
                                     for m in matches},
        "outlier_filter": args.outlier_filter,
        "pairs_per_trait": {t: len(paired_ids[t]) for t in TRAIT_NAMES},
        "kept_per_trait": {t: len(kept_ids[t]) for t in TRAIT_NAMES},
        "regression": {"per_instance": report.to_dict(),
                       "per_group": per_group},
    }
    _dump_json(payload, out_report)

    with open(out_csv, "w") as fh:
        fh.write("instance_id,trait,estimated,reference,kept\n")
        for trait in TRAIT_NAMES:
            kept = set(kept_ids[trait])
            for iid in paired_ids[trait]:
                est = getattr(est_by_id[iid], trait)
                ref = ref_by_id[iid][trait]
                fh.write(f"{iid},{trait},{est:.9g},{ref:.9g},"
                         f"{int(iid in kept)}\n")

    outputs = [out_report, out_csv]
    if not args.no_figures:
        from .figures import save_regression_scatter

        stats = payload["regression"]["per_instance"]["stats"]
        save_regression_scatter(
            {t: (est_vals[t], ref_vals[t]) for t in sorted(usable)},
            stats, out_fig)
        outputs.append(out_fig)

    config_snapshot = {"crop_dist_cm": args.crop_dist_cm,
                       "buffer_cm": args.buffer_cm, "seed": args.seed,
                       "outlier_filter": args.outlier_filter}
    write_manifest(out_report.with_suffix(out_report.suffix + ".manifest.json"),
                   "evaluate", config_snapshot, args.seed,
                   [Path(args.scene), args.instances and Path(args.instances),
                    Path(args.reference),
                    args.traits_csv and Path(args.traits_csv),
                    args.ref_traits_csv and Path(args.ref_traits_csv),
                    args.groups and Path(args.groups)],
                   outputs, start)
    for trait in sorted(usable):
        s = report.stats[trait]
        logger.info("evaluate %s: rho=%.3f mae=%.3f mape=%.1f%% n=%d",
                    trait, s.rho, s.mae, s.mape, s.n)
    return 0


# ---------------------------------------------------------------------------
# Parser and entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wheatsplat",
        description="Lift 2D instance masks onto a Gaussian-splat scene and "
                    "measure per-instance traits.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("synth", help="generate a synthetic labeled scene")
    p.add_argument("--config", help="JSON file of generator settings")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-heads", type=int)
    p.add_argument("--n-views", type=int)
    p.add_argument("--image-size", type=int)
    p.add_argument("--clutter", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--morph-noise", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--force", action="store_true",
                   help="allow overwriting existing outputs")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("render", help="render a view of a scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--view-id", required=True)
    p.add_argument("--mode", choices=("rgb", "alpha", "label"), default="rgb")
    p.add_argument("--threshold", type=float, default=0.5,
                   help="label-mask blending threshold")
    p.add_argument("--instance-id", type=int,
                   help="label mode: restrict to one instance")
    p.add_argument("--out", required=True, help="output PNG path")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("segment", help="lift 2D masks to 3D instances")
    p.add_argument("--scene", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--masks", required=True, help="mask tree root directory")
    p.add_argument("--out-ply", required=True)
    p.add_argument("--out-instances", required=True)
    p.add_argument("--gamma", type=float, default=0.1)
    p.add_argument("--min-total-contribution", type=float, default=1e-4)
    p.add_argument("--precision-threshold", type=float, default=0.8)
    p.add_argument("--refine-rounds", type=int, default=2)
    p.add_argument("--min-instance-gaussians", type=int, default=20)
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: hardware parallelism)")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("traits", help="measure per-instance traits")
    p.add_argument("--scene", required=True,
                   help="scene PLY carrying instance labels")
    p.add_argument("--out-csv", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--unit-scale", type=float,
                   help="scene units to centimeters (default: from PLY)")
    p.add_argument("--groups", help="JSON {instance_id: group}")
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_traits)

    p = sub.add_parser("align", help="register a reference cloud to a scene")
    p.add_argument("--source", required=True, help="point cloud (PLY or XYZ)")
    p.add_argument("--target", required=True, help="point cloud (PLY or XYZ)")
    p.add_argument("--pairs", help="JSON {source: [[xyz]...], target: [[xyz]...]}")
    p.add_argument("--out-transform", required=True)
    p.add_argument("--with-scale", action="store_true")
    p.add_argument("--skip-icp", action="store_true")
    p.add_argument("--max-iterations", type=int, default=50)
    p.add_argument("--trim-fraction", type=float, default=0.8)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("evaluate", help="compare traits against a reference cloud")
    p.add_argument("--scene", required=True)
    p.add_argument("--instances", help="instance map JSON (default: PLY labels)")
    p.add_argument("--reference", required=True,
                   help="aligned reference cloud (PLY or XYZ)")
    p.add_argument("--traits-csv", help="precomputed estimated traits")
    p.add_argument("--ref-traits-csv", help="precomputed reference traits")
    p.add_argument("--groups", help="JSON {instance_id: group}")
    p.add_argument("--out-report", required=True, help="report JSON path")
    p.add_argument("--crop-dist-cm", type=float, default=1.5)
    p.add_argument("--buffer-cm", type=float, default=1.0)
    p.add_argument("--outlier-filter", choices=("none", "mcd"), default="none")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        return args.func(args)
    except (InputError, OSError, json.JSONDecodeError) as err:
        logger.error("%s", err)
        return 1
    except WheatsplatError as err:
        if isinstance(err, Unmeasurable):
            logger.error("internal: unhandled unmeasurable instance: %s", err)
            return 2
        logger.error("%s", err)
        return 1
    except Exception:
        logger.exception("internal error")
        return 2


if __name__ == "__main__":
    sys.exit(main())
