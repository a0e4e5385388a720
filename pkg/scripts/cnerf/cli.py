"""Subcommand CLI: synth -> preprocess -> triangulate / train -> eval, plus the ablation sweeps.

Every command reads and writes one output bundle (the configured
output_dir):

  config.json, scene.json, cameras.json
  images/<view>.ppm, depth/<view>.pfm
  corres/raw_<k>.jsonl, corres/transforms.json
  corres/filtered.jsonl, corres/filter_report.json
  cloud.ply, checkpoint.bin, metrics.csv
  eval/report.json, eval/<view>.ppm, eval/<view>.pfm
  ablate_noise.csv, ablate_losses.csv

Cameras whose name starts with "test_" are held-out views; every other
camera is a training view.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from cnerf.config import describe_config, load_configuration, resolve_path, write_effective_config
from cnerf.corres import IDENTITY_MAP, preprocess_pipeline, triangulate_cloud
from cnerf.debug import debug_log
from cnerf.errors import CnerfError, MissingInputError
from cnerf.file_io import (
    read_cameras,
    read_checkpoint,
    read_correspondences,
    read_pfm,
    read_ppm,
    read_scene,
    read_transforms,
    write_cameras,
    write_checkpoint,
    write_correspondences,
    write_csv,
    write_json,
    write_pfm,
    write_ply,
    write_ppm,
    write_scene,
    write_transforms,
)
from cnerf.geometry import Camera
from cnerf.models import ExperimentConfig
from cnerf.render import LossWeights
from cnerf.synth.correspondences import (
    AUGMENTATION_TRANSFORMS,
    CorruptionSpec,
    synthesize_augmented_sets,
    synthesize_tracks,
)
from cnerf.synth.scene import render_ground_truth
from cnerf.synth.scenes import make_rig, make_scene
from cnerf.training import TRACE_COLUMNS, View, evaluate, train
from cnerf.version import __version__
from cnerf.workers import set_max_threads

TEST_PREFIX = "test_"

NOISE_COLUMNS = (
    "pixel_noise_std", "raw_count", "merged_count", "input_count",
    "after_projection_filter", "after_knn_filter", "survival_fraction",
)
LOSS_COLUMNS = (
    "lambda_pixel", "lambda_depth", "pair_count", "psnr", "ssim", "depth_mae", "chamfer_l1",
)


# ============================================================================
# Bundle layout
# ============================================================================


@dataclass(frozen=True)
class Bundle:
    root: Path

    @property
    def scene(self) -> Path:
        return self.root / "scene.json"

    @property
    def cameras(self) -> Path:
        return self.root / "cameras.json"

    def image(self, view: str) -> Path:
        return self.root / "images" / f"{view}.ppm"

    def depth(self, view: str) -> Path:
        return self.root / "depth" / f"{view}.pfm"

    def raw(self, k: int) -> Path:
        return self.root / "corres" / f"raw_{k}.jsonl"

    @property
    def transforms(self) -> Path:
        return self.root / "corres" / "transforms.json"

    @property
    def filtered(self) -> Path:
        return self.root / "corres" / "filtered.jsonl"

    @property
    def filter_report(self) -> Path:
        return self.root / "corres" / "filter_report.json"

    @property
    def cloud(self) -> Path:
        return self.root / "cloud.ply"

    @property
    def checkpoint(self) -> Path:
        return self.root / "checkpoint.bin"

    @property
    def metrics(self) -> Path:
        return self.root / "metrics.csv"

    @property
    def eval_dir(self) -> Path:
        return self.root / "eval"


def _bundle(config: ExperimentConfig) -> Bundle:
    return Bundle(resolve_path(config.output_dir))


def _split(cameras: Sequence[Camera]) -> tuple[list[Camera], list[Camera]]:
    train_cams = [c for c in cameras if not c.name.startswith(TEST_PREFIX)]
    test_cams = [c for c in cameras if c.name.startswith(TEST_PREFIX)]
    return train_cams, test_cams


def _load_views(bundle: Bundle, cameras: Sequence[Camera]) -> list[View]:
    views = []
    for cam in cameras:
        depth_path = bundle.depth(cam.name)
        depth = read_pfm(depth_path) if depth_path.exists() else None
        views.append(View(cam.name, cam, read_ppm(bundle.image(cam.name)), depth))
    return views


# ============================================================================
# Commands
# ============================================================================


def cmd_synth(config: ExperimentConfig) -> dict[str, Any]:
    """Render ground truth for every view and write raw augmented correspondence sets."""
    bundle = _bundle(config)
    s = config.synth
    scene = read_scene(resolve_path(config.scene_path)) if config.scene_path else make_scene(config.scene)
    if config.camera_path:
        train_cams, test_cams = _split(read_cameras(resolve_path(config.camera_path)))
    else:
        train_cams, test_cams = make_rig(s)

    for cam in train_cams + test_cams:
        image, depth = render_ground_truth(scene, cam, config.threads)
        write_ppm(bundle.image(cam.name), image)
        write_pfm(bundle.depth(cam.name), depth)

    rng = np.random.default_rng(config.seed)
    corruption = CorruptionSpec(s.pixel_noise_std, s.outlier_fraction, s.confidence_falloff_px)
    tracks = synthesize_tracks(scene, train_cams, s.points_per_view, corruption, s.pair_recall, rng)
    transforms = list(AUGMENTATION_TRANSFORMS) if s.augment else [IDENTITY_MAP]
    sets = synthesize_augmented_sets(
        tracks, train_cams, transforms, s.pair_recall, corruption, rng, identity_set=tracks.correspondences
    )
    for k, corrs in enumerate(sets):
        write_correspondences(bundle.raw(k), corrs)
    write_transforms(bundle.transforms, transforms)
    write_scene(bundle.scene, scene)
    write_cameras(bundle.cameras, train_cams + test_cams)

    summary = {
        "train_views": len(train_cams),
        "test_views": len(test_cams),
        "tracks": len(tracks.tracks),
        "raw_sets": len(sets),
        "raw_correspondences": sum(len(c) for c in sets),
        "outliers": tracks.outliers,
    }
    debug_log(f"cmd_synth: {summary}")
    print(f"[OK] synth {scene.name}: {len(train_cams)} train / {len(test_cams)} test views, "
          f"{summary['raw_correspondences']} raw correspondences in {len(sets)} sets -> {bundle.root}")
    return summary


def cmd_preprocess(config: ExperimentConfig) -> dict[str, Any]:
    """Merge, propagate and filter the raw sets; write filtered.jsonl and the report."""
    bundle = _bundle(config)
    cameras = {c.name: c for c in read_cameras(bundle.cameras)}
    transforms = read_transforms(bundle.transforms)
    raw_sets = [read_correspondences(bundle.raw(k)) for k in range(len(transforms))]
    corrs, report = preprocess_pipeline(raw_sets, transforms, cameras, config.preprocess)
    write_correspondences(bundle.filtered, corrs)
    write_json(bundle.filter_report, report.to_dict())
    print(f"[OK] preprocess: {report.raw_count} raw -> {report.merged_count} merged -> "
          f"{report.input_count} propagated -> {report.after_knn_filter} kept "
          f"(survival {100.0 * report.survival_fraction:.1f}%)")
    return report.to_dict()


def cmd_triangulate(config: ExperimentConfig) -> dict[str, Any]:
    bundle = _bundle(config)
    cameras = {c.name: c for c in read_cameras(bundle.cameras)}
    cloud = triangulate_cloud(read_correspondences(bundle.filtered), cameras)
    write_ply(bundle.cloud, cloud)
    print(f"[OK] triangulate: {len(cloud)} points ({cloud.skipped} skipped) -> {bundle.cloud}")
    return {"points": len(cloud), "skipped": cloud.skipped}


def _train_once(config: ExperimentConfig, bundle: Bundle, quiet: bool = False):
    cameras = read_cameras(bundle.cameras)
    train_cams, test_cams = _split(cameras)
    train_views = _load_views(bundle, train_cams)
    trace_views = _load_views(bundle, test_cams[: config.train.trace_views])
    weights = LossWeights(config.train.lambda_pixel, config.train.lambda_depth)
    corrs = []
    if weights.uses_correspondences:
        if not bundle.filtered.exists():
            raise MissingInputError(bundle.filtered, "filtered correspondences (run preprocess first)")
        corrs = read_correspondences(bundle.filtered)

    def report(row: dict[str, float]) -> None:
        if not quiet:
            print(f"  it {row['iteration']:>6}  total {row['total']:.5f}  "
                  f"psnr {row['psnr']:.2f}  depth_mae {row['depth_mae']:.4f}")

    result = train(
        train_views, corrs, config.train, config.model, config.synth.near, config.synth.far,
        seed=config.seed, trace_views=trace_views, on_trace=report,
    )
    return result, _load_views(bundle, test_cams)


def cmd_train(config: ExperimentConfig) -> dict[str, Any]:
    bundle = _bundle(config)
    result, _ = _train_once(config, bundle)
    write_checkpoint(bundle.checkpoint, result.params, result.state, result.iterations)
    write_csv(bundle.metrics, TRACE_COLUMNS, result.trace)
    diag = result.diagnostics
    print(f"[OK] train: {result.iterations} iterations, {result.pair_count} correspondence pairs "
          f"(behind-camera {diag.behind_camera}, depth-skipped {diag.depth_skipped}) -> {bundle.checkpoint}")
    return {"iterations": result.iterations, "pair_count": result.pair_count}


def _write_eval(bundle: Bundle, report, renders, write_images: bool) -> None:
    write_json(bundle.eval_dir / "report.json", report.to_dict())
    if write_images:
        for name, (color, depth) in renders.items():
            write_ppm(bundle.eval_dir / f"{name}.ppm", color)
            write_pfm(bundle.eval_dir / f"{name}.pfm", depth)


def cmd_eval(config: ExperimentConfig, checkpoint: Optional[str] = None) -> dict[str, Any]:
    bundle = _bundle(config)
    path = resolve_path(checkpoint) if checkpoint else bundle.checkpoint
    params, _, iteration = read_checkpoint(path)
    _, test_cams = _split(read_cameras(bundle.cameras))
    views = _load_views(bundle, test_cams)
    report, renders = evaluate(params, views, config.synth.near, config.synth.far, config.eval, config.threads)
    _write_eval(bundle, report, renders, config.eval.write_images)
    print(f"[OK] eval @ {iteration}: psnr {report.psnr:.2f} dB  ssim {report.ssim:.4f}  "
          f"depth_mae {report.depth_mae:.4f}  chamfer {report.chamfer_l1:.4f}")
    return report.to_dict()


def cmd_ablate_noise(config: ExperimentConfig) -> list[dict[str, Any]]:
    """Correspondence survival through the filters at each pixel-noise level."""
    root = _bundle(config)
    rows = []
    for level in config.ablation.noise_levels:
        sub = replace(
            config,
            output_dir=str(root.root / "ablate_noise" / f"noise_{level:g}"),
            synth=replace(config.synth, pixel_noise_std=float(level)),
        )
        cmd_synth(sub)
        report = cmd_preprocess(sub)
        rows.append({"pixel_noise_std": float(level), **{k: report[k] for k in NOISE_COLUMNS[1:]}})
    write_csv(root.root / "ablate_noise.csv", NOISE_COLUMNS, rows)
    print(f"[OK] ablate-noise: {len(rows)} levels -> {root.root / 'ablate_noise.csv'}")
    return rows


def cmd_ablate_losses(config: ExperimentConfig) -> list[dict[str, Any]]:
    """Train and evaluate once per (lambda_pixel, lambda_depth) setting on one bundle."""
    bundle = _bundle(config)
    if not bundle.cameras.exists():
        cmd_synth(config)
    if not bundle.filtered.exists():
        cmd_preprocess(config)
    rows = []
    for lambda_pixel, lambda_depth in config.ablation.loss_settings:
        run = replace(config, train=replace(config.train, lambda_pixel=lambda_pixel, lambda_depth=lambda_depth))
        result, test_views = _train_once(run, bundle, quiet=True)
        report, _ = evaluate(result.params, test_views, run.synth.near, run.synth.far, run.eval, run.threads)
        rows.append({
            "lambda_pixel": lambda_pixel,
            "lambda_depth": lambda_depth,
            "pair_count": result.pair_count,
            "psnr": report.psnr,
            "ssim": report.ssim,
            "depth_mae": report.depth_mae,
            "chamfer_l1": report.chamfer_l1,
        })
        print(f"  lambda=({lambda_pixel:g}, {lambda_depth:g})  psnr {report.psnr:.2f}  "
              f"depth_mae {report.depth_mae:.4f}")
    write_csv(bundle.root / "ablate_losses.csv", LOSS_COLUMNS, rows)
    print(f"[OK] ablate-losses: {len(rows)} settings -> {bundle.root / 'ablate_losses.csv'}")
    return rows


COMMANDS = {
    "synth": (cmd_synth, "render a synthetic scene and write raw correspondences"),
    "preprocess": (cmd_preprocess, "merge, propagate and filter correspondences"),
    "triangulate": (cmd_triangulate, "triangulate filtered correspondences into cloud.ply"),
    "train": (cmd_train, "fit a radiance field; writes checkpoint.bin and metrics.csv"),
    "eval": (cmd_eval, "render test views from a checkpoint and score them"),
    "ablate-noise": (cmd_ablate_noise, "filter survival across pixel-noise levels"),
    "ablate-losses": (cmd_ablate_losses, "train once per loss-weight setting and compare"),
}


# ============================================================================
# Entry point
# ============================================================================


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON config file")
    common.add_argument("--seed", type=int, help="random seed (overrides config / CNERF_SEED)")
    common.add_argument("--threads", type=int, help="worker threads; results are identical at any value")
    common.add_argument("--output-dir", metavar="DIR", help="bundle directory")
    common.add_argument("--set", dest="set_expressions", action="append", default=[],
                        metavar="SECTION.KEY=VALUE", help="override one config key (repeatable)")

    parser = argparse.ArgumentParser(
        prog="corres-nerf",
        description="Correspondence-supervised radiance fields from sparse views",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=describe_config(),
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(
            name, parents=[common], help=help_text, description=help_text,
            formatter_class=argparse.RawDescriptionHelpFormatter, epilog=describe_config(),
        )
        if name == "eval":
            p.add_argument("--checkpoint", metavar="PATH", help="checkpoint file (default: <output-dir>/checkpoint.bin)")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_configuration(
            args.config,
            {"seed": args.seed, "threads": args.threads, "output_dir": args.output_dir},
            args.set_expressions,
        )
        set_max_threads(config.threads)
        write_effective_config(config, config.output_dir, args.config)
        fn, _ = COMMANDS[args.command]
        if args.command == "eval":
            fn(config, args.checkpoint)
        else:
            fn(config)
    except CnerfError as exc:
        debug_log(f"{args.command} failed ({type(exc).__name__}): {exc}")
        print(f"[FAILED] {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0
