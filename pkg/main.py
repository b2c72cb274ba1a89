#!/usr/bin/env python3
"""
Dynamic RGB-D neural reconstruction.
Main entry point for the application.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

# Add the repository root to the path for ``src`` imports
sys.path.insert(0, str(Path(__file__).parent))

# flake8: noqa: E402 - imports must be after sys.path modification
from src.config.experiment import config_hash, load_train_config
from src.config.settings import Settings, get_settings
from src.models.exceptions import MetricError, NdrError
from src.models.frames import Dataset
from src.services import dataio, meshio, metrics
from src.services.checkpoint import load_checkpoint
from src.services.model import ReconstructionModel
from src.services.rendering import render_frame
from src.services.run_manifest import RunManifest
from src.services.synthetic import load_scene_spec, synth_generate
from src.services.trainer import (
    LOG_FILE,
    ConsoleTrainingObserver,
    JsonlLossObserver,
    Trainer,
    perturb_poses,
)
from src.utils.validators import parse_frame_range, validate_frame_range

METRIC_NAMES = ("geometry", "cycle", "chamfer")

logger = logging.getLogger(__name__)


def setup_logging(log_level: str = "INFO", log_file: Optional[str] = None) -> None:
    """Setup logging configuration."""
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stdout)]
    if log_file:
        handlers.append(logging.FileHandler(log_file))
    logging.basicConfig(
        level=getattr(logging, log_level.upper()),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=handlers,
        force=True,
    )


def echo(args: argparse.Namespace, message: str) -> None:
    if not args.quiet:
        print(message)


def positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {value}")
    return value


def metric_list(text: str) -> List[str]:
    names = [name.strip() for name in text.split(",") if name.strip()]
    unknown = [name for name in names if name not in METRIC_NAMES]
    if unknown or not names:
        raise argparse.ArgumentTypeError(
            f"unknown metric(s) {unknown or [text]}; valid metrics: {', '.join(METRIC_NAMES)}"
        )
    return names


def train_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """Command-line values that win over the config file."""
    return {
        "seed": args.seed,
        "iterations": getattr(args, "iterations", None),
        "pose_noise_deg": getattr(args, "pose_noise_deg", None),
        "supervision": getattr(args, "supervision", None),
        "precision": getattr(args, "precision", None),
    }


def frames_from(args: argparse.Namespace, n_frames: int) -> List[int]:
    if args.frames is None:
        return list(range(n_frames))
    start, stop = parse_frame_range(args.frames)
    frames = list(range(start, stop))
    validate_frame_range(frames, n_frames)
    return frames


def finish(manifest: RunManifest, args: argparse.Namespace) -> None:
    """Write and validate the manifest; a missing artifact fails the command."""
    path = manifest.write()
    manifest.validate_artifacts()
    echo(args, f"📝 Manifest: {path}")


def command_synth(args: argparse.Namespace, settings: Settings) -> None:
    """Handle synth command."""
    echo(args, "🧪 Synthetic Scene Generation")
    echo(args, "=" * 40)

    overrides: Dict[str, Any] = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.frames is not None:
        overrides["frames"] = args.frames
    spec = load_scene_spec(args.config, overrides)

    out = Path(args.out)
    dataset, written = synth_generate(spec, out, settings.workers)

    manifest = RunManifest(
        command="synth",
        run_dir=str(out),
        seed=spec.seed,
        config=spec.model_dump(mode="json"),
        config_hash=config_hash(spec),
        dataset_hash=dataset.content_hash(),
    )
    manifest.add_artifacts(written)
    finish(manifest, args)

    echo(args, f"✅ Wrote {len(dataset)} frames of '{spec.name}' to {out}")


def command_train(args: argparse.Namespace, settings: Settings) -> None:
    """Handle train command."""
    echo(args, "🚀 Training")
    echo(args, "=" * 40)

    config = load_train_config(args.config, train_overrides(args))
    dataset = dataio.load_dataset(args.dataset, settings.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    start_iteration = 0
    model: Optional[ReconstructionModel] = None
    rng_state: Optional[Dict[str, Any]] = None
    if args.resume:
        model, header = load_checkpoint(args.resume)
        start_iteration = header.iteration
        rng_state = header.rng_state()
        config = model.config
        if args.iterations is not None:
            config = config.model_copy(update={"iterations": args.iterations})
            model.config = model.renderer.config = config
        echo(args, f"🔁 Resuming from iteration {start_iteration}")

    train_data = dataset
    if config.pose_noise_deg > 0:
        noise_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
        train_data = perturb_poses(dataset, config.pose_noise_deg, noise_rng)

    trainer = Trainer(config, train_data, model, rng_state)
    trainer.add_observer(ConsoleTrainingObserver(config.log_every))
    trainer.add_observer(JsonlLossObserver(out / LOG_FILE))
    summary = trainer.train(out, start_iteration)

    manifest = RunManifest(
        command="train",
        run_dir=str(out),
        seed=config.seed,
        config=config.model_dump(mode="json"),
        config_hash=config_hash(config),
        dataset_hash=dataset.content_hash(),
    )
    manifest.add_artifacts([out / LOG_FILE])
    manifest.add_artifacts(sorted((out / "checkpoints").glob("*.ndr")))

    if config.pose_noise_deg > 0:
        manifest.add_artifacts([write_pose_report(trainer.model, dataset, train_data, out)])

    finish(manifest, args)
    if summary.final is not None:
        echo(args, f"📉 Final loss: {summary.final.total:.6f}")
    echo(args, f"✅ {summary.iterations} iterations in {summary.elapsed_seconds:.1f}s")


def write_pose_report(
    model: ReconstructionModel, clean: Dataset, noisy: Dataset, out: Path
) -> Path:
    """Injected and refined pose errors against the clean poses."""
    reference = clean.normalized_poses()
    injected, _ = metrics.pose_error(noisy.normalized_poses(), reference)
    rotation, translation = metrics.pose_error(model.rig.refined_poses(), reference)
    report = {
        "injected_rotation": injected.to_dict(),
        "refined_rotation": rotation.to_dict(),
        "refined_translation": translation.to_dict(),
    }
    path = out / "pose_error.json"
    path.write_text(json.dumps(report, indent=2))
    print(f"🎯 Rotation error: injected {injected.mean:.3f}°, refined {rotation.mean:.3f}°")
    return path


def command_render(args: argparse.Namespace, settings: Settings) -> None:
    """Handle render command."""
    echo(args, "🎨 Rendering")
    echo(args, "=" * 40)

    model, header = load_checkpoint(args.checkpoint)
    frames = frames_from(args, model.n_frames)
    out = Path(args.out)
    dataset = dataio.load_dataset(args.dataset, settings.workers) if args.dataset else None
    if dataset is not None:
        validate_frame_range(frames, len(dataset))

    written: List[Path] = []
    color_l1: Dict[int, float] = {}
    norm = model.normalization
    for sub in ("color", "depth", "mask"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    for index in frames:
        images = render_frame(
            model.renderer,
            model.camera(index),
            index,
            workers=settings.workers,
            miss_band=model.config.miss_band,
        )
        name = dataio.FRAME_NAME.format(index)
        raw_depth = np.round(images.depth / norm.scale * norm.depth_scale)
        raw_depth = np.clip(np.where(images.opacity > 0.5, raw_depth, 0), 0, np.iinfo(np.uint16).max)
        dataio.write_color(out / "color" / name, np.clip(np.round(images.color * 255.0), 0, 255))
        dataio.write_depth(out / "depth" / name, raw_depth)
        dataio.write_mask(out / "mask" / name, images.opacity > 0.5)
        written.extend(out / sub / name for sub in ("color", "depth", "mask"))

        if dataset is not None:
            record = dataset.frames[index]
            if np.any(record.mask):
                observed = record.color.astype(np.float64) / 255.0
                color_l1[index] = float(np.mean(np.abs(images.color - observed)[record.mask]))
        echo(args, f"   🖼️  Frame {index}")

    if color_l1:
        path = out / "render_metrics.json"
        path.write_text(json.dumps({"masked_color_l1": {str(k): v for k, v in color_l1.items()}}, indent=2))
        written.append(path)
        echo(args, f"📊 Masked color L1: {np.mean(list(color_l1.values())):.4f}")

    manifest = RunManifest(
        command="render",
        run_dir=str(out),
        seed=model.config.seed,
        config=model.config.model_dump(mode="json"),
        config_hash=header.config_hash,
        dataset_hash=header.dataset_hash,
    )
    manifest.add_artifacts(written)
    finish(manifest, args)
    echo(args, f"✅ Rendered {len(frames)} frames")


def command_extract(args: argparse.Namespace, settings: Settings) -> None:
    """Handle extract command."""
    echo(args, "🧊 Mesh Extraction")
    echo(args, "=" * 40)

    model, header = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    suffix = f".{args.format}"
    if args.canonical:
        mesh = meshio.extract_canonical_mesh(model, args.res, workers=settings.workers)
        color_frame = 0
        path = out / f"mesh_canonical{suffix}"
    else:
        validate_frame_range([args.frame], model.n_frames)
        mesh = meshio.extract_frame_mesh(model, args.frame, args.res, settings.workers)
        color_frame = args.frame
        path = out / f"mesh_{args.frame:06d}{suffix}"
    if args.color:
        mesh = meshio.colorize_mesh(model, mesh, color_frame)
    meshio.write_mesh(mesh, path)

    manifest = RunManifest(
        command="extract",
        run_dir=str(out),
        seed=model.config.seed,
        config=model.config.model_dump(mode="json"),
        config_hash=header.config_hash,
        dataset_hash=header.dataset_hash,
    )
    manifest.add_artifacts([path])
    finish(manifest, args)
    echo(args, f"✅ {len(mesh.vertices)} vertices, {len(mesh.faces)} faces -> {path}")


def ground_truth_pairs(
    model: ReconstructionModel, dataset: Dataset, resolution: int, workers: int
) -> List[tuple]:
    """(frame, reconstructed mesh, ground-truth mesh) in normalized coordinates."""
    if dataset.root is None:
        raise MetricError("Chamfer needs a dataset directory with a gt/ bundle")
    gt_dir = Path(dataset.root) / "gt"
    paths = [gt_dir / f"mesh_{i:06d}.obj" for i in range(len(dataset))]
    missing = [p.name for p in paths if not p.is_file()]
    if missing:
        raise MetricError(
            f"Chamfer needs ground-truth meshes in {gt_dir}; missing {', '.join(missing[:3])}"
        )
    pairs = []
    for index, path in enumerate(paths):
        reference = meshio.read_mesh(path).transformed(model.normalization.normalize_points)
        pairs.append((index, meshio.extract_frame_mesh(model, index, resolution, workers), reference))
    return pairs


def command_eval(args: argparse.Namespace, settings: Settings) -> None:
    """Handle eval command."""
    echo(args, "📏 Evaluation")
    echo(args, "=" * 40)

    model, header = load_checkpoint(args.checkpoint)
    dataset = dataio.load_dataset(args.dataset, settings.workers)
    if len(dataset) != model.n_frames:
        raise MetricError(f"Dataset has {len(dataset)} frames, checkpoint has {model.n_frames}")
    if header.dataset_hash and header.dataset_hash != dataset.content_hash():
        logger.warning("Dataset content differs from the one the checkpoint was trained on")

    seed = args.seed if args.seed is not None else model.config.seed
    reports: Dict[str, dict] = {}
    if "geometry" in args.metrics:
        report = metrics.geometry_error(model, dataset, workers=settings.workers)
        reports[report.name] = report.to_dict()
        echo(args, f"   📐 Geometry error: mean {report.mean:.3f} mm, median {report.median:.3f} mm")
    if "cycle" in args.metrics:
        report = metrics.eval_cycle_consistency(
            model, dataset, args.triples, rng=np.random.default_rng(seed), mode=args.cycle_mode
        )
        reports[report.name] = report.to_dict()
        echo(args, f"   🔄 Cycle consistency: mean {report.mean:.3e}")
    if "chamfer" in args.metrics:
        report = metrics.chamfer_report(ground_truth_pairs(model, dataset, args.res, settings.workers))
        reports[report.name] = report.to_dict()
        echo(args, f"   📦 Chamfer: mean {report.mean:.4f}")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "metrics.json"
    path.write_text(json.dumps(reports, indent=2))

    manifest = RunManifest(
        command="eval",
        run_dir=str(out),
        seed=seed,
        config=model.config.model_dump(mode="json"),
        config_hash=header.config_hash,
        dataset_hash=dataset.content_hash(),
    )
    manifest.add_artifacts([path])
    finish(manifest, args)
    echo(args, f"✅ Metrics written to {path}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ndr",
        description="Dynamic RGB-D neural reconstruction",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  %(prog)s synth --config configs/sphere_twist.spec --out data/sphere_twist
  %(prog)s train --config configs/sphere_twist.cfg --dataset data/sphere_twist --out runs/a
  %(prog)s render runs/a/checkpoints/final.ndr --frames 0:5 --out runs/a/render
  %(prog)s extract runs/a/checkpoints/final.ndr --frame 0 --res 128 --out runs/a/mesh
  %(prog)s eval runs/a/checkpoints/final.ndr --dataset data/sphere_twist --out runs/a/eval
        """,
    )

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="Random seed (overrides config)")
    common.add_argument("--out", required=True, help="Output directory")
    common.add_argument("--config", type=Path, default=None, help="key=value config file")
    common.add_argument("--quiet", action="store_true", help="Only print warnings and errors")

    subparsers = parser.add_subparsers(dest="command", help="Available commands")

    synth = subparsers.add_parser("synth", parents=[common], help="Generate a synthetic dataset")
    synth.add_argument("--frames", type=positive_int, default=None, help="Override the frame count")

    train = subparsers.add_parser("train", parents=[common], help="Optimize a model on a dataset")
    train.add_argument("--dataset", type=Path, required=True, help="Dataset directory")
    train.add_argument("--iterations", type=int, default=None, help="Override iterations")
    train.add_argument(
        "--pose-noise-deg", type=float, default=None, help="Euler noise injected into poses"
    )
    train.add_argument("--supervision", choices=["rgbd", "rgb", "depth"], default=None)
    train.add_argument("--precision", choices=["float32", "float64"], default=None)
    train.add_argument("--resume", type=Path, default=None, help="Checkpoint to continue from")

    render = subparsers.add_parser("render", parents=[common], help="Render frames from a checkpoint")
    render.add_argument("checkpoint", type=Path)
    render.add_argument("--frames", default=None, help="Frame range a:b (default: all)")
    render.add_argument("--dataset", type=Path, default=None, help="Compare against observed color")

    extract = subparsers.add_parser("extract", parents=[common], help="Extract a mesh")
    extract.add_argument("checkpoint", type=Path)
    target = extract.add_mutually_exclusive_group(required=True)
    target.add_argument("--canonical", action="store_true", help="Canonical-space surface")
    target.add_argument("--frame", type=int, help="Observation-space surface of one frame")
    extract.add_argument("--res", type=positive_int, default=meshio.DEFAULT_RESOLUTION)
    extract.add_argument("--format", choices=["obj", "ply"], default="obj")
    extract.add_argument("--color", action="store_true", help="Add vertex colors")

    evaluate = subparsers.add_parser("eval", parents=[common], help="Evaluate a checkpoint")
    evaluate.add_argument("checkpoint", type=Path)
    evaluate.add_argument("--dataset", type=Path, required=True, help="Dataset directory")
    evaluate.add_argument(
        "--metrics", type=metric_list, default=list(METRIC_NAMES), help="geometry,cycle,chamfer"
    )
    evaluate.add_argument("--triples", type=positive_int, default=metrics.DEFAULT_TRIPLES)
    evaluate.add_argument("--cycle-mode", choices=metrics.CYCLE_MODES, default="bijective")
    evaluate.add_argument("--res", type=positive_int, default=meshio.DEFAULT_RESOLUTION)
    return parser


COMMANDS = {
    "synth": command_synth,
    "train": command_train,
    "render": command_render,
    "extract": command_extract,
    "eval": command_eval,
}


def main(argv: Optional[Sequence[str]] = None) -> None:
    """Main entry point."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        sys.exit(2)

    settings = get_settings()
    setup_logging("WARNING" if args.quiet else settings.log_level, settings.log_file)

    try:
        COMMANDS[args.command](args, settings)
    except NdrError as e:
        print(f"\n❌ Error: {e}")
        sys.exit(1)
    except KeyboardInterrupt:
        print("\n\n⚠️  Operation cancelled by user.")
        sys.exit(1)
    except Exception as e:
        logger.exception("Unexpected error occurred")
        print(f"\n❌ Unexpected error: {e}")
        sys.exit(1)


if __name__ == "__main__":
    main()
