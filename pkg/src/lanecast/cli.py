"""Command-line entry point: ``lanecast <command> [--config FILE] [--seed N]``.

Outputs go under ``--output-dir``, else ``$LANECAST_OUTPUT_DIR``, else
``./lanecast-output``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .errors import LanecastError

OUTPUT_ENV = "LANECAST_OUTPUT_DIR"
DEFAULT_OUTPUT = "lanecast-output"

log = logging.getLogger("lanecast")


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise LanecastError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise LanecastError(f"config {path} must hold a JSON object")
    return data


def output_dir(args) -> Path:
    root = Path(args.output_dir or os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT)
    root.mkdir(parents=True, exist_ok=True)
    return root


def _write_json(path: Path, data) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=1, default=str))
    return path


# ---------------------------------------------------------------- commands


def cmd_synth(args, cfg) -> int:
    from .synth import SceneConfig, SyntheticConfig, clip_seed, synthesize_clip, write_clip
    from .dataset import ManeuverClass

    sc = SyntheticConfig(**{**cfg, "seed": args.seed})
    root = output_dir(args) / "synth"
    scene = SceneConfig(sc.height, sc.width)
    for i in range(sc.clips_per_class):
        for cls in ManeuverClass:
            clip_id = f"{cls.name.lower()}-{i:04d}"
            frames, track = synthesize_clip(cls, sc.length, clip_seed(sc.seed, clip_id), scene, clip_id)
            write_clip(root / clip_id, frames, track)
    print(f"wrote {3 * sc.clips_per_class} clips to {root}")
    return 0


def cmd_flow(args, cfg) -> int:
    from .flow import dense_flow, flow_to_color, to_gray, write_flow
    from .imageio import load_image, save_png

    a, b = load_image(args.frame_a), load_image(args.frame_b)
    t0 = time.perf_counter()
    flow = dense_flow(to_gray(a), to_gray(b), **cfg)
    elapsed = time.perf_counter() - t0
    root = output_dir(args)
    stem = args.name or Path(args.frame_a).stem
    write_flow(root / f"{stem}.lcfl", flow)
    save_png(root / f"{stem}_flow.png", flow_to_color(flow))
    mag = flow.magnitude()
    print(
        f"flow {flow.height}x{flow.width} in {elapsed:.3f}s: median u {np.median(flow.u):.3f} "
        f"v {np.median(flow.v):.3f} |d| {np.median(mag):.3f}; {flow.singular_pixels} singular pixels"
    )
    return 0


def cmd_roi(args, cfg) -> int:
    from .imageio import load_image, save_png
    from .roi import Contour, RoiSpec, extract_roi

    spec = RoiSpec(args.scale or cfg.get("scale", 2), args.size or cfg.get("output_size", 112))
    if args.box:
        cx, cy, w, h = (float(v) for v in args.box.split(","))
        contour = Contour.rectangle(cx, cy, w, h)
        image = load_image(args.image)
    else:
        from .imageio import load_clip

        clip = load_clip(args.clip)
        track = next((t for t in clip.tracks if t.track_id == args.track), None)
        if track is None:
            raise LanecastError(f"clip {args.clip} has no track {args.track!r}")
        contour = track.contour_at(args.frame)
        image = clip.load_frame(args.frame)
    roi = extract_roi(image, contour, spec)
    path = output_dir(args) / (args.name or f"roi_x{spec.scale}.png")
    save_png(path, roi)
    print(f"wrote {spec.output_size}x{spec.output_size} ROI (x{spec.scale}) to {path}")
    return 0


def _dataset_config(cfg: dict):
    from .harness import DatasetConfig

    return DatasetConfig.from_dict(cfg.get("dataset", {}))


def cmd_windows(args, cfg) -> int:
    from .dataset import ManeuverClass, class_counts, dataset_statistics, enumerate_windows
    from .harness import dataset_clips
    from .synth import clip_seed

    dcfg = _dataset_config(cfg)
    if args.source:
        dcfg = replace(dcfg, source=args.source)
    tracks = [t for clip in dataset_clips(dcfg, clip_seed(args.seed, "data")) for t in clip.tracks]
    stats = dataset_statistics(tracks)
    refs = enumerate_windows(
        tracks,
        dcfg.window_spec(),
        dcfg.stride,
        dcfg.guard,
        max_nlc_per_track=dcfg.max_nlc_per_track,
        nlc_from_event_tracks=dcfg.nlc_from_event_tracks,
    )
    windows = dict(zip((c.name for c in ManeuverClass), class_counts(int(r.label) for r in refs).tolist()))
    names = [c.name for c in ManeuverClass]
    print("," + ",".join(names))
    print("# of sequences," + ",".join(str(stats[n]["sequences"]) for n in names))
    print("avg. # of frames," + ",".join(f"{stats[n]['avg_frames']:.1f}" for n in names))
    print(f"# of windows (N={dcfg.horizon}, TTE={dcfg.tte})," + ",".join(str(windows[n]) for n in names))
    _write_json(output_dir(args) / "windows.json", {"statistics": stats, "windows": windows, "dataset": dcfg.__dict__})
    return 0


def _model_config(cfg: dict, dcfg):
    from .models import ModelConfig

    spec = cfg.get("model", "st-multiplier")
    if isinstance(spec, str):
        spec = {"preset": spec}
    spec = dict(spec)
    preset = spec.pop("preset", None)
    spec.setdefault("input_size", dcfg.input_size)
    spec.setdefault("flow_pairs", dcfg.flow_pairs)
    if preset:
        return ModelConfig.preset(preset, **spec)
    if spec.get("kind", "st-multiplier") == "st-multiplier":
        spec.setdefault("appearance_frames", dcfg.appearance_frames)
    return ModelConfig.from_dict(spec)


def _split(dcfg, seed: int):
    from .dataset import split_train_val
    from .harness import build_samples
    from .synth import clip_seed

    samples = build_samples(dcfg, clip_seed(seed, "data"))
    return split_train_val(samples, dcfg.train_fraction, seed=clip_seed(seed, "split"))


def cmd_train(args, cfg) -> int:
    from .harness import Budget, evaluate, train
    from .models import ModelConfig

    dcfg = _dataset_config(cfg)
    mcfg: ModelConfig = _model_config(cfg, dcfg)
    budget = Budget.from_dict(cfg.get("budget", {}))
    train_set, val_set = _split(dcfg, args.seed)
    root = output_dir(args)
    ckpt = root / (args.name or f"{mcfg.kind}.lcck")
    result = train(mcfg, train_set, val_set, budget, args.seed, ckpt, on_epoch=lambda e: print(json.dumps(e)))
    report = evaluate(result.model, val_set, seed=args.seed)
    _write_json(ckpt.with_suffix(".log.json"), {"history": result.history, "best_epoch": result.best_epoch, "report": report.to_dict()})
    print(f"best epoch {result.best_epoch}: validation accuracy {100 * report.accuracy:.2f}% -> {ckpt}")
    return 0


def cmd_eval(args, cfg) -> int:
    from .harness import evaluate
    from .models import load_model

    dcfg = _dataset_config(cfg)
    model, meta = load_model(args.checkpoint)
    _, val_set = _split(dcfg, args.seed)
    report = evaluate(model, val_set, seed=args.seed)
    path = _write_json(output_dir(args) / (args.name or "metrics.json"), report.to_dict())
    print(f"accuracy {100 * report.accuracy:.2f}% on {report.total} samples -> {path}")
    print("confusion (rows true NLC/LLC/RLC, columns predicted):")
    for row in report.confusion:
        print("  " + " ".join(f"{v:5d}" for v in row))
    return 0


def _grid(cfg: dict, seed):
    from .harness import ExperimentGrid

    data = dict(cfg.get("grid", cfg))
    if seed is not None:
        data["seeds"] = [seed]
    return ExperimentGrid.from_dict(data)


def cmd_grid(args, cfg) -> int:
    from .harness import run_grid

    grid = _grid(cfg, args.seed_given)
    root = output_dir(args)
    _write_json(root / "grid.json", cfg)
    results = run_grid(grid, root)
    failed = [r.cell.key for r in results if r.status != "ok"]
    print(f"{len(results) - len(failed)}/{len(results)} cells succeeded; tables in {root}")
    for key in failed:
        print(f"failed: {key}", file=sys.stderr)
    return 0 if not failed else 1


def cmd_report(args, cfg) -> int:
    from .harness import CellResult
    from .report import emit_report

    root = Path(args.results) if args.results else output_dir(args)
    if not cfg and (root / "grid.json").exists():
        cfg = json.loads((root / "grid.json").read_text())
    grid = _grid(cfg, args.seed_given)
    results = [CellResult.from_dict(json.loads(p.read_text())) for p in sorted((root / "cells").glob("*.json"))]
    wanted = {c.key for c in grid.cells()}
    results = [r for r in results if r.cell.key in wanted]
    paths = emit_report(grid, results, output_dir(args), args.format)
    for name, path in paths.items():
        print(f"{name}: {path}")
        print(path.read_text())
    failed = [r for r in results if r.status != "ok"] or wanted - {r.cell.key for r in results}
    return 0 if not failed else 1


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, default=None, help="global seed (default 0)")
    common.add_argument("--output-dir", help=f"output directory (default ${OUTPUT_ENV} or ./{DEFAULT_OUTPUT})")
    common.add_argument("--name", help="output file name")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="lanecast", description="Lane-change classification from vehicle-centred video.")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", parents=[common], help="render synthetic clips with annotations")

    p = sub.add_parser("flow", parents=[common], help="dense optical flow between two frames")
    p.add_argument("frame_a")
    p.add_argument("frame_b")

    p = sub.add_parser("roi", parents=[common], help="extract a square vehicle ROI")
    p.add_argument("image", nargs="?", help="image file (with --box)")
    p.add_argument("--box", help="cx,cy,w,h of the vehicle rectangle")
    p.add_argument("--clip", help="clip directory (with --track and --frame)")
    p.add_argument("--track", default="0")
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--scale", type=int)
    p.add_argument("--size", type=int)

    p = sub.add_parser("windows", parents=[common], help="dataset statistics and window counts")
    p.add_argument("--source", help="'synthetic' or a directory of clip directories")

    sub.add_parser("train", parents=[common], help="train one model")

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the validation split")
    p.add_argument("checkpoint")

    sub.add_parser("grid", parents=[common], help="run the experiment grid (resumable)")

    p = sub.add_parser("report", parents=[common], help="render grid results as tables")
    p.add_argument("--results", help="grid output directory (default: output dir)")
    p.add_argument("--format", choices=["csv", "markdown"], default="csv")
    return parser


COMMANDS = {
    "synth": cmd_synth,
    "flow": cmd_flow,
    "roi": cmd_roi,
    "windows": cmd_windows,
    "train": cmd_train,
    "eval": cmd_eval,
    "grid": cmd_grid,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    args.seed_given = args.seed
    if args.seed is None:
        args.seed = 0
    if args.command == "roi" and not (args.box and args.image) and not args.clip:
        print("lanecast roi: give IMAGE --box cx,cy,w,h or --clip DIR", file=sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](args, _load_config(args.config))
    except (LanecastError, ValueError, OSError) as exc:
        print(f"lanecast {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
