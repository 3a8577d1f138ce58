"""Command-line driver: corpus synthesis, occluder augmentation, pipeline
runs, the four-condition ablation, and mask evaluation.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Every command is
deterministic given its flags and seeds and writes a run_config.json snapshot
beside its outputs.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

from .augment import (
    PlacementPolicy,
    build_augmented_dataset,
    builtin_sprites,
    load_sprite_library,
    save_sprite_library,
)
from .core import (
    ManifestError,
    RasterMask,
    binarize,
    dilate,
    load_raster,
    read_manifest,
    save_raster,
)
from .metrics import aggregate, pixel_confusion, pixel_scores
from .nodeproto import NodeError
from .pipeline import (
    CONDITIONS,
    PipelineConfig,
    PipelineResult,
    RunReport,
    emit_figure,
    emit_panel,
    emit_report,
    pipeline_config_from_dict,
    pipeline_config_to_dict,
    run_ablation,
    run_dataset,
)
from .synthgen import SceneConfig, generate_corpus, scene_config_to_dict

log = logging.getLogger(__name__)


class UsageError(Exception):
    """Bad flag values or an unreadable/invalid config file."""


# ---------------------------------------------------------------------------
# Shared plumbing


def _write_snapshot(out_dir: str, payload: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "run_config.json")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_pipeline_config(args) -> PipelineConfig:
    if args.config is None:
        cfg = PipelineConfig()
    else:
        try:
            with open(args.config, encoding="utf-8") as fh:
                cfg = pipeline_config_from_dict(json.load(fh))
        except (OSError, ValueError, TypeError, KeyError) as exc:
            raise UsageError(f"config {args.config}: {exc}")
    workers = getattr(args, "workers", None)
    if workers is not None:
        if workers < 1:
            raise UsageError("--workers must be >= 1")
        cfg = dataclasses.replace(cfg, workers=workers)
    return cfg


def _default_scratch(out_dir: str) -> None:
    """The scratch/ corner of the output layout hosts external-node scratch
    dirs unless the caller already pointed OCCLANE_SCRATCH somewhere."""
    if not os.environ.get("OCCLANE_SCRATCH"):
        scratch = os.path.join(out_dir, "scratch")
        os.makedirs(scratch, exist_ok=True)
        os.environ["OCCLANE_SCRATCH"] = scratch


def _read_corpus_seed(manifest_path: str):
    """Corpus seed from the snapshot next to the manifest: synth records it as
    its own seed, downstream commands carry it forward as corpus_seed."""
    path = os.path.join(os.path.dirname(os.path.abspath(manifest_path)), "run_config.json")
    try:
        with open(path, encoding="utf-8") as fh:
            snap = json.load(fh)
    except (OSError, ValueError):
        return None
    return snap.get("seed") if snap.get("command") == "synth" else snap.get("corpus_seed")


def _gt_mask(manifest, frame, threshold: int, eval_dilation: int) -> RasterMask:
    raw = load_raster(manifest.resolve(frame.lane_mask))
    if not isinstance(raw, RasterMask):
        raise ValueError(f"frame {frame.id!r}: lane mask is not single-channel")
    gt = binarize(raw, threshold)
    return dilate(gt, eval_dilation) if eval_dilation > 0 else gt


# ---------------------------------------------------------------------------
# Subcommands


def cmd_synth(args) -> int:
    scene = SceneConfig(
        width=args.width,
        height=args.height,
        lane_count=args.lane_count,
        horizon_y=args.horizon_y,
        stroke=args.stroke,
        noise_sigma=args.noise_sigma,
        curvature_max=args.curvature_max,
    )
    manifest = generate_corpus(scene, args.count, args.out, seed=args.seed)
    _write_snapshot(args.out, {
        "command": "synth",
        "count": args.count,
        "seed": args.seed,
        "scene": scene_config_to_dict(scene),
    })
    print(f"wrote {len(manifest.frames)} frames under {args.out}")
    return 0


def cmd_sprites(args) -> int:
    sprites = builtin_sprites()
    save_sprite_library(sprites, args.out)
    print(f"wrote {len(sprites)} sprites under {args.out}")
    return 0


def cmd_augment(args) -> int:
    manifest = read_manifest(args.manifest)
    sprites = load_sprite_library(args.sprites) if args.sprites else builtin_sprites()
    policy = PlacementPolicy(
        occluders_per_frame=(args.min_occluders, args.max_occluders),
        max_mutual_iou=args.max_mutual_iou,
        seed=args.seed,
    )
    out_dir = args.out or manifest.base_dir
    corpus_seed = _read_corpus_seed(args.manifest)
    augmented = build_augmented_dataset(manifest, sprites, policy, out_dir)
    _write_snapshot(out_dir, {
        "command": "augment",
        "manifest": os.path.abspath(args.manifest),
        "sprites": os.path.abspath(args.sprites) if args.sprites else "builtin",
        "seed": args.seed,
        "corpus_seed": corpus_seed,
        "occluders_per_frame": [args.min_occluders, args.max_occluders],
        "max_mutual_iou": args.max_mutual_iou,
    })
    print(f"augmented {len(augmented.frames)} frames under {out_dir}")
    return 0


def cmd_ablate(args) -> int:
    manifest = read_manifest(args.manifest)
    cfg = _load_pipeline_config(args)
    _default_scratch(args.out)

    bare = [f.id for f in manifest.frames
            if f.occluded_image is None or not f.occlusion_boxes]
    if bare:
        raise RuntimeError(
            "frames missing ablation assets (occluded image or ground-truth boxes): "
            + ", ".join(bare))

    corpus_seed = args.corpus_seed
    if corpus_seed is None:
        corpus_seed = _read_corpus_seed(args.manifest)
    report = run_ablation(manifest, cfg, corpus_seed=corpus_seed)

    reports_dir = os.path.join(args.out, "reports")
    emit_report(report, os.path.join(reports_dir, "ablation.csv"), fmt="csv")
    emit_report(report, os.path.join(reports_dir, "ablation.json"), fmt="json")
    emit_figure(report, os.path.join(reports_dir, "ablation.png"))

    frames_by_id = {f.id: f for f in manifest.frames}
    for fid in report.frame_ids[:args.panels]:
        fr = frames_by_id[fid]
        entries = [
            ("occluded", load_raster(manifest.resolve(fr.occluded_image))),
            ("ground truth", load_raster(manifest.resolve(fr.lane_mask))),
        ]
        entries += [(cond, report.per_frame[fid][cond].predicted_mask) for cond in CONDITIONS]
        emit_panel(entries, os.path.join(args.out, "panels", f"{fid}.png"))

    _write_snapshot(args.out, {
        "command": "ablate",
        "manifest": os.path.abspath(args.manifest),
        "corpus_seed": corpus_seed,
        "panels": args.panels,
        "pipeline": pipeline_config_to_dict(cfg),
    })
    if report.failed:
        log.warning("%d frame(s) failed at least one condition and were dropped "
                    "from the aggregates", len(report.failed))
    for cond in CONDITIONS:
        macro = report.conditions[cond].macro
        print(f"{cond:>20}  IoU {macro.iou:.4f}  Dice {macro.dice:.4f}")
    print(f"reports under {reports_dir}")
    return 0


def cmd_run(args) -> int:
    manifest = read_manifest(args.manifest)
    cfg = _load_pipeline_config(args)
    _default_scratch(args.out)
    report = run_dataset(manifest, cfg)

    reports_dir = os.path.join(args.out, "reports")
    emit_report(report, os.path.join(reports_dir, "run.csv"), fmt="csv")
    emit_report(report, os.path.join(reports_dir, "run.json"), fmt="json")
    emit_figure(report, os.path.join(reports_dir, "run.png"))

    frames_by_id = {f.id: f for f in manifest.frames}
    masks_dir = os.path.join(args.out, "masks")
    panels = 0
    for result in report.results:
        if not result.ok:
            continue
        save_raster(result.predicted_mask, os.path.join(masks_dir, f"{result.frame_id}.png"))
        if panels < args.panels:
            fr = frames_by_id[result.frame_id]
            source_rel = fr.occluded_image or fr.clear_image
            entries = [
                ("input", load_raster(manifest.resolve(source_rel))),
                ("ground truth", load_raster(manifest.resolve(fr.lane_mask))),
                ("inpainted", result.inpainted),
                ("prediction", result.predicted_mask),
            ]
            emit_panel(entries, os.path.join(args.out, "panels", f"{result.frame_id}.png"))
            panels += 1

    _write_snapshot(args.out, {
        "command": "run",
        "manifest": os.path.abspath(args.manifest),
        "panels": args.panels,
        "pipeline": pipeline_config_to_dict(cfg),
    })
    for stage, stats in report.timing_stats.items():
        print(f"{stage:>8}  mean {stats['mean_ms']:8.2f} ms  median {stats['median_ms']:8.2f} ms")
    if report.aggregate is not None:
        macro = report.aggregate.macro
        print(f"macro IoU {macro.iou:.4f}  Dice {macro.dice:.4f} over "
              f"{report.n_frames - report.n_failed}/{report.n_frames} frames")
    if report.failures:
        for fid, msg in report.failures.items():
            log.error("frame %s failed: %s", fid, msg)
    if report.too_many_failures:
        print(f"error: {report.n_failed}/{report.n_frames} frames failed", file=sys.stderr)
        return 1
    return 0


def cmd_eval(args) -> int:
    manifest = read_manifest(args.manifest)
    results, missing = [], []
    for frame in manifest.frames:
        pred_path = os.path.join(args.pred, frame.id + ".png")
        if not os.path.isfile(pred_path):
            missing.append(frame.id)
            continue
        raw = load_raster(pred_path)
        if not isinstance(raw, RasterMask):
            raise ValueError(f"prediction {pred_path} is not single-channel")
        pred = binarize(raw, args.binarize_threshold)
        gt = _gt_mask(manifest, frame, args.binarize_threshold, args.eval_dilation)
        conf = pixel_confusion(pred, gt)
        results.append(PipelineResult(frame_id=frame.id, confusion=conf,
                                      scores=pixel_scores(conf)))

    known = {f.id for f in manifest.frames}
    strays = sorted(
        name[:-4] for name in os.listdir(args.pred)
        if name.endswith(".png") and name[:-4] not in known
    )
    for fid in missing:
        print(f"unmatched: no prediction for frame {fid}", file=sys.stderr)
    for fid in strays:
        print(f"unmatched: prediction {fid} matches no manifest frame", file=sys.stderr)
    if not results:
        print("error: no prediction/ground-truth pairs to score", file=sys.stderr)
        return 1

    report = RunReport(
        results=results,
        aggregate=aggregate([r.confusion for r in results]),
        timing_stats={},
        failures={fid: "score: missing prediction" for fid in missing},
        n_frames=len(manifest.frames),
        n_failed=len(missing),
        config={"command": "eval",
                "binarize_threshold": args.binarize_threshold,
                "eval_dilation": args.eval_dilation},
    )
    reports_dir = os.path.join(args.out, "reports")
    emit_report(report, os.path.join(reports_dir, "eval.csv"), fmt="csv")
    emit_report(report, os.path.join(reports_dir, "eval.json"), fmt="json")
    emit_figure(report, os.path.join(reports_dir, "eval.png"))
    _write_snapshot(args.out, {
        "command": "eval",
        "manifest": os.path.abspath(args.manifest),
        "pred": os.path.abspath(args.pred),
        "binarize_threshold": args.binarize_threshold,
        "eval_dilation": args.eval_dilation,
    })

    header = f"{'frame':<16}{'IOU':>10}{'Precision':>11}{'Recall':>9}{'Dice':>9}"
    print(header)

    def cell(v):
        return "      --" if v is None else f"{v:8.4f}"

    for r in results:
        s = r.scores
        print(f"{r.frame_id:<16}{cell(s.iou):>10}{cell(s.precision):>11}"
              f"{cell(s.recall):>9}{cell(s.dice):>9}")
    for label, s in (("macro", report.aggregate.macro), ("micro", report.aggregate.micro)):
        print(f"{label:<16}{cell(s.iou):>10}{cell(s.precision):>11}"
              f"{cell(s.recall):>9}{cell(s.dice):>9}")
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="occlane",
        description="Occlusion-aware lane detection: synthesize corpora, add "
                    "occluders, run detect/inpaint/segment pipelines, evaluate.",
    )
    parser.add_argument("--verbose", action="store_true", help="log at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic clear-road corpus")
    p.add_argument("--out", required=True, help="output corpus directory")
    p.add_argument("--count", type=int, required=True, help="number of scenes")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--width", type=int, default=640)
    p.add_argument("--height", type=int, default=360)
    p.add_argument("--lane-count", type=int, default=3)
    p.add_argument("--horizon-y", type=int, default=120)
    p.add_argument("--stroke", type=int, default=5)
    p.add_argument("--noise-sigma", type=float, default=6.0)
    p.add_argument("--curvature-max", type=float, default=1.5e-4)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("sprites", help="write the built-in occluder sprite library")
    p.add_argument("--out", required=True, help="sprite directory to create")
    p.set_defaults(func=cmd_sprites)

    p = sub.add_parser("augment", help="composite occluders onto a clear corpus")
    p.add_argument("--manifest", required=True, help="corpus manifest.json")
    p.add_argument("--out", default=None, help="output directory (default: in place)")
    p.add_argument("--sprites", default=None, help="sprite directory (default: built-ins)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-occluders", type=int, default=1)
    p.add_argument("--max-occluders", type=int, default=3)
    p.add_argument("--max-mutual-iou", type=float, default=0.3)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("ablate", help="score the segmenter under the four occlusion conditions")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="pipeline config JSON")
    p.add_argument("--workers", type=int, default=None, help="override config worker count")
    p.add_argument("--panels", type=int, default=4, help="comparison panels for the first K frames")
    p.add_argument("--corpus-seed", type=int, default=None,
                   help="seed recorded in the report (default: read from the corpus snapshot)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("run", help="run the detect/inpaint/segment pipeline over a corpus")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="pipeline config JSON")
    p.add_argument("--workers", type=int, default=None, help="override config worker count")
    p.add_argument("--panels", type=int, default=4)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="score predicted masks against a manifest's ground truth")
    p.add_argument("--manifest", required=True, help="manifest supplying ground-truth masks")
    p.add_argument("--pred", required=True, help="directory of <frame_id>.png predictions")
    p.add_argument("--out", required=True)
    p.add_argument("--binarize-threshold", type=int, default=128)
    p.add_argument("--eval-dilation", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    # A command may default OCCLANE_SCRATCH into its own out/scratch; restore
    # the caller's environment afterwards so the default is per-invocation.
    had_scratch = os.environ.get("OCCLANE_SCRATCH")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (ManifestError, NodeError, OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    finally:
        if had_scratch is None:
            os.environ.pop("OCCLANE_SCRATCH", None)
        else:
            os.environ["OCCLANE_SCRATCH"] = had_scratch


if __name__ == "__main__":
    sys.exit(main())
