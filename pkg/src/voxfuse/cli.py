"""Command-line surface: synth, map, fuse, query, eval, bench-memory."""
from __future__ import annotations

import argparse
import io
import json
import math
import os
import sys
from contextlib import contextmanager

import numpy as np

from . import formats, report, synth
from .core import ConfigError, MapConfig, StreamFormatError
from .fusion import fuse_all
from .pipeline import run_mapping
from .query_eval import LAYER_CHOICES, evaluate, layer_embeddings, predict_classes, similarity_map

SEED_ENV = "FUS3D_SEED"


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, StreamFormatError, ValueError, OSError) as e:
        json.dump({"error": type(e).__name__, "message": str(e)}, sys.stderr)
        sys.stderr.write("\n")
        return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voxfuse",
        description="Dual-layer semantic voxel mapping with cross-layer fusion.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scene stream + gt + prompts")
    p.add_argument("--scene", choices=("orbit", "corridor"), default="orbit")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise-profile", default="default",
                   choices=("noiseless", "default", "split-heavy"))
    p.add_argument("--frames", type=int, default=30, help="orbit frame count")
    p.add_argument("--objects", type=int, default=5, help="orbit object count")
    p.add_argument("--length", type=float, default=10.0, help="corridor length (m)")
    p.add_argument("--density", type=float, default=0.8, help="corridor objects per meter")
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--voxel-size", type=float, default=0.05)
    p.add_argument("--patch-weights", action="store_true",
                   help="emit per-patch saliency weights")
    p.add_argument("--stream", default="scene.stream", help="output stream path, - for stdout")
    p.add_argument("--gt", default="scene.gt")
    p.add_argument("--prompts", default="scene.prompts")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("map", help="build a map snapshot from a frame stream")
    p.add_argument("stream", help="input stream path, - for stdin")
    p.add_argument("--config", help="flat key-value config file")
    p.add_argument("--mode", choices=("global", "sliding-window"), default="global")
    p.add_argument("--window-radius", help="meters, or 'inf'")
    p.add_argument("--fusion-period", type=int)
    p.add_argument("--lambda", dest="variance_ratio", type=float)
    p.add_argument("--no-evidence-gating", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="snapshot path, - for stdout")
    p.add_argument("--report", help="write the run report JSON here")
    p.set_defaults(func=cmd_map)

    p = sub.add_parser("fuse", help="run cross-layer fusion over a snapshot")
    p.add_argument("snapshot", help="input snapshot path, - for stdin")
    p.add_argument("--lambda", dest="variance_ratio", type=float,
                   help="override the snapshot's variance ratio")
    p.add_argument("--out", required=True, help="snapshot path, - for stdout")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("query", help="text-prompt similarity or class prediction")
    p.add_argument("snapshot")
    p.add_argument("--prompts", required=True)
    p.add_argument("--layer", choices=LAYER_CHOICES, default="instance-fused")
    mode = p.add_mutually_exclusive_group(required=True)
    mode.add_argument("--similarity", metavar="LABEL",
                      help="per-voxel cosine similarity CSV for this label")
    mode.add_argument("--predict", action="store_true",
                      help="write predicted classes as a gt-format file")
    p.add_argument("--out", default="-", help="output path, - for stdout")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("eval", help="segmentation metrics from predictions + gt")
    p.add_argument("--pred", required=True, help="predicted-class gt-format file")
    p.add_argument("--gt", required=True)
    p.add_argument("--prompts", required=True)
    p.add_argument("--no-background", action="store_true")
    p.add_argument("--layer", help="label recorded in the report")
    p.add_argument("--out", default="-", help="metrics JSON path, - for stdout")
    p.add_argument("--figure", help="render a per-class IoU figure here (png)")
    p.add_argument("--per-class-csv", help="write per-class IoU table here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench-memory", help="corridor sweep of map memory by mode")
    p.add_argument("--lengths", default="10,20,40", help="comma-separated meters")
    p.add_argument("--density", type=float, default=0.8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--window-radius", type=float, default=6.0)
    p.add_argument("--noise-profile", default="default",
                   choices=("noiseless", "default", "split-heavy"))
    p.add_argument("--out", default="bench_memory",
                   help="output prefix for .csv/.json/.png")
    p.set_defaults(func=cmd_bench_memory)
    return parser


def _resolve_seed(args) -> int:
    env = os.environ.get(SEED_ENV)
    return int(env) if env is not None else args.seed


@contextmanager
def _open_out(path: str, binary: bool = True):
    if path == "-":
        yield sys.stdout.buffer if binary else sys.stdout
    else:
        with open(path, "wb" if binary else "w") as fp:
            yield fp


@contextmanager
def _open_in(path: str):
    if path == "-":
        yield sys.stdin.buffer
    else:
        with open(path, "rb") as fp:
            yield fp


def cmd_synth(args) -> int:
    seed = _resolve_seed(args)
    noise = synth.NoiseModel.profile(args.noise_profile)
    if args.scene == "orbit":
        scene, trajectory = synth.orbit_scene(
            n_objects=args.objects, seed=seed, dim=args.dim, n_frames=args.frames
        )
    else:
        scene, trajectory = synth.corridor_scene(
            args.length, objects_per_meter=args.density, seed=seed, dim=args.dim
        )
    intrinsics = synth.default_intrinsics()
    with _open_out(args.stream) as fp:
        gt, prompts = synth.generate_stream(
            scene, trajectory, intrinsics, noise, seed, fp,
            voxel_size=args.voxel_size, emit_patch_weights=args.patch_weights,
        )
    with open(args.gt, "wb") as fp:
        formats.write_gt_volume(fp, gt, args.voxel_size)
    with open(args.prompts, "wb") as fp:
        formats.write_prompts(fp, prompts)
    info = {
        "frames": len(trajectory),
        "gt_voxels": len(gt),
        "labels": prompts.labels,
        "stream": args.stream,
    }
    if args.stream != "-":
        print(json.dumps(info))
    return 0


def _load_config(args) -> MapConfig:
    if getattr(args, "config", None):
        with open(args.config) as fp:
            config = MapConfig.from_text(fp.read())
    else:
        config = MapConfig()
    if getattr(args, "window_radius", None) is not None:
        wr = args.window_radius
        config.window_radius = math.inf if str(wr).lower() in ("inf", "infinite") else float(wr)
    if getattr(args, "fusion_period", None) is not None:
        config.fusion_period = args.fusion_period
    if getattr(args, "variance_ratio", None) is not None:
        config.variance_ratio = args.variance_ratio
    if getattr(args, "no_evidence_gating", False):
        config.evidence_gating = False
    return config


def cmd_map(args) -> int:
    config = _load_config(args)
    seed = _resolve_seed(args)
    with _open_in(args.stream) as fp:
        snapshot, run_report = run_mapping(fp, config, mode=args.mode, seed=seed)
    with _open_out(args.out) as fp:
        formats.write_snapshot(fp, snapshot)
    report_json = json.dumps(run_report.to_dict(), indent=2, sort_keys=True)
    if args.report:
        with open(args.report, "w") as fp:
            fp.write(report_json + "\n")
    if args.out != "-":
        print(report_json)
    return 0


def cmd_fuse(args) -> int:
    with _open_in(args.snapshot) as fp:
        snap = formats.read_snapshot(fp)
    lam = args.variance_ratio if args.variance_ratio is not None else snap.config.variance_ratio
    fused_dense, fused_instances, summary = fuse_all(snap.dense, snap.instance, lam)
    for iid, result in fused_instances.items():
        rec = snap.instance.instances[iid]
        rec.fused_embedding = result.embedding
        rec.evidence_score = result.total_precision
    snap.fused_dense = fused_dense
    with _open_out(args.out) as fp:
        formats.write_snapshot(fp, snap)
    if args.out != "-":
        print(json.dumps({
            "dense_fused": summary.dense_fused,
            "instances_fused": summary.instances_fused,
            "instances_skipped": summary.instances_skipped,
        }))
    return 0


def _snapshot_layer_embeddings(snap: formats.MapSnapshot, layer: str):
    fused_dense = snap.fused_dense
    fused_instances = None
    needs_dense = layer == "dense-fused" and fused_dense is None
    has_stored_instance_fusion = any(
        rec.fused_embedding is not None for rec in snap.instance.instances.values()
    )
    needs_instance = layer == "instance-fused" and not has_stored_instance_fusion
    if needs_dense or needs_instance:
        fd, fi, _ = fuse_all(snap.dense, snap.instance, snap.config.variance_ratio)
        if needs_dense:
            fused_dense = fd
        if needs_instance:
            fused_instances = fi
    return layer_embeddings(
        layer, snap.dense, snap.instance,
        fused_dense=fused_dense, fused_instances=fused_instances,
    )


def cmd_query(args) -> int:
    with _open_in(args.snapshot) as fp:
        snap = formats.read_snapshot(fp)
    with open(args.prompts, "rb") as fp:
        prompts = formats.read_prompts(fp)
    if prompts.dim != snap.embedding_dim:
        raise ConfigError(
            f"prompt dim {prompts.dim} != snapshot dim {snap.embedding_dim}"
        )
    embeddings = _snapshot_layer_embeddings(snap, args.layer)
    if args.predict:
        predictions = predict_classes(embeddings, prompts)
        with _open_out(args.out) as fp:
            formats.write_gt_volume(fp, predictions, snap.config.voxel_size)
    else:
        try:
            idx = prompts.labels.index(args.similarity)
        except ValueError:
            raise ConfigError(f"label {args.similarity!r} not in the prompt set") from None
        sims = similarity_map(embeddings, prompts.embeddings[idx])
        with _open_out(args.out, binary=False) as fp:
            report.write_similarity_csv(sims, fp)
    return 0


def cmd_eval(args) -> int:
    with open(args.pred, "rb") as fp:
        predictions, pred_vs = formats.read_gt_volume(fp)
    with open(args.gt, "rb") as fp:
        gt, gt_vs = formats.read_gt_volume(fp)
    with open(args.prompts, "rb") as fp:
        prompts = formats.read_prompts(fp)
    if abs(pred_vs - gt_vs) > 1e-6:
        raise ConfigError(f"voxel size mismatch: predictions {pred_vs}, gt {gt_vs}")
    seg_report = evaluate(
        predictions, gt, prompts,
        exclude_background=args.no_background, layer=args.layer,
    )
    with _open_out(args.out, binary=False) as fp:
        report.write_metrics_json(seg_report, fp)
    if args.figure:
        report.eval_figure(seg_report, args.figure)
    if args.per_class_csv:
        report.write_per_class_csv(seg_report, args.per_class_csv)
    return 0


def cmd_bench_memory(args) -> int:
    lengths = [float(x) for x in args.lengths.split(",") if x.strip()]
    if not lengths:
        raise ConfigError("no corridor lengths given")
    seed = _resolve_seed(args)
    noise = synth.NoiseModel.profile(args.noise_profile)
    intrinsics = synth.default_intrinsics()
    rows = []
    for length in lengths:
        scene, trajectory = synth.corridor_scene(length, args.density, seed, dim=args.dim)
        buf = io.BytesIO()
        synth.generate_stream(scene, trajectory, intrinsics, noise, seed, buf)
        for mode in ("global", "sliding-window"):
            config = MapConfig(window_radius=args.window_radius)
            buf.seek(0)
            snapshot, run_report = run_mapping(buf, config, mode=mode, seed=seed)
            mem = run_report.memory
            rows.append({
                "length_m": length,
                "mode": mode,
                "frames": run_report.frames_seen,
                "dense_voxels": run_report.dense_voxels,
                "instances": run_report.instances,
                "dense_bytes": mem["dense_bytes"],
                "instance_bytes": mem["instance_bytes"],
                "total_bytes": mem["total_bytes"],
                "peak_dense_bytes": run_report.peak_memory["dense_bytes"],
                "peak_total_bytes": run_report.peak_memory["total_bytes"],
            })
    report.write_bench_csv(rows, args.out + ".csv")
    with open(args.out + ".json", "w") as fp:
        json.dump(rows, fp, indent=2)
        fp.write("\n")
    report.bench_figure(rows, args.out + ".png")
    print(json.dumps(rows))
    return 0


if __name__ == "__main__":
    sys.exit(main())
