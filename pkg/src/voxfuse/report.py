"""Report rendering: metrics JSON, delimited tables, matplotlib figures."""
from __future__ import annotations

import csv
import json
from typing import Dict, List

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .core import VoxelKey
from .query_eval import SegmentationReport


def write_metrics_json(report: SegmentationReport, fp) -> None:
    json.dump(report.to_dict(), fp, indent=2, sort_keys=True)
    fp.write("\n")


def write_per_class_csv(report: SegmentationReport, path) -> None:
    with open(path, "w", newline="") as fp:
        writer = csv.writer(fp)
        writer.writerow(["class", "iou", "gt_voxels"])
        for name, iou in report.per_class_iou.items():
            writer.writerow([name, f"{iou:.6f}", report.class_frequencies.get(name, 0)])


def write_similarity_csv(similarities: Dict[VoxelKey, float], fp) -> None:
    writer = csv.writer(fp)
    writer.writerow(["ix", "iy", "iz", "similarity"])
    for key in sorted(similarities):
        writer.writerow([key[0], key[1], key[2], f"{similarities[key]:.6f}"])


def eval_figure(report: SegmentationReport, path) -> None:
    """Bar chart of per-class IoU with the summary metrics in the title."""
    names = list(report.per_class_iou)
    values = [report.per_class_iou[n] for n in names]
    fig, ax = plt.subplots(figsize=(max(4.0, 0.6 * len(names) + 1.5), 3.2))
    ax.bar(range(len(names)), values, color="#4878d0")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=45, ha="right", fontsize=8)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("IoU")
    ax.axhline(report.miou, color="#d65f5f", lw=1, ls="--", label=f"mIoU {report.miou:.3f}")
    ax.legend(fontsize=8)
    title = f"mIoU {report.miou:.4f}  fmIoU {report.fmiou:.4f}  Acc {report.acc:.4f}"
    if report.layer:
        title = f"[{report.layer}] " + title
    ax.set_title(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


BENCH_FIELDS = [
    "length_m", "mode", "frames", "dense_voxels", "instances",
    "dense_bytes", "instance_bytes", "total_bytes",
    "peak_dense_bytes", "peak_total_bytes",
]


def write_bench_csv(rows: List[dict], path) -> None:
    with open(path, "w", newline="") as fp:
        writer = csv.DictWriter(fp, fieldnames=BENCH_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in BENCH_FIELDS})


def bench_figure(rows: List[dict], path) -> None:
    """Dense-layer bytes against corridor length, one line per mapping mode."""
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    for mode, style in (("global", "o-"), ("sliding-window", "s--")):
        pts = sorted(
            ((r["length_m"], r["dense_bytes"]) for r in rows if r["mode"] == mode)
        )
        if pts:
            ax.plot([p[0] for p in pts], [p[1] / 1e6 for p in pts], style, label=mode)
    ax.set_xlabel("corridor length (m)")
    ax.set_ylabel("dense-layer semantic memory (MB)")
    ax.set_title("Dense map memory vs. environment size")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
