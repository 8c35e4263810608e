"""Text-prompt queries, per-voxel class prediction, and 3D segmentation metrics."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .core import ConfigError, UndefinedSimilarityError, VoxelKey
from .dense_layer import DenseLayer
from .fusion import FusedDenseVoxel, FusedInstanceResult
from .instance_layer import InstanceLayer

LAYER_CHOICES = ("dense", "dense-fused", "instance", "instance-fused")


@dataclass
class PromptSet:
    """Class labels with their externally computed text embeddings."""

    labels: List[str]
    embeddings: np.ndarray          # (C, d) float32
    background_labels: frozenset = frozenset()

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float32)
        if len(self.labels) != len(self.embeddings):
            raise ConfigError("one embedding per label required")
        if len(self.embeddings) and not np.all(np.isfinite(self.embeddings)):
            raise ConfigError("prompt embeddings contain non-finite values")
        unknown = self.background_labels - set(self.labels)
        if unknown:
            raise ConfigError(f"background labels not in label list: {sorted(unknown)}")

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def background_indices(self) -> List[int]:
        return [i for i, name in enumerate(self.labels) if name in self.background_labels]


GroundTruthVolume = Dict[VoxelKey, int]


@dataclass
class SegmentationReport:
    per_class_iou: Dict[str, float]
    miou: float
    fmiou: float
    acc: float
    confusion: np.ndarray           # (C, C+1); last column = unpredicted gt voxels
    labels: List[str]
    excluded_background: bool
    layer: Optional[str] = None
    class_frequencies: Dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "mIoU": self.miou,
            "fmIoU": self.fmiou,
            "Acc": self.acc,
            "per_class_iou": self.per_class_iou,
            "class_frequencies": self.class_frequencies,
            "excluded_background": self.excluded_background,
            "layer": self.layer,
            "confusion": self.confusion.tolist(),
            "labels": self.labels,
        }


def layer_embeddings(
    layer: str,
    dense: DenseLayer,
    instance_layer: InstanceLayer,
    fused_dense: Optional[Dict[VoxelKey, FusedDenseVoxel]] = None,
    fused_instances: Optional[Dict[int, FusedInstanceResult]] = None,
) -> Dict[VoxelKey, np.ndarray]:
    """Per-voxel embedding source for one of the four map layers.

    Instance layers report, per voxel, the embedding of the hypothesis with
    the highest observation count. For fused selections, fall back to the raw
    embedding where no fused one exists (instance never fused in-window, or a
    dense voxel missing from the fused map).
    """
    if layer not in LAYER_CHOICES:
        raise ConfigError(f"unknown layer {layer!r}; choose from {LAYER_CHOICES}")
    out: Dict[VoxelKey, np.ndarray] = {}
    if layer == "dense":
        for key, vox in dense.voxels.items():
            out[key] = vox.embedding
    elif layer == "dense-fused":
        fused_dense = fused_dense or {}
        for key, vox in dense.voxels.items():
            fv = fused_dense.get(key)
            out[key] = fv.embedding if fv is not None else vox.embedding
    else:
        use_fused = layer == "instance-fused"
        for key in instance_layer.voxels:
            top = instance_layer.top_hypothesis(key)
            if top is None:
                continue
            rec = instance_layer.instances[top.instance_id]
            emb = rec.embedding
            if use_fused:
                if fused_instances is not None and top.instance_id in fused_instances:
                    emb = fused_instances[top.instance_id].embedding
                elif rec.fused_embedding is not None:
                    emb = rec.fused_embedding
            out[key] = emb
    return out


def similarity_map(
    embeddings: Dict[VoxelKey, np.ndarray], prompt: np.ndarray
) -> Dict[VoxelKey, float]:
    """Cosine similarity of every voxel embedding against one prompt."""
    prompt = np.asarray(prompt, dtype=np.float32)
    pn = float(np.linalg.norm(prompt))
    if pn == 0.0:
        raise UndefinedSimilarityError("prompt embedding has zero norm")
    if not embeddings:
        return {}
    keys = list(embeddings)
    mat = np.stack([embeddings[k] for k in keys]).astype(np.float32)
    norms = np.linalg.norm(mat, axis=1)
    sims = np.zeros(len(keys), dtype=np.float64)
    ok = norms > 0
    sims[ok] = (mat[ok] @ prompt) / (norms[ok] * pn)
    return {k: float(s) for k, s in zip(keys, sims)}


def predict_classes(
    embeddings: Dict[VoxelKey, np.ndarray], prompts: PromptSet
) -> Dict[VoxelKey, int]:
    """Argmax over per-label cosine similarity; ties go to the lower index."""
    if len(prompts.labels) == 0:
        raise ConfigError("prompt set is empty")
    if not embeddings:
        return {}
    keys = list(embeddings)
    mat = np.stack([embeddings[k] for k in keys]).astype(np.float32)
    if mat.shape[1] != prompts.dim:
        raise ConfigError(
            f"voxel embedding dim {mat.shape[1]} != prompt dim {prompts.dim}"
        )
    vn = np.linalg.norm(mat, axis=1, keepdims=True)
    vn[vn == 0] = 1.0
    pn = np.linalg.norm(prompts.embeddings, axis=1, keepdims=True)
    if np.any(pn == 0):
        raise UndefinedSimilarityError("prompt embedding has zero norm")
    sims = (mat / vn) @ (prompts.embeddings / pn).T
    # np.argmax already returns the first (lowest) index among ties.
    pred = np.argmax(sims, axis=1)
    return {k: int(c) for k, c in zip(keys, pred)}


def evaluate(
    predictions: Dict[VoxelKey, int],
    gt: GroundTruthVolume,
    prompts: PromptSet,
    exclude_background: bool = False,
    layer: Optional[str] = None,
) -> SegmentationReport:
    """Confusion-matrix metrics over the labeled voxel domain.

    The domain is the ground-truth voxel set (minus background-class voxels
    when excluded). Predictions outside it are ignored; gt voxels without a
    prediction count as unpredicted (false negatives for their class). mIoU
    averages IoU over classes present in gt, fmIoU weights that average by gt
    frequency, and Acc is the mean per-class recall.
    """
    if not gt:
        raise ValueError("ground truth volume is empty")
    n_classes = len(prompts.labels)
    excluded = set(prompts.background_indices()) if exclude_background else set()

    # Column n_classes counts gt voxels with no prediction.
    confusion = np.zeros((n_classes, n_classes + 1), dtype=np.int64)
    for key, cls in gt.items():
        if not (0 <= cls < n_classes):
            raise ValueError(f"gt class {cls} out of range at {key}")
        if cls in excluded:
            continue
        pred = predictions.get(key, n_classes)
        confusion[cls, pred] += 1

    present = [c for c in range(n_classes) if confusion[c].sum() > 0]
    scored = [c for c in present if c not in excluded]
    if not scored:
        raise ValueError("no evaluable classes after background exclusion")

    per_class_iou: Dict[str, float] = {}
    ious, recalls, freqs = [], [], []
    for c in scored:
        tp = int(confusion[c, c])
        fn = int(confusion[c].sum()) - tp
        fp = int(confusion[:, c].sum()) - tp
        denom = tp + fp + fn
        iou = tp / denom if denom > 0 else 0.0
        recall = tp / (tp + fn) if tp + fn > 0 else 0.0
        per_class_iou[prompts.labels[c]] = iou
        ious.append(iou)
        recalls.append(recall)
        freqs.append(tp + fn)

    freqs_arr = np.asarray(freqs, dtype=np.float64)
    return SegmentationReport(
        per_class_iou=per_class_iou,
        miou=float(np.mean(ious)),
        fmiou=float(np.sum(freqs_arr / freqs_arr.sum() * np.asarray(ious))),
        acc=float(np.mean(recalls)),
        confusion=confusion,
        labels=list(prompts.labels),
        excluded_background=exclude_background,
        layer=layer,
        class_frequencies={prompts.labels[c]: int(f) for c, f in zip(scored, freqs)},
    )
