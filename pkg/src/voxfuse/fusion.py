"""Stateless cross-layer fusion of dense and instance embeddings.

Both layers are treated as independent unbiased estimates whose precision is
proportional to their observation counts; the blend weight of the instance
side is scaled by the variance ratio of the two sources. Fusion never writes
into the raw layers, so it can run at any time and any number of times.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, NamedTuple, Optional, Tuple

import numpy as np

from .core import UndefinedFusionError, VoxelKey, voxel_center
from .dense_layer import DenseLayer
from .instance_layer import InstanceLayer, InstanceRecord

Window = Tuple[np.ndarray, float]  # (center, radius)


@dataclass(frozen=True)
class FusedInstanceResult:
    instance_id: int
    embedding: np.ndarray   # (d,) float32
    total_precision: float  # sum of per-voxel precisions; evidence-score candidate


@dataclass(frozen=True)
class FusedDenseVoxel:
    key: VoxelKey
    embedding: np.ndarray   # (d,) float32


class FusionSummary(NamedTuple):
    dense_fused: int
    instances_fused: int
    instances_skipped: int


def fuse_voxel(
    f_dense: np.ndarray,
    w_dense: float,
    f_inst: np.ndarray,
    w_inst: float,
    variance_ratio: float,
) -> np.ndarray:
    """Precision-weighted blend of one voxel's dense and instance embeddings."""
    denom = w_dense + variance_ratio * w_inst
    if denom <= 0.0:
        raise UndefinedFusionError("both fusion weights are zero")
    # Blend coefficient in float64 so extreme weight ratios cannot underflow.
    t = (variance_ratio * w_inst) / denom
    return np.float32(1.0 - t) * np.asarray(f_dense, dtype=np.float32) + np.float32(
        t
    ) * np.asarray(f_inst, dtype=np.float32)


def fuse_instance(
    instance: InstanceRecord,
    dense: DenseLayer,
    instance_layer: InstanceLayer,
    variance_ratio: float,
    window: Optional[Window] = None,
    count_outside_window: bool = False,
    _in_window_keys: Optional[frozenset] = None,
) -> Optional[FusedInstanceResult]:
    """Fuse one instance across its hypothesis-bearing voxels.

    Implemented in the algebraically equivalent closed form: aggregating the
    per-voxel precision-weighted estimates with precision weights collapses to

        (sum_i w_d_i * f_d_i + lambda * f_inst * sum_i w_i_i)
        / (sum_i w_d_i + lambda * sum_i w_i_i)

    because the instance embedding is shared across its voxels. Voxels whose
    hypothesis for this id was evicted no longer contribute; a missing dense
    voxel contributes zero dense weight. With a window, only hypothesis voxels
    inside it enter the sums (count_outside_window keeps the instance counts
    global while dense support stays windowed). Returns None when the total
    precision is zero. Voxels are visited in sorted key order so the float32
    sums are reproducible regardless of set history.
    """
    keys = sorted(instance.voxel_set)
    if window is not None and _in_window_keys is None:
        _in_window_keys = window_key_set(keys, dense.voxel_size, window)
    dense_sum = np.zeros(len(instance.embedding), dtype=np.float32)
    w_dense_total = 0.0
    w_inst_total = 0.0
    for key in keys:
        if window is not None and key not in _in_window_keys:
            if count_outside_window:
                w_inst_total += _hypothesis_count(instance_layer, key, instance.instance_id)
            continue
        w_inst_total += _hypothesis_count(instance_layer, key, instance.instance_id)
        entry = dense.voxels.get(key)
        if entry is not None:
            dense_sum += np.float32(entry.weight) * entry.embedding
            w_dense_total += entry.weight
    total = w_dense_total + variance_ratio * w_inst_total
    if total <= 0.0:
        return None
    emb = (
        dense_sum + np.float32(variance_ratio * w_inst_total) * instance.embedding
    ) / np.float32(total)
    return FusedInstanceResult(instance.instance_id, emb, float(total))


def _hypothesis_count(layer: InstanceLayer, key: VoxelKey, instance_id: int) -> float:
    for hyp in layer.voxels.get(key, ()):
        if hyp.instance_id == instance_id:
            return hyp.count
    return 0.0


def _in_window(key: VoxelKey, voxel_size: float, window: Window) -> bool:
    center, radius = window
    if math.isinf(radius):
        return True
    return float(np.linalg.norm(voxel_center(key, voxel_size) - center)) <= radius


def window_key_set(keys, voxel_size: float, window: Window) -> frozenset:
    """Subset of keys whose voxel centers lie inside the window ball."""
    keys = list(keys)
    center, radius = window
    if math.isinf(radius) or not keys:
        return frozenset(keys)
    centers = (np.asarray(keys, dtype=np.float64) + 0.5) * voxel_size
    dist = np.linalg.norm(centers - center, axis=1)
    return frozenset(k for k, ok in zip(keys, dist <= radius) if ok)


def fuse_dense_voxel(
    key: VoxelKey,
    dense: DenseLayer,
    instance_layer: InstanceLayer,
    variance_ratio: float,
) -> FusedDenseVoxel:
    """Blend one dense voxel with its strongest instance hypothesis, if any."""
    vox = dense.voxels[key]
    top = instance_layer.top_hypothesis(key)
    if top is None:
        return FusedDenseVoxel(key, vox.embedding.copy())
    f_hat = instance_layer.instances[top.instance_id].embedding
    return FusedDenseVoxel(
        key, fuse_voxel(vox.embedding, vox.weight, f_hat, top.count, variance_ratio)
    )


def fuse_all(
    dense: DenseLayer,
    instance_layer: InstanceLayer,
    variance_ratio: float,
    window: Optional[Window] = None,
    count_outside_window: bool = False,
    include_dense: bool = True,
) -> Tuple[Dict[VoxelKey, FusedDenseVoxel], Dict[int, FusedInstanceResult], FusionSummary]:
    """Fuse every in-scope dense voxel and instance; pure function of the layers.

    In-scope instances are those with at least one hypothesis voxel inside the
    window; per-item failures are tallied in the summary, never raised.
    include_dense=False skips materializing the fused dense map (for callers
    that only consume the instance results).
    """
    fused_dense: Dict[VoxelKey, FusedDenseVoxel] = {}
    if include_dense:
        dense_keys = dense.voxels.keys()
        if window is not None:
            dense_keys = window_key_set(dense_keys, dense.voxel_size, window)
        for key in dense.voxels:
            if window is not None and key not in dense_keys:
                continue
            fused_dense[key] = fuse_dense_voxel(key, dense, instance_layer, variance_ratio)

    in_window_inst = None
    if window is not None:
        in_window_inst = window_key_set(
            instance_layer.voxels.keys(), dense.voxel_size, window
        )

    fused_instances: Dict[int, FusedInstanceResult] = {}
    skipped = 0
    for iid in sorted(instance_layer.instances):
        rec = instance_layer.instances[iid]
        if in_window_inst is not None and not any(
            k in in_window_inst for k in rec.voxel_set
        ):
            continue  # out of scope, not a skip
        result = fuse_instance(
            rec,
            dense,
            instance_layer,
            variance_ratio,
            window=window,
            count_outside_window=count_outside_window,
            _in_window_keys=in_window_inst,
        )
        if result is None:
            skipped += 1
        else:
            fused_instances[iid] = result
    return fused_dense, fused_instances, FusionSummary(
        len(fused_dense), len(fused_instances), skipped
    )
