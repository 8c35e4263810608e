"""Egocentric sliding window: dense-layer pruning and periodic gated fusion.

The dense layer lives inside a ball around the camera and is pruned as the
camera moves; the instance layer is global. Fusion runs every fusion_period
processed frames, and a fused instance embedding is stored only when its
evidence score beats the previously stored one, so partial views observed
while an object drifts out of the window cannot clobber a fusion computed
from a complete view.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import MapConfig
from .dense_layer import DenseLayer
from .fusion import FusedInstanceResult, FusionSummary, fuse_all
from .instance_layer import InstanceLayer, InstanceRecord


@dataclass
class WindowState:
    center: np.ndarray          # current camera position, world
    radius: float               # m; inf disables pruning
    frames_since_fusion: int = 0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        if self.radius <= 0:
            raise ValueError("window radius must be positive")


def prune_outside(dense: DenseLayer, window: WindowState) -> int:
    """Drop dense voxels whose center leaves the window ball (closed: distance
    exactly equal to the radius is retained). Returns the number pruned."""
    if math.isinf(window.radius) or not dense.voxels:
        return 0
    keys = list(dense.voxels)
    centers = (np.asarray(keys, dtype=np.float64) + 0.5) * dense.voxel_size
    dist = np.linalg.norm(centers - window.center, axis=1)
    doomed = np.nonzero(dist > window.radius)[0]
    for i in doomed:
        del dense.voxels[keys[i]]
    return len(doomed)


def evidence_gate(instance: InstanceRecord, candidate: FusedInstanceResult) -> bool:
    """Store the candidate fusion iff it strictly beats the stored evidence."""
    if candidate.total_precision > instance.evidence_score:
        instance.fused_embedding = candidate.embedding
        instance.evidence_score = candidate.total_precision
        return True
    return False


def maybe_fuse_window(
    window: WindowState,
    dense: DenseLayer,
    instance_layer: InstanceLayer,
    config: MapConfig,
) -> Optional[FusionSummary]:
    """Advance the fusion counter; on every fusion_period-th processed frame,
    fuse within the window and push results through the evidence gate.

    Returns the fusion summary when fusion ran, None when skipped. With
    evidence gating disabled every candidate overwrites the stored fusion.
    """
    window.frames_since_fusion += 1
    if window.frames_since_fusion < config.fusion_period:
        return None
    window.frames_since_fusion = 0
    # The windowed dense-fused map is not stored anywhere, so skip building it.
    _, fused_instances, summary = fuse_all(
        dense,
        instance_layer,
        config.variance_ratio,
        window=(window.center, window.radius),
        count_outside_window=(config.instance_precision_scope == "global"),
        include_dense=False,
    )
    for iid, candidate in fused_instances.items():
        rec = instance_layer.instances[iid]
        if config.evidence_gating:
            evidence_gate(rec, candidate)
        else:
            rec.fused_embedding = candidate.embedding
            rec.evidence_score = candidate.total_precision
    return summary
