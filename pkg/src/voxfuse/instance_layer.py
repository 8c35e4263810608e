"""Instance-level layer: multi-hypothesis voxel evidence + per-instance embeddings."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Set, Tuple

import numpy as np

from .core import CameraIntrinsics, MapConfig, VoxelKey, points_to_voxels
from .frames import FrameRecord, SegmentProposal, backproject, sample_pixels


@dataclass
class Hypothesis:
    instance_id: int
    count: float  # accumulated point hits for this instance at this voxel


@dataclass
class InstanceRecord:
    instance_id: int
    embedding: np.ndarray          # (d,) float32 running mean of crop embeddings
    weight: float                  # total points over all matched proposals
    voxel_set: Set[VoxelKey] = field(default_factory=set)  # voxels holding a live hypothesis
    fused_embedding: Optional[np.ndarray] = None
    evidence_score: float = 0.0


@dataclass
class InstanceProposal:
    """A segment lifted to 3D: points, their voxel footprint, one crop embedding."""

    points: np.ndarray                  # (N, 3) world
    crop_embedding: np.ndarray          # (d,) float32
    voxel_counts: Dict[VoxelKey, int]   # per-voxel point hits

    @property
    def n_points(self) -> int:
        return len(self.points)

    @property
    def voxel_set(self) -> Set[VoxelKey]:
        return set(self.voxel_counts)


@dataclass
class AssociationEvent:
    """Log entry for one proposal, sufficient to replay association offline."""

    frame_index: int
    voxel_counts: Dict[VoxelKey, int]
    n_points: int
    crop_embedding: np.ndarray
    decision: str                       # "match" | "new"
    instance_id: int
    candidates: Optional[Dict[int, frozenset]] = None  # voxel sets before the update


def build_proposal(
    segment: SegmentProposal,
    frame: FrameRecord,
    intrinsics: CameraIntrinsics,
    config: MapConfig,
    seed: int = 0,
) -> Optional[InstanceProposal]:
    """Sample mask pixels, back-project, voxelize. None when nothing survives."""
    samples = sample_pixels(
        frame, config.instance_pixels_per_patch, mask=segment.mask, seed=seed
    )
    if len(samples) == 0:
        return None
    pts = backproject(samples, frame.depth, intrinsics, frame.pose)
    if len(pts.points) == 0:
        return None
    keys = points_to_voxels(pts.points, config.voxel_size)
    uniq, counts = np.unique(keys, axis=0, return_counts=True)
    voxel_counts = {
        (int(k[0]), int(k[1]), int(k[2])): int(c) for k, c in zip(uniq, counts)
    }
    return InstanceProposal(
        points=pts.points,
        crop_embedding=segment.crop_embedding,
        voxel_counts=voxel_counts,
    )


@dataclass
class InstanceLayer:
    voxel_size: float
    max_hypotheses: int = 3
    voxels: Dict[VoxelKey, List[Hypothesis]] = field(default_factory=dict)
    instances: Dict[int, InstanceRecord] = field(default_factory=dict)
    next_instance_id: int = 0
    association_log: Optional[List[AssociationEvent]] = None

    @property
    def total_hypotheses(self) -> int:
        return sum(len(h) for h in self.voxels.values())

    def associate(
        self, proposal: InstanceProposal, iou_threshold: float
    ) -> Optional[Tuple[int, float]]:
        """Best-overlap instance id and its IoU, or None below the threshold.

        Intersections are counted through the per-voxel hypothesis lists, so
        the scan is O(|proposal voxels| * K). Ties go to the lower id.
        """
        inter: Dict[int, int] = {}
        for key in proposal.voxel_counts:
            for hyp in self.voxels.get(key, ()):
                inter[hyp.instance_id] = inter.get(hyp.instance_id, 0) + 1
        best_id, best_iou = None, -1.0
        n_prop = len(proposal.voxel_counts)
        for iid in sorted(inter):
            i = inter[iid]
            union = n_prop + len(self.instances[iid].voxel_set) - i
            iou = i / union
            if iou > best_iou:
                best_id, best_iou = iid, iou
        if best_id is None or best_iou < iou_threshold:
            return None
        return best_id, best_iou

    def apply_match(self, proposal: InstanceProposal, instance_id: int) -> int:
        """Fold a matched proposal into an existing instance.

        Adds per-voxel counts (inserting hypotheses, evicting the weakest when
        a voxel is full) and advances the instance embedding running mean.
        Returns the number of hypotheses inserted.
        """
        rec = self.instances[instance_id]
        inserted = 0
        for key, n in proposal.voxel_counts.items():
            if self._add_count(key, instance_id, float(n)):
                inserted += 1
        n_p = float(proposal.n_points)
        w_new = rec.weight + n_p
        rec.embedding = (
            np.float32(rec.weight) * rec.embedding
            + np.float32(n_p) * proposal.crop_embedding
        ) / np.float32(w_new)
        rec.weight = w_new
        return inserted

    def create_instance(self, proposal: InstanceProposal) -> int:
        """Register a fresh instance seeded from the proposal."""
        iid = self.next_instance_id
        self.next_instance_id += 1
        self.instances[iid] = InstanceRecord(
            instance_id=iid,
            embedding=np.array(proposal.crop_embedding, dtype=np.float32, copy=True),
            weight=float(proposal.n_points),
        )
        for key, n in proposal.voxel_counts.items():
            self._add_count(key, iid, float(n))
        return iid

    def process_proposal(
        self, proposal: InstanceProposal, iou_threshold: float, frame_index: int = -1
    ) -> Tuple[str, int]:
        """associate + apply_match/create_instance, with optional event logging."""
        candidates = None
        if self.association_log is not None:
            candidates = {
                iid: frozenset(rec.voxel_set) for iid, rec in self.instances.items()
            }
        match = self.associate(proposal, iou_threshold)
        if match is not None:
            decision, iid = "match", match[0]
            self.apply_match(proposal, iid)
        else:
            decision, iid = "new", self.create_instance(proposal)
        if self.association_log is not None:
            self.association_log.append(
                AssociationEvent(
                    frame_index=frame_index,
                    voxel_counts=dict(proposal.voxel_counts),
                    n_points=proposal.n_points,
                    crop_embedding=np.array(proposal.crop_embedding, copy=True),
                    decision=decision,
                    instance_id=iid,
                    candidates=candidates,
                )
            )
        return decision, iid

    def top_hypothesis(self, key: VoxelKey) -> Optional[Hypothesis]:
        """Highest-count hypothesis at a voxel; count ties go to the lower id."""
        hyps = self.voxels.get(key)
        if not hyps:
            return None
        return max(hyps, key=lambda h: (h.count, -h.instance_id))

    def _add_count(self, key: VoxelKey, instance_id: int, n: float) -> bool:
        """Add evidence for instance_id at key; True when a hypothesis was inserted.

        A full voxel evicts the lowest-count hypothesis (count ties evict the
        larger id); the incoming hypothesis itself may lose that contest.
        """
        hyps = self.voxels.setdefault(key, [])
        for hyp in hyps:
            if hyp.instance_id == instance_id:
                hyp.count += n
                return False
        if len(hyps) < self.max_hypotheses:
            hyps.append(Hypothesis(instance_id, n))
            self.instances[instance_id].voxel_set.add(key)
            return True
        weakest = min(hyps, key=lambda h: (h.count, -h.instance_id))
        if (weakest.count, -weakest.instance_id) >= (n, -instance_id):
            # Incoming hypothesis is the weakest; voxel unchanged.
            return False
        hyps.remove(weakest)
        self.instances[weakest.instance_id].voxel_set.discard(key)
        hyps.append(Hypothesis(instance_id, n))
        self.instances[instance_id].voxel_set.add(key)
        return True
