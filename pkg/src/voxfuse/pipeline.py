"""Run orchestration: stream frames through both mapping pipelines."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import BinaryIO, List, Optional, Tuple

import numpy as np

from .core import ConfigError, MapConfig
from .dense_layer import DenseLayer
from .formats import MapSnapshot, StreamHeader, open_stream
from .frames import FrameRecord, KeyframeGate, backproject, filter_segments, sample_pixels
from .instance_layer import InstanceLayer, build_proposal
from .sliding_window import WindowState, maybe_fuse_window, prune_outside

logger = logging.getLogger(__name__)

MODES = ("global", "sliding-window")

KEY_BYTES = 24        # 3 x i64 voxel coordinates
WEIGHT_BYTES = 8      # f64 observation count
HYPOTHESIS_BYTES = 16  # u64 id + f64 count


def semantic_memory_bytes(dense: DenseLayer, instance: InstanceLayer, dim: int) -> dict:
    """Analytic footprint of the semantic map state (counts x record sizes)."""
    emb = 4 * dim
    dense_bytes = len(dense.voxels) * (KEY_BYTES + WEIGHT_BYTES + emb)
    inst_voxel_bytes = (
        len(instance.voxels) * KEY_BYTES + instance.total_hypotheses * HYPOTHESIS_BYTES
    )
    n_fused = sum(
        1 for rec in instance.instances.values() if rec.fused_embedding is not None
    )
    inst_table_bytes = (
        len(instance.instances) * (8 + WEIGHT_BYTES + emb + 8) + n_fused * emb
    )
    return {
        "dense_bytes": dense_bytes,
        "instance_voxel_bytes": inst_voxel_bytes,
        "instance_table_bytes": inst_table_bytes,
        "instance_bytes": inst_voxel_bytes + inst_table_bytes,
        "total_bytes": dense_bytes + inst_voxel_bytes + inst_table_bytes,
    }


@dataclass
class RunReport:
    mode: str
    seed: int
    frames_seen: int = 0
    frames_dense: int = 0
    frames_instance: int = 0
    frames_rejected: int = 0
    segments_seen: int = 0
    segments_kept: int = 0
    proposals: int = 0
    matches: int = 0
    new_instances: int = 0
    fusions_run: int = 0
    voxels_pruned: int = 0
    dense_voxels: int = 0
    instance_voxels: int = 0
    instances: int = 0
    memory: dict = field(default_factory=dict)
    peak_memory: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


class MappingSession:
    """Feeds frames through the keyframe gates into both layers.

    Single writer; queries between process() calls see consistent state.
    """

    def __init__(
        self,
        config: MapConfig,
        header: StreamHeader,
        mode: str = "global",
        seed: int = 0,
        observation_log: Optional[List] = None,
        association_log: Optional[List] = None,
    ):
        if mode not in MODES:
            raise ConfigError(f"unknown mode {mode!r}; choose from {MODES}")
        if config.embedding_dim is not None and config.embedding_dim != header.embedding_dim:
            raise ConfigError(
                f"config embedding_dim {config.embedding_dim} != stream d "
                f"{header.embedding_dim}"
            )
        if config.patch_size != header.patch_size:
            logger.info(
                "config patch_size %d overridden by stream header %d",
                config.patch_size, header.patch_size,
            )
        self.config = config
        self.header = header
        self.mode = mode
        self.seed = seed
        self.dense = DenseLayer(voxel_size=config.voxel_size)
        self.instance = InstanceLayer(
            voxel_size=config.voxel_size,
            max_hypotheses=config.max_hypotheses,
            association_log=association_log,
        )
        self.observation_log = observation_log
        self.dense_gate = KeyframeGate(*config.dense_motion_thresholds)
        self.instance_gate = KeyframeGate(*config.instance_motion_thresholds)
        radius = config.window_radius if mode == "sliding-window" else math.inf
        self.window = WindowState(center=np.zeros(3), radius=radius)
        self.report = RunReport(mode=mode, seed=seed)

    def process(self, frame: FrameRecord) -> None:
        cfg = self.config
        rep = self.report
        rep.frames_seen += 1
        if frame.embedding_dim != self.header.embedding_dim:
            raise ConfigError(
                f"frame {frame.frame_index} embedding dim {frame.embedding_dim} "
                f"!= stream d {self.header.embedding_dim}"
            )

        process_dense = self.dense_gate.should_process(frame.pose)
        process_instance = self.instance_gate.should_process(frame.pose)

        if process_dense:
            rep.frames_dense += 1
            try:
                self._integrate_dense(frame)
            except ValueError as e:
                rep.frames_rejected += 1
                logger.warning("frame %d rejected by dense update: %s", frame.frame_index, e)

        if process_instance:
            rep.frames_instance += 1
            self._integrate_instance(frame)

        if self.mode == "sliding-window" and (process_dense or process_instance):
            self.window.center = frame.pose.translation.copy()
            if process_dense:
                rep.voxels_pruned += prune_outside(self.dense, self.window)
            if maybe_fuse_window(self.window, self.dense, self.instance, cfg) is not None:
                rep.fusions_run += 1

        mem = semantic_memory_bytes(self.dense, self.instance, self.header.embedding_dim)
        if not rep.peak_memory:
            rep.peak_memory = mem
        else:
            rep.peak_memory = {
                k: max(rep.peak_memory[k], mem[k]) for k in mem
            }

    def _integrate_dense(self, frame: FrameRecord) -> None:
        samples = sample_pixels(
            frame, self.config.dense_pixels_per_patch, mask=None, seed=self.seed
        )
        if len(samples) == 0:
            return
        pts = backproject(samples, frame.depth, self.header.intrinsics, frame.pose)
        if len(pts.points) == 0:
            return
        d = self.header.embedding_dim
        embeddings = frame.patch_grid.reshape(-1, d)[pts.patch_index]
        self.dense.integrate(
            pts.points, embeddings, pts.weight, observation_log=self.observation_log
        )

    def _integrate_instance(self, frame: FrameRecord) -> None:
        cfg = self.config
        rep = self.report
        rep.segments_seen += len(frame.segments)
        kept = filter_segments(
            frame.segments,
            cfg.mask_min_area_frac,
            cfg.mask_border_contact_frac,
            frame.depth.shape,
        )
        rep.segments_kept += len(kept)
        for k, segment in enumerate(kept):
            proposal = build_proposal(
                segment, frame, self.header.intrinsics, cfg, seed=self.seed + 1 + k
            )
            if proposal is None:
                continue
            rep.proposals += 1
            decision, _ = self.instance.process_proposal(
                proposal, cfg.iou_threshold, frame.frame_index
            )
            if decision == "match":
                rep.matches += 1
            else:
                rep.new_instances += 1

    def finish(self) -> Tuple[MapSnapshot, RunReport]:
        rep = self.report
        rep.dense_voxels = len(self.dense.voxels)
        rep.instance_voxels = len(self.instance.voxels)
        rep.instances = len(self.instance.instances)
        rep.memory = semantic_memory_bytes(
            self.dense, self.instance, self.header.embedding_dim
        )
        if not rep.peak_memory:
            rep.peak_memory = dict(rep.memory)
        snapshot = MapSnapshot(
            config=self.config,
            embedding_dim=self.header.embedding_dim,
            dense=self.dense,
            instance=self.instance,
        )
        return snapshot, rep


def run_mapping(
    stream: BinaryIO,
    config: MapConfig,
    mode: str = "global",
    seed: int = 0,
    observation_log: Optional[List] = None,
    association_log: Optional[List] = None,
) -> Tuple[MapSnapshot, RunReport]:
    """Map an entire stream; deterministic given (stream, config, seed)."""
    header, frames = open_stream(stream)
    session = MappingSession(
        config, header, mode=mode, seed=seed,
        observation_log=observation_log, association_log=association_log,
    )
    for frame in frames:
        session.process(frame)
    return session.finish()


def run_mapping_path(path, config: MapConfig, **kwargs) -> Tuple[MapSnapshot, RunReport]:
    with open(path, "rb") as fp:
        return run_mapping(fp, config, **kwargs)
