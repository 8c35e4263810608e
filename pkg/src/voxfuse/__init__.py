"""Dual-layer open-vocabulary semantic voxel mapping with cross-layer fusion."""

from .core import (
    CameraIntrinsics,
    ConfigError,
    MapConfig,
    Pose,
    StreamFormatError,
    UndefinedFusionError,
    UndefinedSimilarityError,
    cosine_similarity,
    voxel_center,
    world_to_voxel,
)
from .dense_layer import DenseLayer, DenseVoxel
from .frames import FrameRecord, KeyframeGate, SegmentProposal, backproject, filter_segments, sample_pixels
from .fusion import FusedDenseVoxel, FusedInstanceResult, fuse_all, fuse_dense_voxel, fuse_instance, fuse_voxel
from .instance_layer import InstanceLayer, InstanceProposal, InstanceRecord, build_proposal
from .pipeline import MappingSession, RunReport, run_mapping, run_mapping_path
from .query_eval import PromptSet, SegmentationReport, evaluate, layer_embeddings, predict_classes, similarity_map
from .sliding_window import WindowState, evidence_gate, maybe_fuse_window, prune_outside

__version__ = "0.1.0"
