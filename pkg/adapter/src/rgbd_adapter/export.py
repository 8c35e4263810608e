"""Dataset -> frame-stream export."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .dataset import RgbdDataset, resize_depth_nearest, resize_rgb, scale_intrinsics
from .encoders import EncoderBundle, Segmenter, resolve_encoders, resolve_segmenter
from .formats import StreamWriter, write_prompts

# The engine pipelines were evaluated at this resolution; all frames are
# resized to it and the intrinsics rescaled accordingly.
TARGET_HEIGHT = 480
TARGET_WIDTH = 640


@dataclass
class AdapterConfig:
    dataset_root: str
    output_stream: str
    output_prompts: Optional[str] = None
    encoder_profile: str = "stub-hash"
    segmenter_profile: str = "stub-full"
    embedding_dim: int = 64
    patch_size: int = 16
    crop_padding_frac: float = 0.05
    target_size: Tuple[int, int] = (TARGET_HEIGHT, TARGET_WIDTH)


@dataclass
class ExportSummary:
    frames: int = 0
    segments: int = 0
    labels: List[str] = field(default_factory=list)
    stream_path: str = ""
    prompts_path: Optional[str] = None


def padded_crop(rgb: np.ndarray, mask: np.ndarray, padding_frac: float) -> np.ndarray:
    """Bounding-box crop around the mask with fractional padding."""
    vs, us = np.nonzero(mask)
    pad_v = int(math.ceil((vs.max() - vs.min() + 1) * padding_frac))
    pad_u = int(math.ceil((us.max() - us.min() + 1) * padding_frac))
    lo_v = max(0, vs.min() - pad_v)
    hi_v = min(rgb.shape[0], vs.max() + 1 + pad_v)
    lo_u = max(0, us.min() - pad_u)
    hi_u = min(rgb.shape[1], us.max() + 1 + pad_u)
    return rgb[lo_v:hi_v, lo_u:hi_u]


def export_stream(
    config: AdapterConfig,
    encoders: Optional[EncoderBundle] = None,
    segmenter: Optional[Segmenter] = None,
) -> ExportSummary:
    """Encode every dataset frame into the stream format (+ prompt sidecar)."""
    dataset = RgbdDataset.open(config.dataset_root)
    if encoders is None:
        encoders = resolve_encoders(config.encoder_profile, config.embedding_dim)
    if segmenter is None:
        segmenter = resolve_segmenter(config.segmenter_profile)
    if encoders.dim != config.embedding_dim:
        raise ValueError(
            f"declared embedding dim {config.embedding_dim} does not match "
            f"encoder output dim {encoders.dim}"
        )

    height, width = config.target_size
    intrinsics = scale_intrinsics(
        dataset.intrinsics, dataset.native_size, config.target_size
    )
    summary = ExportSummary(stream_path=config.output_stream, labels=list(dataset.labels))

    with open(config.output_stream, "wb") as fp:
        writer = StreamWriter(
            fp,
            dim=config.embedding_dim,
            height=height,
            width=width,
            patch_size=config.patch_size,
            intrinsics=intrinsics,
            with_patch_weights=encoders.emit_saliency_weights,
        )
        for frame in dataset.frames():
            rgb = resize_rgb(frame.rgb, height, width)
            depth = resize_depth_nearest(frame.depth_m, height, width)
            patch_grid, saliency = encoders.patch.encode(rgb, config.patch_size)
            if patch_grid.shape[2] != config.embedding_dim:
                raise ValueError("patch encoder produced a wrong embedding dim")
            weights = None
            if encoders.emit_saliency_weights:
                if saliency is None:
                    raise ValueError("profile expects saliency but encoder gave none")
                weights = np.clip(saliency, 0.0, 1.0)
            segments = []
            for mask in segmenter.segment(rgb):
                if not mask.any():
                    continue
                crop = padded_crop(rgb, mask, config.crop_padding_frac)
                segments.append((mask, encoders.image.encode(crop)))
            writer.write_frame(
                frame_index=frame.frame_index,
                pose_3x4=frame.pose_3x4,
                depth=depth,
                patch_grid=patch_grid,
                patch_weights=weights,
                segments=segments,
            )
            summary.frames += 1
            summary.segments += len(segments)

    if config.output_prompts and dataset.labels:
        embeddings = np.stack([encoders.text.encode(name) for name in dataset.labels])
        with open(config.output_prompts, "wb") as fp:
            write_prompts(fp, dataset.labels, embeddings, dataset.background)
        summary.prompts_path = config.output_prompts
    return summary
