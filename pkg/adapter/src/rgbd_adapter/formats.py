"""Writers for the voxfuse binary formats (independent implementation).

The wire contract (little-endian, 8-byte magic) is documented in the engine's
README; this module implements it from that documentation so the two sides
cross-check each other.
"""
from __future__ import annotations

import struct
from typing import BinaryIO, List, Sequence, Tuple

import numpy as np

STREAM_MAGIC = b"FUS3DSTR"
PROMPT_MAGIC = b"FUS3DPRM"
STREAM_VERSION = 1
FLAG_PATCH_WEIGHTS = 1


def mask_to_runs(mask: np.ndarray) -> List[int]:
    """Row-major alternating run lengths, starting with a run of zeros."""
    flat = np.asarray(mask, dtype=bool).reshape(-1)
    runs: List[int] = []
    current = False  # the encoding always opens with a zero-run
    count = 0
    for value in flat:
        if value == current:
            count += 1
        else:
            runs.append(count)
            current = value
            count = 1
    runs.append(count)
    return runs


def runs_to_mask(runs: Sequence[int], height: int, width: int) -> np.ndarray:
    if sum(runs) != height * width:
        raise ValueError("run lengths do not cover the image")
    flat = np.zeros(height * width, dtype=bool)
    pos = 0
    value = False
    for run in runs:
        if value:
            flat[pos : pos + run] = True
        pos += run
        value = not value
    return flat.reshape(height, width)


class StreamWriter:
    """Sequential frame-stream writer."""

    def __init__(
        self,
        fp: BinaryIO,
        dim: int,
        height: int,
        width: int,
        patch_size: int,
        intrinsics: Tuple[float, float, float, float],
        with_patch_weights: bool = False,
    ):
        self.fp = fp
        self.dim = dim
        self.height = height
        self.width = width
        self.patch_size = patch_size
        self.with_patch_weights = with_patch_weights
        self.patch_rows = -(-height // patch_size)
        self.patch_cols = -(-width // patch_size)
        fx, fy, cx, cy = intrinsics
        fp.write(STREAM_MAGIC)
        flags = FLAG_PATCH_WEIGHTS if with_patch_weights else 0
        fp.write(struct.pack("<IIIII", STREAM_VERSION, dim, height, width, patch_size))
        fp.write(struct.pack("<ffff", fx, fy, cx, cy))
        fp.write(struct.pack("<I", flags))

    def write_frame(
        self,
        frame_index: int,
        pose_3x4: np.ndarray,
        depth: np.ndarray,
        patch_grid: np.ndarray,
        patch_weights=None,
        segments: Sequence[Tuple[np.ndarray, np.ndarray]] = (),
    ) -> None:
        """segments: iterable of (mask HxW bool, crop embedding (d,))."""
        if pose_3x4.shape != (3, 4):
            raise ValueError("pose must be a 3x4 [R|t] matrix")
        if depth.shape != (self.height, self.width):
            raise ValueError("depth shape mismatch")
        if patch_grid.shape != (self.patch_rows, self.patch_cols, self.dim):
            raise ValueError(
                f"patch grid shape {patch_grid.shape} != "
                f"({self.patch_rows}, {self.patch_cols}, {self.dim})"
            )
        self.fp.write(struct.pack("<Q", frame_index))
        self.fp.write(np.asarray(pose_3x4, dtype="<f8").tobytes())
        self.fp.write(np.asarray(depth, dtype="<f4").tobytes())
        self.fp.write(np.asarray(patch_grid, dtype="<f4").tobytes())
        if self.with_patch_weights:
            if patch_weights is None:
                raise ValueError("stream declares patch weights; none given")
            if patch_weights.shape != (self.patch_rows, self.patch_cols):
                raise ValueError("patch weights shape mismatch")
            self.fp.write(np.asarray(patch_weights, dtype="<f4").tobytes())
        self.fp.write(struct.pack("<I", len(segments)))
        for mask, crop in segments:
            emb = np.asarray(crop, dtype="<f4")
            if emb.shape != (self.dim,):
                raise ValueError(f"crop embedding dim {emb.shape} != ({self.dim},)")
            runs = mask_to_runs(mask)
            self.fp.write(struct.pack("<I", len(runs)))
            self.fp.write(np.asarray(runs, dtype="<u4").tobytes())
            self.fp.write(emb.tobytes())


def write_prompts(
    fp: BinaryIO,
    labels: Sequence[str],
    embeddings: np.ndarray,
    background: Sequence[str] = (),
) -> None:
    embeddings = np.asarray(embeddings, dtype="<f4")
    if len(labels) != len(embeddings):
        raise ValueError("one embedding per label required")
    background = set(background)
    fp.write(PROMPT_MAGIC)
    fp.write(struct.pack("<II", embeddings.shape[1], len(labels)))
    for name, emb in zip(labels, embeddings):
        raw = name.encode("utf-8")
        fp.write(struct.pack("<I", len(raw)))
        fp.write(raw)
        fp.write(struct.pack("<B", 1 if name in background else 0))
        fp.write(emb.tobytes())
