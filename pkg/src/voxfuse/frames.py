"""Frame-stream input types, keyframe gating, pixel sampling, back-projection.

Both mapping pipelines consume the same FrameRecord; they differ only in
motion thresholds and pixel sampling density, so each holds its own
KeyframeGate and draws its own samples.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional

import numpy as np

from .core import CameraIntrinsics, Pose, rotation_angle


@dataclass
class SegmentProposal:
    """One class-agnostic mask proposal with its crop embedding."""

    mask: np.ndarray            # (H, W) bool
    crop_embedding: np.ndarray  # (d,) float32
    mask_area: int              # pixels
    border_contact: float       # fraction of contour pixels on the image border

    @classmethod
    def from_mask(cls, mask: np.ndarray, crop_embedding: np.ndarray) -> "SegmentProposal":
        mask = np.asarray(mask, dtype=bool)
        area = int(mask.sum())
        if area == 0:
            raise ValueError("segment mask is empty")
        crop = np.asarray(crop_embedding, dtype=np.float32)
        if not np.all(np.isfinite(crop)):
            raise ValueError("crop embedding contains non-finite values")
        return cls(
            mask=mask,
            crop_embedding=crop,
            mask_area=area,
            border_contact=mask_border_contact(mask),
        )


def mask_border_contact(mask: np.ndarray) -> float:
    """Fraction of a mask's contour pixels that lie on the image border.

    Contour pixels are mask pixels with a 4-neighbor outside the mask or on
    the image edge.
    """
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        return 0.0
    padded = np.pad(m, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    contour = m & ~interior
    # Pixels on the image edge are always contour (their padded neighbor is False).
    n_contour = int(contour.sum())
    if n_contour == 0:
        return 0.0
    border = np.zeros_like(m)
    border[0, :] = border[-1, :] = True
    border[:, 0] = border[:, -1] = True
    return float((contour & border).sum()) / n_contour


@dataclass
class FrameRecord:
    """One RGB-D frame reduced to pose, depth, and precomputed embeddings."""

    frame_index: int
    pose: Pose
    depth: np.ndarray                       # (H, W) float32 meters; 0/NaN invalid
    patch_grid: np.ndarray                  # (Hp, Wp, d) float32
    patch_size: int
    patch_weights: Optional[np.ndarray] = None  # (Hp, Wp) float32 in [0, 1]
    segments: List[SegmentProposal] = field(default_factory=list)
    timestamp: Optional[float] = None

    def __post_init__(self):
        h, w = self.depth.shape
        hp = -(-h // self.patch_size)
        wp = -(-w // self.patch_size)
        if self.patch_grid.shape[:2] != (hp, wp):
            raise ValueError(
                f"patch grid {self.patch_grid.shape[:2]} does not match "
                f"ceil({h}/{self.patch_size}) x ceil({w}/{self.patch_size})"
            )
        if self.patch_weights is not None and self.patch_weights.shape != (hp, wp):
            raise ValueError("patch_weights shape does not match patch grid")

    @property
    def embedding_dim(self) -> int:
        return self.patch_grid.shape[2]

    def valid_depth_mask(self) -> np.ndarray:
        d = self.depth
        return np.isfinite(d) & (d > 0)


@dataclass
class KeyframeGate:
    """Motion-threshold keyframe selection; one gate per mapping pipeline."""

    translation_threshold: float  # m
    rotation_threshold: float     # rad
    last_pose: Optional[Pose] = None

    def should_process(self, pose: Pose) -> bool:
        """True when motion since the last accepted pose exceeds a threshold.

        Updates the stored pose on acceptance.
        """
        if self.last_pose is None:
            self.last_pose = pose
            return True
        dt = float(np.linalg.norm(pose.translation - self.last_pose.translation))
        da = rotation_angle(self.last_pose.rotation, pose.rotation)
        if dt >= self.translation_threshold or da >= self.rotation_threshold:
            self.last_pose = pose
            return True
        return False


class PixelSamples(NamedTuple):
    """Sampled pixels (u: column, v: row), their patch index, and weight."""

    u: np.ndarray       # (N,) int64
    v: np.ndarray       # (N,) int64
    patch_index: np.ndarray  # (N,) int64 into the flattened patch grid
    weight: np.ndarray  # (N,) float64

    def __len__(self) -> int:
        return len(self.u)


def sample_pixels(
    frame: FrameRecord,
    pixels_per_patch: int,
    mask: Optional[np.ndarray] = None,
    seed: int = 0,
) -> PixelSamples:
    """Draw up to `pixels_per_patch` valid-depth pixels from every patch.

    Selection is a seeded choice without replacement, so identical inputs
    reproduce identical samples. Patches with no valid pixel yield nothing.
    The returned weight is the frame's patch weight when present, else 1.
    """
    if pixels_per_patch < 1:
        raise ValueError("pixels_per_patch must be >= 1")
    valid = frame.valid_depth_mask()
    if mask is not None:
        valid = valid & np.asarray(mask, dtype=bool)
    vs, us = np.nonzero(valid)
    if len(vs) == 0:
        empty = np.empty(0, dtype=np.int64)
        return PixelSamples(empty, empty, empty, np.empty(0, dtype=np.float64))

    hp, wp = frame.patch_grid.shape[:2]
    patch_ids = (vs // frame.patch_size) * wp + (us // frame.patch_size)

    # Choice without replacement, vectorized: give every valid pixel a random
    # key and keep the pixels_per_patch smallest keys within each patch.
    rng = np.random.default_rng(np.random.SeedSequence([seed, frame.frame_index]))
    keys = rng.random(len(vs))
    order = np.lexsort((keys, patch_ids))
    sorted_pids = patch_ids[order]
    starts = np.nonzero(np.diff(sorted_pids, prepend=sorted_pids[0] - 1))[0]
    rank = np.arange(len(sorted_pids)) - np.repeat(starts, np.diff(np.append(starts, len(sorted_pids))))
    take = order[rank < pixels_per_patch]
    # Canonical output order: by patch, then pixel position.
    take = take[np.lexsort((us[take], vs[take], patch_ids[take]))]

    u = us[take].astype(np.int64)
    v = vs[take].astype(np.int64)
    p = patch_ids[take].astype(np.int64)
    if frame.patch_weights is not None:
        w = frame.patch_weights.reshape(-1)[p].astype(np.float64)
    else:
        w = np.ones(len(p), dtype=np.float64)
    return PixelSamples(u, v, p, w)


class BackprojectedPoints(NamedTuple):
    points: np.ndarray       # (N, 3) float64 world
    patch_index: np.ndarray  # (N,) int64
    weight: np.ndarray       # (N,) float64


def backproject(
    samples: PixelSamples,
    depth: np.ndarray,
    intrinsics: CameraIntrinsics,
    pose: Pose,
) -> BackprojectedPoints:
    """Pinhole back-projection of sampled pixels into the world frame.

    Samples whose depth turns out invalid are dropped silently.
    """
    z = depth[samples.v, samples.u].astype(np.float64)
    ok = np.isfinite(z) & (z > 0)
    u = samples.u[ok].astype(np.float64)
    v = samples.v[ok].astype(np.float64)
    z = z[ok]
    x = (u - intrinsics.cx) * z / intrinsics.fx
    y = (v - intrinsics.cy) * z / intrinsics.fy
    cam = np.stack([x, y, z], axis=1)
    world = pose.transform(cam)
    return BackprojectedPoints(world, samples.patch_index[ok], samples.weight[ok])


def project(points_world: np.ndarray, intrinsics: CameraIntrinsics, pose: Pose):
    """Inverse of backproject: world points -> (u, v, depth)."""
    cam = (np.asarray(points_world, dtype=np.float64) - pose.translation) @ pose.rotation
    z = cam[:, 2]
    u = cam[:, 0] / z * intrinsics.fx + intrinsics.cx
    v = cam[:, 1] / z * intrinsics.fy + intrinsics.cy
    return u, v, z


def filter_segments(
    segments: List[SegmentProposal],
    min_area_frac: float,
    border_contact_frac: float,
    image_shape,
) -> List[SegmentProposal]:
    """Drop masks that are too small or hug the image border."""
    if not (0.0 <= min_area_frac <= 1.0 and 0.0 <= border_contact_frac <= 1.0):
        raise ValueError("filter fractions must be in [0, 1]")
    h, w = image_shape
    min_area = min_area_frac * h * w
    return [
        s for s in segments
        if s.mask_area >= min_area and s.border_contact <= border_contact_frac
    ]
