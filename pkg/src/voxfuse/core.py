"""Shared domain types, configuration, and voxel grid addressing."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Optional, Tuple

import numpy as np

VoxelKey = Tuple[int, int, int]

# Rotation matrices accepted as orthonormal within this tolerance.
ROTATION_ORTHO_TOL = 1e-5


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (e.g. embedding dim mismatch)."""


class StreamFormatError(ValueError):
    """Malformed binary input. Carries the byte offset where parsing failed."""

    def __init__(self, message: str, offset: Optional[int] = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class UndefinedSimilarityError(ValueError):
    """Cosine similarity requested against a zero-norm vector."""


class UndefinedFusionError(ValueError):
    """Fusion requested where both precision weights are zero."""


@dataclass(frozen=True)
class Pose:
    """Rigid camera-to-world transform."""

    rotation: np.ndarray    # (3, 3) orthonormal, det +1
    translation: np.ndarray  # (3,) meters

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if r.shape != (3, 3) or t.shape != (3,):
            raise ValueError(f"pose shapes {r.shape}, {t.shape} invalid")
        if not np.all(np.isfinite(r)) or not np.all(np.isfinite(t)):
            raise ValueError("pose contains non-finite values")
        if np.max(np.abs(r @ r.T - np.eye(3))) > ROTATION_ORTHO_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 10 * ROTATION_ORTHO_TOL:
            raise ValueError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Map camera-frame points (N, 3) into the world frame."""
        return points @ self.rotation.T + self.translation


def rotation_angle(r_a: np.ndarray, r_b: np.ndarray) -> float:
    """Geodesic angle (radians) between two rotation matrices."""
    r_rel = r_a.T @ r_b
    c = (np.trace(r_rel) - 1.0) / 2.0
    return float(math.acos(min(1.0, max(-1.0, c))))


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image")


@dataclass
class MapConfig:
    """Engine parameters. Defaults follow the evaluated configuration."""

    voxel_size: float = 0.05                 # m
    embedding_dim: Optional[int] = None      # None: adopt the stream's d
    max_hypotheses: int = 3                  # K, per voxel
    iou_threshold: float = 0.2               # association overlap gate
    variance_ratio: float = 1.0              # lambda; 5.0 for the saliency-weighted profile
    dense_motion_thresholds: Tuple[float, float] = (0.08, 0.06)      # (m, rad)
    instance_motion_thresholds: Tuple[float, float] = (0.14, 0.11)   # (m, rad)
    dense_pixels_per_patch: int = 5
    instance_pixels_per_patch: int = 9
    window_radius: float = 6.0               # m; inf = unbounded
    fusion_period: int = 5                   # fuse every Nth processed frame
    patch_size: int = 16                     # px, must match the stream header
    mask_min_area_frac: float = 0.002
    mask_border_contact_frac: float = 0.15
    crop_padding_frac: float = 0.05          # provenance only; crops made upstream
    evidence_gating: bool = True             # gate windowed fusion by evidence score
    instance_precision_scope: str = "window"  # or "global": count hypotheses outside window

    def __post_init__(self):
        if self.voxel_size <= 0:
            raise ConfigError("voxel_size must be positive")
        if self.max_hypotheses < 1:
            raise ConfigError("max_hypotheses must be >= 1")
        if not (0.0 < self.iou_threshold <= 1.0):
            raise ConfigError("iou_threshold must be in (0, 1]")
        if self.variance_ratio <= 0:
            raise ConfigError("variance_ratio must be positive")
        if self.window_radius <= 0:
            raise ConfigError("window_radius must be positive (use inf for global)")
        if self.fusion_period < 1:
            raise ConfigError("fusion_period must be >= 1")
        if self.instance_precision_scope not in ("window", "global"):
            raise ConfigError("instance_precision_scope must be 'window' or 'global'")

    def to_text(self) -> str:
        """Canonical flat key-value serialization (round-trips via from_text)."""
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ", ".join(repr(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MapConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in known:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            kwargs[key] = _parse_config_value(key, value)
        return cls(**kwargs)


def _parse_config_value(key: str, value: str):
    if key in ("dense_motion_thresholds", "instance_motion_thresholds"):
        parts = [p for p in value.replace(",", " ").split() if p]
        if len(parts) != 2:
            raise ConfigError(f"{key} expects two numbers")
        return (float(parts[0]), float(parts[1]))
    if key in ("evidence_gating",):
        low = value.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key} expects a boolean")
    if key in ("embedding_dim",):
        return None if value.lower() in ("none", "auto") else int(value)
    if key in ("max_hypotheses", "dense_pixels_per_patch", "instance_pixels_per_patch",
               "fusion_period", "patch_size"):
        return int(value)
    if key in ("instance_precision_scope",):
        return value
    if key in ("window_radius",):
        return math.inf if value.lower() in ("inf", "infinite") else float(value)
    return float(value)


def world_to_voxel(point, voxel_size: float) -> VoxelKey:
    """Quantize a world point to its grid cell (floor semantics on boundaries)."""
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    p = np.asarray(point, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise ValueError(f"non-finite point {p}")
    k = np.floor(p / voxel_size).astype(np.int64)
    return (int(k[0]), int(k[1]), int(k[2]))


def points_to_voxels(points: np.ndarray, voxel_size: float) -> np.ndarray:
    """Vectorized world_to_voxel: (N, 3) points -> (N, 3) int64 keys."""
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    pts = np.asarray(points, dtype=np.float64)
    if not np.all(np.isfinite(pts)):
        raise ValueError("non-finite point in batch")
    return np.floor(pts / voxel_size).astype(np.int64)


def voxel_center(key: VoxelKey, voxel_size: float) -> np.ndarray:
    return (np.asarray(key, dtype=np.float64) + 0.5) * voxel_size


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine of the angle between two embeddings, in [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise UndefinedSimilarityError("cosine similarity undefined for zero-norm vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))
