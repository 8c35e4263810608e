"""Encoder and segmenter interfaces plus hermetic stub implementations.

Real vision models plug in by implementing the three protocols and
registering a profile. The stub profiles exist so exports (and CI) run
without model weights or network access.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Protocol, Tuple

import numpy as np


class PatchEncoder(Protocol):
    dim: int

    def encode(self, rgb: np.ndarray, patch_size: int) -> Tuple[np.ndarray, Optional[np.ndarray]]:
        """rgb (H, W, 3) -> ((Hp, Wp, d) patch grid, optional (Hp, Wp) saliency)."""


class ImageEncoder(Protocol):
    dim: int

    def encode(self, crop: np.ndarray) -> np.ndarray:
        """crop (h, w, 3) -> (d,) embedding."""


class TextEncoder(Protocol):
    dim: int

    def encode(self, text: str) -> np.ndarray:
        """label -> (d,) embedding."""


class Segmenter(Protocol):
    def segment(self, rgb: np.ndarray) -> List[np.ndarray]:
        """rgb (H, W, 3) -> list of (H, W) bool masks."""


def _patch_means(rgb: np.ndarray, patch_size: int) -> np.ndarray:
    """Mean color per patch, (Hp, Wp, 3) in [0, 1]; ragged edges padded by edge."""
    h, w = rgb.shape[:2]
    hp = -(-h // patch_size)
    wp = -(-w // patch_size)
    padded = np.pad(
        rgb.astype(np.float64) / 255.0,
        ((0, hp * patch_size - h), (0, wp * patch_size - w), (0, 0)),
        mode="edge",
    )
    blocks = padded.reshape(hp, patch_size, wp, patch_size, 3)
    return blocks.mean(axis=(1, 3))


@dataclass
class ConstantEncoder:
    """Patch, image, and text encoder returning one fixed vector."""

    value: np.ndarray

    @property
    def dim(self) -> int:
        return len(self.value)

    def encode(self, arg, patch_size: Optional[int] = None):
        vec = np.asarray(self.value, dtype=np.float32)
        if isinstance(arg, str) or patch_size is None:
            return vec.copy()
        h, w = arg.shape[:2]
        hp = -(-h // patch_size)
        wp = -(-w // patch_size)
        grid = np.broadcast_to(vec, (hp, wp, self.dim)).copy()
        return grid, None


@dataclass
class ColorHashEncoder:
    """Deterministic embeddings from pixel statistics; no model weights.

    Patch embeddings hash the per-patch mean color through a fixed random
    projection; crops hash their global mean color; text hashes the label
    bytes. Saliency is the per-patch luminance.
    """

    dim: int
    seed: int = 0

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        self._proj = rng.normal(size=(3, self.dim)).astype(np.float64)

    def _embed(self, color: np.ndarray) -> np.ndarray:
        out = color @ self._proj
        return (out / max(np.linalg.norm(out), 1e-9)).astype(np.float32)

    def encode(self, arg, patch_size: Optional[int] = None):
        if isinstance(arg, str):
            digest = np.frombuffer(arg.encode("utf-8"), dtype=np.uint8)
            rng = np.random.default_rng([self.seed, *digest.tolist()])
            vec = rng.normal(size=self.dim)
            return (vec / np.linalg.norm(vec)).astype(np.float32)
        if patch_size is None:
            mean = arg.astype(np.float64).mean(axis=(0, 1)) / 255.0
            return self._embed(mean)
        means = _patch_means(arg, patch_size)
        flat = means.reshape(-1, 3) @ self._proj
        norms = np.linalg.norm(flat, axis=1, keepdims=True)
        norms[norms < 1e-9] = 1.0
        grid = (flat / norms).reshape(*means.shape[:2], self.dim).astype(np.float32)
        saliency = means.mean(axis=2).astype(np.float32)
        return grid, saliency


class FullImageSegmenter:
    """Stub segmenter proposing the whole frame as a single mask."""

    def segment(self, rgb: np.ndarray) -> List[np.ndarray]:
        return [np.ones(rgb.shape[:2], dtype=bool)]


class GridSegmenter:
    """Stub segmenter splitting the frame into an n x n grid of masks."""

    def __init__(self, n: int = 2):
        self.n = n

    def segment(self, rgb: np.ndarray) -> List[np.ndarray]:
        h, w = rgb.shape[:2]
        masks = []
        for i in range(self.n):
            for j in range(self.n):
                mask = np.zeros((h, w), dtype=bool)
                mask[
                    i * h // self.n : (i + 1) * h // self.n,
                    j * w // self.n : (j + 1) * w // self.n,
                ] = True
                masks.append(mask)
        return masks


@dataclass
class EncoderBundle:
    patch: PatchEncoder
    image: ImageEncoder
    text: TextEncoder
    emit_saliency_weights: bool = False

    @property
    def dim(self) -> int:
        return self.patch.dim


def _stub_constant(dim: int) -> EncoderBundle:
    value = np.zeros(dim, dtype=np.float32)
    value[0] = 1.0
    enc = ConstantEncoder(value)
    return EncoderBundle(patch=enc, image=enc, text=enc)


def _stub_hash(dim: int) -> EncoderBundle:
    enc = ColorHashEncoder(dim)
    return EncoderBundle(patch=enc, image=enc, text=enc, emit_saliency_weights=True)


ENCODER_PROFILES: Dict[str, Callable[[int], EncoderBundle]] = {
    "stub-constant": _stub_constant,
    "stub-hash": _stub_hash,
}

SEGMENTER_PROFILES: Dict[str, Callable[[], Segmenter]] = {
    "stub-full": FullImageSegmenter,
    "stub-grid": lambda: GridSegmenter(2),
}


def resolve_encoders(profile: str, dim: int) -> EncoderBundle:
    if profile not in ENCODER_PROFILES:
        raise KeyError(
            f"unknown encoder profile {profile!r}; available: "
            f"{sorted(ENCODER_PROFILES)}. Real vision models can be added by "
            f"registering an EncoderBundle factory in ENCODER_PROFILES."
        )
    return ENCODER_PROFILES[profile](dim)


def resolve_segmenter(profile: str) -> Segmenter:
    if profile not in SEGMENTER_PROFILES:
        raise KeyError(
            f"unknown segmenter profile {profile!r}; available: "
            f"{sorted(SEGMENTER_PROFILES)}"
        )
    return SEGMENTER_PROFILES[profile]()
