"""Posed RGB-D dataset reader.

Expected layout under the dataset root:

    rgb/<frame>.png        8-bit RGB
    depth/<frame>.png      16-bit grayscale, millimeters, 0 = invalid
    poses.txt              per line: frame id + 12 floats (row-major 3x4 [R|t],
                           camera-to-world)
    intrinsics.txt         fx fy cx cy [width height] at the native resolution
    labels.txt             one class name per line; '*' prefix marks background

Frames are matched between rgb/ and depth/ by stem.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Tuple

import numpy as np
from PIL import Image


@dataclass(frozen=True)
class DatasetFrame:
    frame_index: int
    rgb: np.ndarray      # (H, W, 3) uint8
    depth_m: np.ndarray  # (H, W) float32 meters, 0 invalid
    pose_3x4: np.ndarray


@dataclass
class RgbdDataset:
    root: Path
    intrinsics: Tuple[float, float, float, float]  # fx, fy, cx, cy (native)
    native_size: Tuple[int, int]                   # (height, width)
    labels: List[str]
    background: List[str]
    poses: dict

    @classmethod
    def open(cls, root) -> "RgbdDataset":
        root = Path(root)
        if not root.is_dir():
            raise FileNotFoundError(f"dataset root {root} does not exist")
        parts = (root / "intrinsics.txt").read_text().split()
        fx, fy, cx, cy = (float(x) for x in parts[:4])

        poses = {}
        for line in (root / "poses.txt").read_text().splitlines():
            fields = line.split()
            if not fields:
                continue
            if len(fields) != 13:
                raise ValueError(
                    f"poses.txt line needs frame id + 12 floats, got {len(fields)}"
                )
            poses[int(fields[0])] = np.array(
                [float(x) for x in fields[1:]], dtype=np.float64
            ).reshape(3, 4)

        labels, background = [], []
        labels_file = root / "labels.txt"
        if labels_file.exists():
            for line in labels_file.read_text().splitlines():
                name = line.strip()
                if not name:
                    continue
                if name.startswith("*"):
                    name = name[1:].strip()
                    background.append(name)
                labels.append(name)

        first_rgb = sorted((root / "rgb").glob("*.png"))
        if not first_rgb:
            raise FileNotFoundError(f"no rgb frames under {root / 'rgb'}")
        with Image.open(first_rgb[0]) as img:
            width, height = img.size
        if len(parts) >= 6:
            width, height = int(parts[4]), int(parts[5])
        return cls(root, (fx, fy, cx, cy), (height, width), labels, background, poses)

    def frames(self) -> Iterator[DatasetFrame]:
        for rgb_path in sorted((self.root / "rgb").glob("*.png")):
            stem = rgb_path.stem
            index = int(stem)
            depth_path = self.root / "depth" / f"{stem}.png"
            if not depth_path.exists():
                raise FileNotFoundError(f"missing depth frame {depth_path}")
            if index not in self.poses:
                raise ValueError(f"missing pose for frame {index}")
            with Image.open(rgb_path) as img:
                rgb = np.asarray(img.convert("RGB"), dtype=np.uint8)
            with Image.open(depth_path) as img:
                depth_mm = np.asarray(img, dtype=np.float64)
            yield DatasetFrame(
                frame_index=index,
                rgb=rgb,
                depth_m=(depth_mm / 1000.0).astype(np.float32),
                pose_3x4=self.poses[index],
            )


def resize_rgb(rgb: np.ndarray, height: int, width: int) -> np.ndarray:
    img = Image.fromarray(rgb).resize((width, height), Image.BILINEAR)
    return np.asarray(img, dtype=np.uint8)


def resize_depth_nearest(depth: np.ndarray, height: int, width: int) -> np.ndarray:
    """Nearest-neighbor depth resize (interpolation would mix surfaces)."""
    src_h, src_w = depth.shape
    rows = (np.arange(height) * src_h / height).astype(np.int64).clip(0, src_h - 1)
    cols = (np.arange(width) * src_w / width).astype(np.int64).clip(0, src_w - 1)
    return depth[rows[:, None], cols[None, :]]


def scale_intrinsics(intrinsics, src_size, dst_size):
    fx, fy, cx, cy = intrinsics
    src_h, src_w = src_size
    dst_h, dst_w = dst_size
    sx = dst_w / src_w
    sy = dst_h / src_h
    return (fx * sx, fy * sy, cx * sx, cy * sy)
