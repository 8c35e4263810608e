import numpy as np
import pytest

from voxfuse.core import CameraIntrinsics, Pose
from voxfuse.frames import FrameRecord, SegmentProposal


@pytest.fixture
def intrinsics():
    return CameraIntrinsics(fx=70.0, fy=70.0, cx=40.0, cy=32.0, width=80, height=64)


def make_frame(
    frame_index=0,
    pose=None,
    depth=None,
    dim=4,
    patch_size=16,
    height=64,
    width=80,
    patch_weights=None,
    segments=(),
    patch_value=None,
):
    """Small frame with constant depth and per-patch constant embeddings."""
    if pose is None:
        pose = Pose.identity()
    if depth is None:
        depth = np.full((height, width), 2.0, dtype=np.float32)
    hp = -(-depth.shape[0] // patch_size)
    wp = -(-depth.shape[1] // patch_size)
    if patch_value is None:
        grid = np.zeros((hp, wp, dim), dtype=np.float32)
        grid[..., 0] = 1.0
    else:
        grid = np.broadcast_to(
            np.asarray(patch_value, dtype=np.float32), (hp, wp, dim)
        ).copy()
    return FrameRecord(
        frame_index=frame_index,
        pose=pose,
        depth=depth,
        patch_grid=grid,
        patch_size=patch_size,
        patch_weights=patch_weights,
        segments=list(segments),
    )


def segment_from_rect(v0, v1, u0, u1, shape, embedding):
    mask = np.zeros(shape, dtype=bool)
    mask[v0:v1, u0:u1] = True
    return SegmentProposal.from_mask(mask, np.asarray(embedding, dtype=np.float32))
