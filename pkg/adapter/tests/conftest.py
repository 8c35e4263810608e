import numpy as np
import pytest
from PIL import Image


@pytest.fixture()
def toy_dataset(tmp_path):
    """Two-frame dataset: a bright square on a dark background, flat depth."""
    root = tmp_path / "toy"
    (root / "rgb").mkdir(parents=True)
    (root / "depth").mkdir()
    rng = np.random.default_rng(5)
    for i in range(2):
        rgb = np.full((96, 128, 3), 40, dtype=np.uint8)
        rgb[30:70, 40 + 10 * i : 90 + 10 * i] = (200, 160, 60)
        Image.fromarray(rgb).save(root / "rgb" / f"{i:06d}.png")
        depth_mm = np.full((96, 128), 2000, dtype=np.uint16)
        depth_mm[30:70, 40 + 10 * i : 90 + 10 * i] = 1500
        depth_mm[:4] = 0  # invalid strip
        Image.fromarray(depth_mm).save(root / "depth" / f"{i:06d}.png")
    poses = []
    for i in range(2):
        pose = np.hstack([np.eye(3), np.array([[0.2 * i], [0.0], [0.0]])])
        poses.append(str(i) + " " + " ".join(f"{x:.9f}" for x in pose.reshape(-1)))
    (root / "poses.txt").write_text("\n".join(poses) + "\n")
    (root / "intrinsics.txt").write_text("110.0 110.0 64.0 48.0 128 96\n")
    (root / "labels.txt").write_text("chair\ntable\n*floor\n")
    return root
