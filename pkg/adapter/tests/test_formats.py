import io

import numpy as np
import pytest

from rgbd_adapter.formats import StreamWriter, mask_to_runs, runs_to_mask, write_prompts


class TestRle:
    def test_round_trip_random(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            mask = rng.random((11, 19)) < rng.uniform(0.1, 0.9)
            assert np.array_equal(runs_to_mask(mask_to_runs(mask), 11, 19), mask)

    def test_starts_with_zero_run(self):
        assert mask_to_runs(np.ones((2, 2), dtype=bool))[0] == 0
        assert mask_to_runs(np.zeros((2, 2), dtype=bool)) == [4]

    def test_runs_cover_image(self):
        mask = np.zeros((5, 7), dtype=bool)
        mask[1:3, 2:5] = True
        assert sum(mask_to_runs(mask)) == 35

    def test_bad_total_rejected(self):
        with pytest.raises(ValueError):
            runs_to_mask([3, 3], 2, 2)


class TestStreamWriter:
    def test_shape_validation(self):
        buf = io.BytesIO()
        writer = StreamWriter(buf, dim=4, height=32, width=48, patch_size=16,
                              intrinsics=(30, 30, 24, 16))
        with pytest.raises(ValueError):
            writer.write_frame(
                frame_index=0,
                pose_3x4=np.eye(3),  # wrong shape
                depth=np.zeros((32, 48), dtype=np.float32),
                patch_grid=np.zeros((2, 3, 4), dtype=np.float32),
            )
        with pytest.raises(ValueError):
            writer.write_frame(
                frame_index=0,
                pose_3x4=np.hstack([np.eye(3), np.zeros((3, 1))]),
                depth=np.zeros((32, 48), dtype=np.float32),
                patch_grid=np.zeros((2, 3, 8), dtype=np.float32),  # wrong d
            )

    def test_missing_weights_rejected(self):
        buf = io.BytesIO()
        writer = StreamWriter(buf, dim=4, height=32, width=48, patch_size=16,
                              intrinsics=(30, 30, 24, 16), with_patch_weights=True)
        with pytest.raises(ValueError):
            writer.write_frame(
                frame_index=0,
                pose_3x4=np.hstack([np.eye(3), np.zeros((3, 1))]),
                depth=np.zeros((32, 48), dtype=np.float32),
                patch_grid=np.zeros((2, 3, 4), dtype=np.float32),
            )

    def test_prompt_dim_mismatch(self):
        with pytest.raises(ValueError):
            write_prompts(io.BytesIO(), ["a", "b"], np.zeros((3, 4), dtype=np.float32))
