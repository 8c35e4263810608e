import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from voxfuse.core import (
    ConfigError,
    MapConfig,
    Pose,
    UndefinedSimilarityError,
    cosine_similarity,
    rotation_angle,
    voxel_center,
    world_to_voxel,
)


class TestWorldToVoxel:
    def test_origin(self):
        assert world_to_voxel((0.0, 0.0, 0.0), 0.05) == (0, 0, 0)

    def test_hand_computed(self):
        assert world_to_voxel((0.051, -0.001, 0.10), 0.05) == (1, -1, 2)

    def test_negative_boundary_floor_semantics(self):
        assert world_to_voxel((-0.05, -0.05, -0.05), 0.05) == (-1, -1, -1)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            world_to_voxel((np.nan, 0.0, 0.0), 0.05)
        with pytest.raises(ValueError):
            world_to_voxel((np.inf, 0.0, 0.0), 0.05)

    @given(
        st.tuples(
            st.integers(-10**6, 10**6),
            st.integers(-10**6, 10**6),
            st.integers(-10**6, 10**6),
        ),
        st.floats(1e-3, 10.0, allow_nan=False),
    )
    def test_requantization_idempotent(self, key, voxel_size):
        center = voxel_center(key, voxel_size)
        assert world_to_voxel(center, voxel_size) == key


class TestCosineSimilarity:
    def test_self_similarity(self):
        v = np.array([0.3, -1.2, 4.0])
        assert cosine_similarity(v, v) == pytest.approx(1.0)

    def test_orthogonal(self):
        assert cosine_similarity([1, 0], [0, 1]) == pytest.approx(0.0)

    def test_45_degrees(self):
        assert cosine_similarity([1, 1], [1, 0]) == pytest.approx(0.7071, abs=1e-4)

    def test_zero_norm_rejected(self):
        with pytest.raises(UndefinedSimilarityError):
            cosine_similarity([0.0, 0.0], [1.0, 0.0])

    @given(
        st.lists(st.floats(-10, 10, allow_nan=False), min_size=3, max_size=3),
        st.floats(0.01, 100.0),
        st.floats(0.01, 100.0),
    )
    def test_scale_invariance(self, vec, alpha, beta):
        a = np.asarray(vec) + np.array([1.0, 0.0, 0.0])  # avoid zero norm
        b = np.array([0.5, -2.0, 1.0])
        assert cosine_similarity(alpha * a, beta * b) == pytest.approx(
            cosine_similarity(a, b), abs=1e-9
        )


class TestPose:
    def test_identity_valid(self):
        Pose.identity()

    def test_non_orthonormal_rejected(self):
        bad = np.eye(3)
        bad[0, 0] = 1.1
        with pytest.raises(ValueError):
            Pose(bad, np.zeros(3))

    def test_reflection_rejected(self):
        refl = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(ValueError):
            Pose(refl, np.zeros(3))

    def test_rotation_angle(self):
        a = 0.07
        rz = np.array(
            [
                [math.cos(a), -math.sin(a), 0.0],
                [math.sin(a), math.cos(a), 0.0],
                [0.0, 0.0, 1.0],
            ]
        )
        assert rotation_angle(np.eye(3), rz) == pytest.approx(a, abs=1e-9)


class TestMapConfig:
    def test_defaults_match_evaluated_configuration(self):
        cfg = MapConfig()
        assert cfg.voxel_size == 0.05
        assert cfg.max_hypotheses == 3
        assert cfg.iou_threshold == 0.2
        assert cfg.variance_ratio == 1.0
        assert cfg.dense_motion_thresholds == (0.08, 0.06)
        assert cfg.instance_motion_thresholds == (0.14, 0.11)
        assert cfg.dense_pixels_per_patch == 5
        assert cfg.instance_pixels_per_patch == 9
        assert cfg.window_radius == 6.0
        assert cfg.fusion_period == 5

    def test_text_round_trip(self):
        cfg = MapConfig(variance_ratio=5.0, window_radius=math.inf)
        parsed = MapConfig.from_text(cfg.to_text())
        assert parsed == cfg

    def test_rejects_bad_values(self):
        with pytest.raises(ConfigError):
            MapConfig(voxel_size=0.0)
        with pytest.raises(ConfigError):
            MapConfig(iou_threshold=1.5)
        with pytest.raises(ConfigError):
            MapConfig(variance_ratio=-1.0)

    def test_from_text_unknown_key(self):
        with pytest.raises(ConfigError):
            MapConfig.from_text("no_such_key = 3\n")
