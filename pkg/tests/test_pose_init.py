"""Tests for correlation seeding and the Euler pose metric."""

import math

import numpy as np
import pytest

from featalign.feature_maps import FeatureMap
from featalign.geometry import SE3Pose, se3_exp
from featalign.lm_align import SparsePointSet
from featalign.pose_init import (
    CORRELATION_BUDGET,
    CorrelationMap,
    EulerPose,
    InitConfig,
    InitError,
    _grid_energies,
    candidate_energy,
    corr_pose_init,
    correlation_map,
    euler_pose_from_se3,
    euler_pose_to_se3,
    euler_to_rotation,
    median_correlation_flow,
    pose_regression_loss,
    rotation_to_euler,
)
from featalign.synth import SceneConfig, build_pair, generate_scene, mean_flow, sample_pose_perturbation


def unit_vector_map(h, w, d, seed):
    rng = np.random.default_rng(seed)
    data = rng.normal(size=(h, w, d))
    data /= np.linalg.norm(data, axis=2, keepdims=True)
    return FeatureMap(data)


@pytest.fixture(scope="module")
def large_pair():
    rng = np.random.default_rng(31)
    scene = generate_scene(rng, SceneConfig(), seed=31)
    pose = sample_pose_perturbation(rng, "large", scene)
    return build_pair(scene, pose, rng, magnitude_class="large", seed=31)


class TestCorrelationMap:
    def test_self_similarity_argmax_on_diagonal(self):
        f = unit_vector_map(6, 7, 4, seed=0)
        cmap = correlation_map(f, f)
        h, w = 6, 7
        flat = cmap.values.reshape(h, w, -1)
        best = flat.argmax(axis=2)
        vv, uu = np.mgrid[0:h, 0:w]
        np.testing.assert_array_equal(best, vv * w + uu)

    def test_orthogonal_features_correlate_to_zero(self):
        a = np.zeros((5, 5, 2))
        a[:, :, 0] = 1.0
        b = np.zeros((5, 5, 2))
        b[:, :, 1] = 1.0
        cmap = correlation_map(FeatureMap(a), FeatureMap(b), normalize_slabs=False)
        np.testing.assert_array_equal(cmap.values, 0.0)

    def test_cosine_range_and_slab_norms(self):
        f = FeatureMap(np.random.default_rng(3).normal(size=(8, 9, 3)))
        g = FeatureMap(np.random.default_rng(4).normal(size=(7, 6, 3)))
        raw = correlation_map(f, g, normalize_slabs=False)
        assert raw.values.min() >= -1.0 - 1e-12
        assert raw.values.max() <= 1.0 + 1e-12
        assert not raw.slab_normalized
        normed = correlation_map(f, g)
        slab_norms = np.linalg.norm(normed.values.reshape(8, 9, -1), axis=2)
        np.testing.assert_allclose(slab_norms, 1.0, atol=1e-12)

    def test_zero_feature_vector_gives_zero_slab(self):
        data = np.random.default_rng(5).normal(size=(6, 6, 2))
        data[2, 3] = 0.0
        f = FeatureMap(data)
        g = unit_vector_map(6, 6, 2, seed=6)
        cmap = correlation_map(f, g)
        assert np.all(cmap.values[2, 3] == 0.0)
        assert np.isfinite(cmap.values).all()

    def test_swap_transposition_symmetry_before_slab_normalization(self):
        f = FeatureMap(np.random.default_rng(7).normal(size=(5, 6, 3)))
        g = FeatureMap(np.random.default_rng(8).normal(size=(4, 7, 3)))
        fwd = correlation_map(f, g, normalize_slabs=False).values
        bwd = correlation_map(g, f, normalize_slabs=False).values
        np.testing.assert_allclose(fwd, np.transpose(bwd, (2, 3, 0, 1)), atol=1e-14)

    def test_budget_guard(self):
        big = FeatureMap(np.zeros((65, 64, 1)))
        with pytest.raises(InitError):
            correlation_map(big, big)
        assert 65 * 64 > CORRELATION_BUDGET

    def test_channel_mismatch(self):
        with pytest.raises(InitError):
            correlation_map(
                FeatureMap(np.zeros((4, 4, 2))), FeatureMap(np.zeros((4, 4, 3)))
            )

    def test_median_flow_of_empty_signal_is_zero(self):
        cmap = CorrelationMap(values=np.zeros((4, 4, 4, 4)), slab_normalized=True)
        assert median_correlation_flow(cmap) == (0.0, 0.0)


class TestEulerPose:
    def test_angles_wrap_into_half_open_interval(self):
        p = EulerPose(r_euler=[1.5 * math.pi, -math.pi, math.pi], t=[0, 0, 0])
        np.testing.assert_allclose(p.r_euler, [-0.5 * math.pi, math.pi, math.pi])

    def test_rotation_round_trip(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            angles = rng.uniform(-1.3, 1.3, size=3)
            back = rotation_to_euler(euler_to_rotation(angles))
            np.testing.assert_allclose(back, angles, atol=1e-12)

    def test_gimbal_lock_still_reproduces_rotation(self):
        r = euler_to_rotation([0.3, 0.5 * math.pi, 0.2])
        back = rotation_to_euler(r)
        np.testing.assert_allclose(euler_to_rotation(back), r, atol=1e-10)

    def test_se3_round_trip(self):
        pose = se3_exp(np.array([0.1, -0.2, 0.05, 0.03, -0.01, 0.2]))
        again = euler_pose_to_se3(euler_pose_from_se3(pose))
        np.testing.assert_allclose(again.rotation, pose.rotation, atol=1e-12)
        np.testing.assert_allclose(again.translation, pose.translation, atol=1e-12)

    def test_non_finite_rejected(self):
        with pytest.raises(InitError):
            EulerPose(r_euler=[np.nan, 0, 0], t=[0, 0, 0])


class TestPoseRegressionLoss:
    def test_equal_poses_cost_nothing(self):
        p = EulerPose(r_euler=[0.1, 0.2, -0.3], t=[1.0, 2.0, 3.0])
        assert pose_regression_loss(p, p) == 0.0

    def test_unit_translation_offset(self):
        a = EulerPose(r_euler=[0, 0, 0], t=[1.0, 0.0, 0.0])
        b = EulerPose(r_euler=[0, 0, 0], t=[0.0, 0.0, 0.0])
        assert pose_regression_loss(a, b) == 1.0

    def test_tenth_radian_at_default_weight(self):
        a = EulerPose(r_euler=[0.1, 0.0, 0.0], t=[0, 0, 0])
        b = EulerPose(r_euler=[0.0, 0.0, 0.0], t=[0, 0, 0])
        assert pose_regression_loss(a, b) == pytest.approx(1.0, rel=1e-12)

    def test_zero_only_when_both_parts_match(self):
        base = EulerPose(r_euler=[0, 0, 0], t=[0, 0, 0])
        off_r = EulerPose(r_euler=[1e-3, 0, 0], t=[0, 0, 0])
        off_t = EulerPose(r_euler=[0, 0, 0], t=[1e-3, 0, 0])
        assert pose_regression_loss(off_r, base) > 0.0
        assert pose_regression_loss(off_t, base) > 0.0


class TestCandidateEnergy:
    def test_grid_energies_match_reference_scorer(self, large_pair):
        pair = large_pair
        rng = np.random.default_rng(9)
        rotations, translations = [], []
        for _ in range(8):
            p = se3_exp(rng.uniform(-0.15, 0.15, size=6))
            rotations.append(p.rotation)
            translations.append(p.translation)
        vec = _grid_energies(
            pair.ref_pyramid.level(1), pair.tgt_pyramid.level(1),
            pair.points.at_level(1), pair.points.depths,
            np.array(rotations), np.array(translations),
            pair.intrinsics.at_level(1), 0.3, 8,
        )
        for i in range(8):
            ref = candidate_energy(
                pair.ref_pyramid.level(1), pair.tgt_pyramid.level(1),
                pair.points, pair.intrinsics,
                SE3Pose(rotation=rotations[i], translation=translations[i]),
            )
            if math.isinf(ref):
                assert math.isinf(vec[i])
            else:
                assert vec[i] == pytest.approx(ref, rel=1e-12)

    def test_too_few_valid_points_scores_infinite(self, large_pair):
        pair = large_pair
        # a pose that throws everything out of frame
        wild = SE3Pose(rotation=np.eye(3), translation=np.array([50.0, 0.0, 0.0]))
        e = candidate_energy(
            pair.ref_pyramid.level(1), pair.tgt_pyramid.level(1),
            pair.points, pair.intrinsics, wild,
        )
        assert math.isinf(e)


class TestCorrPoseInit:
    def test_identical_pyramids_give_identity(self, large_pair):
        pair = large_pair
        pose = corr_pose_init(
            pair.tgt_pyramid, pair.tgt_pyramid, pair.points, pair.intrinsics
        )
        np.testing.assert_array_equal(pose.rotation, np.eye(3))
        np.testing.assert_array_equal(pose.translation, np.zeros(3))

    def test_pure_translation_flow_recovered(self):
        rng = np.random.default_rng(4)
        cfg = SceneConfig(depth_slant=0.0, depth_noise=0.0)
        scene = generate_scene(rng, cfg, seed=4)
        tx = 18.0 * float(scene.depth.mean()) / cfg.fx
        pose = SE3Pose(rotation=np.eye(3), translation=np.array([tx, 0.0, 0.0]))
        pair = build_pair(scene, pose, rng, magnitude_class="large", seed=4)
        cmap = correlation_map(pair.ref_pyramid.level(1), pair.tgt_pyramid.level(1))
        du, dv = median_correlation_flow(cmap)
        gt_level1 = mean_flow(scene, pose) / 8.0
        assert abs(du - gt_level1) <= 1.0
        assert abs(dv) <= 1.0

    def test_never_worse_than_identity(self):
        for s in (50, 51, 52):
            rng = np.random.default_rng(s)
            scene = generate_scene(rng, SceneConfig(), seed=s)
            pose = sample_pose_perturbation(rng, "large", scene)
            pair = build_pair(scene, pose, rng, magnitude_class="large", seed=s)
            seeded = corr_pose_init(
                pair.ref_pyramid, pair.tgt_pyramid, pair.points, pair.intrinsics
            )
            args = (pair.ref_pyramid.level(1), pair.tgt_pyramid.level(1),
                    pair.points, pair.intrinsics)
            assert candidate_energy(*args, seeded) <= candidate_energy(*args, SE3Pose.identity())

    def test_seed_usually_beats_identity_on_large_baselines(self):
        wins = 0
        for s in range(10):
            rng = np.random.default_rng(100 + s)
            scene = generate_scene(rng, SceneConfig(), seed=100 + s)
            pose = sample_pose_perturbation(rng, "large", scene)
            pair = build_pair(scene, pose, rng, magnitude_class="large", seed=100 + s)
            seeded = corr_pose_init(
                pair.ref_pyramid, pair.tgt_pyramid, pair.points, pair.intrinsics
            )
            args = (pair.ref_pyramid.level(1), pair.tgt_pyramid.level(1),
                    pair.points, pair.intrinsics)
            if candidate_energy(*args, seeded) < candidate_energy(*args, SE3Pose.identity()):
                wins += 1
        assert wins >= 8

    def test_too_few_points_fall_back_to_identity(self, large_pair):
        pair = large_pair
        thin = SparsePointSet(
            uv=pair.points.uv[:4], depths=pair.points.depths[:4], warning=None
        )
        pose = corr_pose_init(pair.ref_pyramid, pair.tgt_pyramid, thin, pair.intrinsics)
        np.testing.assert_array_equal(pose.rotation, np.eye(3))
        np.testing.assert_array_equal(pose.translation, np.zeros(3))


class TestInitConfig:
    def test_even_step_count_rejected(self):
        with pytest.raises(InitError):
            InitConfig(t_steps=4)

    def test_unknown_key_rejected(self):
        with pytest.raises(InitError):
            InitConfig.from_mapping({"yaw_range": 3.0})

    def test_mapping_round_trip(self):
        cfg = InitConfig.from_mapping({"yaw_range_deg": "3.0", "t_steps": "3"})
        assert cfg.yaw_range_deg == 3.0
        assert cfg.t_steps == 3
        assert cfg.pitch_range_deg == 6.0
