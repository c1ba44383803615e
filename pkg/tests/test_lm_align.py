"""LM solver tests: residuals, weights, normal equations, damping schedule.

Scenario maps use power-of-two intrinsics (fx = fy = 64, cx = cy = 32) so
identity warps reproduce pixel coordinates exactly in floating point.
"""

import math

import numpy as np
import pytest

from featalign.feature_maps import FeatureMap, FeaturePyramid, build_baseline_pyramid
from featalign.geometry import CameraIntrinsics, SE3Pose, boxplus, se3_exp
from featalign.lm_align import (
    AlignmentError,
    DegenerateSystemError,
    LMConfig,
    PointFileError,
    SparsePointSet,
    align_coarse_to_fine,
    align_level,
    build_normal_equations,
    compute_jacobian,
    compute_residuals,
    damp,
    huber_energy,
    huber_weights,
    load_points_text,
    save_points_text,
    solve_step,
)


def _K64():
    return CameraIntrinsics(fx=64.0, fy=64.0, cx=32.0, cy=32.0, width=64, height=64)


def _ramp_pair(a=0.05, b=0.08, h=64, w=64):
    """Reference and target both hold the same two-channel ramp."""
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    chans = np.stack([a * u + b * v, b * u - a * v], axis=2)
    return FeatureMap(chans), FeatureMap(chans)


def _grid_points(rng, n=24, lo=8.0, hi=56.0, depth_lo=2.0, depth_hi=4.0):
    uv = rng.uniform(lo, hi, size=(n, 2))
    depths = rng.uniform(depth_lo, depth_hi, size=n)
    return uv, depths


class TestHuber:
    def test_weights_inside_and_outside(self):
        w = huber_weights(np.array([0.2, 0.3, 0.6]), gamma=0.3)
        np.testing.assert_allclose(w, [1.0, 1.0, 0.5])

    def test_energy_hand_values(self):
        # 0.5 * 0.2^2 = 0.02; 0.3 * (0.6 - 0.15) = 0.135
        assert huber_energy(np.array([0.2]), 0.3) == pytest.approx(0.02)
        assert huber_energy(np.array([0.6]), 0.3) == pytest.approx(0.135)

    def test_energy_continuous_at_gamma(self):
        below = huber_energy(np.array([0.3 - 1e-12]), 0.3)
        above = huber_energy(np.array([0.3 + 1e-12]), 0.3)
        assert abs(below - above) < 1e-9

    def test_zero_norm_weight_is_one(self):
        assert huber_weights(np.array([0.0]), 0.3)[0] == 1.0


class TestComputeResiduals:
    def test_identical_maps_identity_pose(self):
        rng = np.random.default_rng(1)
        fmap = FeatureMap(rng.uniform(size=(64, 64, 2)).astype(np.float32))
        uv, depths = _grid_points(rng)
        out = compute_residuals(fmap, fmap, uv, depths, SE3Pose.identity(), _K64())
        assert out.n_valid == len(uv)
        np.testing.assert_allclose(out.residuals, 0.0, atol=1e-12)
        assert out.energy == pytest.approx(0.0, abs=1e-20)

    def test_constant_offset_appears_in_every_block(self):
        rng = np.random.default_rng(2)
        base = rng.uniform(size=(64, 64, 2))
        ref = FeatureMap(base)
        tgt = FeatureMap(base + 0.25)
        uv, depths = _grid_points(rng)
        out = compute_residuals(ref, tgt, uv, depths, SE3Pose.identity(), _K64())
        np.testing.assert_allclose(out.residuals[out.valid], 0.25, atol=1e-6)

    def test_invalid_points_hold_zeros(self):
        rng = np.random.default_rng(3)
        fmap = FeatureMap(rng.uniform(size=(64, 64, 1)).astype(np.float32))
        uv = np.array([[32.0, 32.0], [63.0, 32.0]])  # second too close to border
        depths = np.array([2.0, 2.0])
        out = compute_residuals(fmap, fmap, uv, depths, SE3Pose.identity(), _K64())
        assert list(out.valid) == [True, False]
        np.testing.assert_array_equal(out.residuals[1], 0.0)

    def test_pose_pushing_points_out_reduces_valid_count(self):
        rng = np.random.default_rng(4)
        fmap = FeatureMap(rng.uniform(size=(64, 64, 1)).astype(np.float32))
        uv, depths = _grid_points(rng)
        pose = SE3Pose(np.eye(3), np.array([50.0, 0.0, 0.0]))
        out = compute_residuals(fmap, fmap, uv, depths, pose, _K64())
        assert out.n_valid == 0
        assert out.energy == 0.0


class TestComputeJacobian:
    def test_zero_gradient_map_gives_zero_jacobian(self):
        fmap = FeatureMap(np.full((64, 64, 1), 2.0, dtype=np.float32))
        rng = np.random.default_rng(5)
        uv, depths = _grid_points(rng)
        jac, valid = compute_jacobian(fmap, uv, depths, SE3Pose.identity(), _K64())
        assert valid.all()
        np.testing.assert_array_equal(jac, 0.0)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        smooth = np.cumsum(np.cumsum(rng.normal(size=(64, 64, 2)), axis=0), axis=1)
        smooth = (smooth - smooth.mean()) / smooth.std()
        ref = FeatureMap(np.zeros((64, 64, 2), dtype=np.float32))
        tgt = FeatureMap(smooth.astype(np.float32))
        k = _K64()
        pose = se3_exp(np.array([0.01, -0.02, 0.015, 0.004, -0.003, 0.006]))
        step = 1e-6

        checked = 0
        for _ in range(40):
            uv = rng.uniform(10, 54, size=(1, 2))
            depths = rng.uniform(2.0, 4.0, size=1)
            base = compute_residuals(ref, tgt, uv, depths, pose, k)
            if not base.valid[0]:
                continue
            # Skip warps near interpolation cell edges where the sampled
            # gradient is discontinuous and differencing is invalid.
            frac = base.warped[0] - np.floor(base.warped[0])
            if np.any(np.minimum(frac, 1.0 - frac) < 5e-3):
                continue
            jac, _ = compute_jacobian(tgt, uv, depths, pose, k)
            fd = np.zeros((2, 6))
            for col in range(6):
                d = np.zeros(6)
                d[col] = step
                hi = compute_residuals(ref, tgt, uv, depths, boxplus(d, pose), k)
                lo = compute_residuals(ref, tgt, uv, depths, boxplus(-d, pose), k)
                fd[:, col] = (hi.residuals[0] - lo.residuals[0]) / (2 * step)
            scale = max(np.abs(fd).max(), 1e-9)
            assert np.abs(jac[0] - fd).max() / scale < 1e-3
            checked += 1
        assert checked >= 25


class TestNormalEquations:
    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(7)
        n, d = 30, 2
        jac = rng.normal(size=(n, d, 6))
        res = rng.normal(size=(n, d))
        w = rng.uniform(0.1, 1.0, size=n)
        h, b = build_normal_equations(jac, res, w)

        j_flat = jac.reshape(n * d, 6)
        w_flat = np.repeat(w, d)
        h_ref = j_flat.T @ np.diag(w_flat) @ j_flat
        b_ref = -j_flat.T @ np.diag(w_flat) @ res.reshape(-1)
        np.testing.assert_allclose(h, h_ref, atol=1e-12)
        np.testing.assert_allclose(b, b_ref, atol=1e-12)

    def test_hessian_is_psd(self):
        rng = np.random.default_rng(8)
        jac = rng.normal(size=(20, 2, 6))
        res = rng.normal(size=(20, 2))
        w = rng.uniform(0.0, 1.0, size=20)
        h, _ = build_normal_equations(jac, res, w)
        eigs = np.linalg.eigvalsh(h)
        assert eigs[0] > -1e-10
        np.testing.assert_allclose(h, h.T, atol=1e-12)


class TestDamping:
    def test_levenberg_adds_identity(self):
        h = np.diag([2.0, 0.0, 1.0, 1.0, 1.0, 1.0])
        out = damp(h, 3.0, "levenberg")
        np.testing.assert_allclose(out, h + 3.0 * np.eye(6), atol=0)

    def test_marquardt_scales_diagonal_with_floor(self):
        h = np.diag([2.0, 0.0, 1.0, 1.0, 1.0, 1.0])
        out = damp(h, 3.0, "marquardt")
        assert out[0, 0] == pytest.approx(8.0)
        assert out[1, 1] == pytest.approx(3e-12)

    def test_zero_lambda_keeps_h(self):
        rng = np.random.default_rng(9)
        a = rng.normal(size=(6, 6))
        h = a @ a.T
        for mode in ("levenberg", "marquardt"):
            np.testing.assert_allclose(damp(h, 0.0, mode), h, atol=0)


class TestSolveStep:
    def test_zero_lambda_equals_gauss_newton(self):
        rng = np.random.default_rng(10)
        a = rng.normal(size=(12, 6))
        h = a.T @ a + 0.5 * np.eye(6)
        b = rng.normal(size=6)
        delta = solve_step(damp(h, 0.0, "levenberg"), b)
        np.testing.assert_allclose(delta, np.linalg.solve(h, b), atol=1e-10)

    def test_huge_lambda_approaches_scaled_gradient(self):
        rng = np.random.default_rng(11)
        a = rng.normal(size=(12, 6))
        h = a.T @ a  # spectral norm well below 100
        h *= 10.0 / np.linalg.eigvalsh(h)[-1]
        b = rng.normal(size=6)
        lam = 1e8
        delta = solve_step(damp(h, lam, "levenberg"), b)
        ref = b / lam
        assert np.linalg.norm(delta - ref) <= 1e-6 * np.linalg.norm(ref)

    def test_singular_system_raises(self):
        h = np.zeros((6, 6))
        h[0, 0] = 1.0
        with pytest.raises(DegenerateSystemError):
            solve_step(h, np.ones(6))

    def test_marquardt_damping_is_scale_invariant(self):
        # Rescaling Jacobian column k by s rescales the solved step's
        # component k by 1/s when damping follows the diagonal.
        rng = np.random.default_rng(12)
        jac = rng.normal(size=(25, 2, 6))
        res = rng.normal(size=(25, 2))
        w = rng.uniform(0.2, 1.0, size=25)
        h, b = build_normal_equations(jac, res, w)
        base = solve_step(damp(h, 0.7, "marquardt"), b)
        for s in (0.1, 10.0):
            scales = np.ones(6)
            scales[2] = s
            h2, b2 = build_normal_equations(jac * scales, res, w)
            scaled = solve_step(damp(h2, 0.7, "marquardt"), b2)
            np.testing.assert_allclose(scaled, base / scales, rtol=1e-9)


def _margin_pinned_scenario():
    """All points sit exactly on the u = 2 validity margin of a steep ramp.

    Any candidate that lowers the energy must move some point left past the
    margin, which drops it below min_valid_points = n; any candidate that
    keeps every point valid cannot lower the sum. Every step is therefore
    rejected and the damping factor grows by exactly 4 until the cap.
    """
    g = 10.0
    v, u = np.mgrid[0:64, 0:64].astype(np.float64)
    ref = FeatureMap(np.zeros((64, 64, 1), dtype=np.float32))
    tgt = FeatureMap((g * u)[:, :, None])
    uv = np.stack([np.full(16, 2.0), np.linspace(6.0, 58.0, 16)], axis=1)
    depths = np.full(16, 2.0)
    return ref, tgt, uv, depths


class TestAlignLevelSchedule:
    def test_forced_failure_quadruples_lambda_until_cap(self):
        ref, tgt, uv, depths = _margin_pinned_scenario()
        config = LMConfig(damping="levenberg", min_valid_points=len(uv))
        pose, stats = align_level(ref, tgt, uv, depths, SE3Pose.identity(), _K64(), config)

        assert stats.termination == "lambda_cap"
        assert stats.accepted == 0
        assert stats.rejected == stats.iterations
        # 0.1 * 4^k first exceeds 1e8 at k = 15.
        assert stats.iterations == 15
        for rec in stats.trace:
            assert not rec.accepted
            assert rec.lam_after == pytest.approx(rec.lam_before * 4.0, rel=0)
        np.testing.assert_array_equal(pose.rotation, np.eye(3))
        np.testing.assert_array_equal(pose.translation, np.zeros(3))

    def test_forced_success_halves_lambda_each_iteration(self):
        ref, tgt = _ramp_pair()
        rng = np.random.default_rng(13)
        uv, depths = _grid_points(rng, n=32, lo=12.0, hi=52.0)
        init = se3_exp(np.array([0.02, -0.015, 0.01, 0.0, 0.0, 0.0]))
        config = LMConfig(damping="levenberg")
        pose, stats = align_level(ref, tgt, uv, depths, init, _K64(), config)

        assert stats.termination == "step_norm"
        assert stats.rejected == 0
        assert stats.accepted >= 2
        for rec in stats.trace:
            if rec.accepted:
                assert rec.lam_after == pytest.approx(rec.lam_before * 0.5, rel=0)
        # The ramp pair's energy minimum is the identity pose.
        assert np.abs(pose.translation).max() < 1e-6

    def test_already_converged_returns_immediately(self):
        ref, tgt = _ramp_pair()
        rng = np.random.default_rng(14)
        uv, depths = _grid_points(rng, n=20, lo=12.0, hi=52.0)
        config = LMConfig()
        pose, stats = align_level(ref, tgt, uv, depths, SE3Pose.identity(), _K64(), config)

        assert stats.initial_energy < 1e-12
        assert stats.iterations <= 2
        assert stats.termination == "step_norm"
        np.testing.assert_allclose(pose.translation, np.zeros(3), atol=1e-9)
        assert np.abs(pose.rotation - np.eye(3)).max() < 1e-9

    def test_insufficient_overlap_skips_level(self):
        rng = np.random.default_rng(15)
        fmap = FeatureMap(rng.uniform(size=(64, 64, 1)).astype(np.float32))
        uv, depths = _grid_points(rng, n=10)
        pose = SE3Pose(np.eye(3), np.array([100.0, 0.0, 0.0]))
        out_pose, stats = align_level(fmap, fmap, uv, depths, pose, _K64(), LMConfig())
        assert stats.skipped_reason is not None
        assert "insufficient overlap" in stats.skipped_reason
        assert stats.iterations == 0
        assert out_pose is pose


class TestCoarseToFine:
    def test_lambda_resets_per_level(self):
        rng = np.random.default_rng(16)
        img = np.cumsum(np.cumsum(rng.normal(size=(64, 64)), axis=0), axis=1)
        pyr = build_baseline_pyramid(img)
        points = SparsePointSet(
            uv=rng.uniform(16, 48, size=(24, 2)), depths=rng.uniform(2, 4, size=24)
        )
        k = _K64()
        init = se3_exp(np.array([0.003, -0.002, 0.001, 0.0005, -0.0005, 0.001]))
        result = align_coarse_to_fine(pyr, pyr, points, k, LMConfig(), init)
        ran = [s for s in result.levels if s.skipped_reason is None and s.trace]
        assert len(ran) >= 2
        for stats in ran:
            assert stats.trace[0].lam_before == pytest.approx(0.1)

    def test_skipped_level_passes_pose_through(self):
        rng = np.random.default_rng(17)
        img = np.cumsum(np.cumsum(rng.normal(size=(64, 64)), axis=0), axis=1)
        pyr = build_baseline_pyramid(img)
        # Level-1 coordinates of these points are below the sampling margin,
        # so the coarsest level must be skipped; level 4 still runs.
        points = SparsePointSet(
            uv=rng.uniform(4.0, 7.5, size=(10, 2)), depths=np.full(10, 3.0)
        )
        result = align_coarse_to_fine(
            pyr, pyr, points, _K64(), LMConfig(levels=(1, 4), min_valid_points=8)
        )
        assert result.levels[0].skipped_reason is not None
        assert result.levels[1].skipped_reason is None
        assert result.converged

    def test_all_levels_skipped_reports_failure(self):
        rng = np.random.default_rng(18)
        img = rng.uniform(size=(64, 64))
        pyr = build_baseline_pyramid(img)
        points = SparsePointSet(uv=rng.uniform(16, 48, size=(10, 2)), depths=np.full(10, 3.0))
        pose = SE3Pose(np.eye(3), np.array([200.0, 0.0, 0.0]))
        result = align_coarse_to_fine(pyr, pyr, points, _K64(), LMConfig(), pose)
        assert not result.converged
        assert result.failure_reason is not None
        assert result.total_iterations == 0


class TestConfigAndPoints:
    def test_config_rejects_unknown_damping(self):
        with pytest.raises(AlignmentError):
            LMConfig(damping="cauchy")

    def test_config_from_mapping(self):
        cfg = LMConfig.from_mapping(
            {"lambda_init": "0.5", "damping": "levenberg", "levels": "3 4"}
        )
        assert cfg.lambda_init == 0.5
        assert cfg.levels == (3, 4)
        with pytest.raises(AlignmentError):
            LMConfig.from_mapping({"bogus": "1"})

    def test_point_text_round_trip(self, tmp_path):
        rng = np.random.default_rng(19)
        pts = SparsePointSet(
            uv=rng.uniform(0, 64, size=(12, 2)), depths=rng.uniform(1, 9, size=12)
        )
        path = tmp_path / "points.txt"
        save_points_text(str(path), pts)
        back = load_points_text(str(path))
        assert np.array_equal(back.uv, pts.uv)
        assert np.array_equal(back.depths, pts.depths)

    def test_point_file_rejects_bad_rows(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("1.0 2.0\n")
        with pytest.raises(PointFileError):
            load_points_text(str(path))

    def test_point_set_rejects_nonpositive_depth(self):
        with pytest.raises(AlignmentError):
            SparsePointSet(uv=np.zeros((2, 2)), depths=np.array([1.0, 0.0]))
