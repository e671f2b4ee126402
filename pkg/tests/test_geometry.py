import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynsplat import geometry as geo


def random_quat(rng):
    q = rng.standard_normal(4)
    return geo.quat_normalize(q)


def finite_diff(f, x, eps=1e-6):
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f(x)
        flat[i] = old - eps
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * eps)
    return g


class TestBuildCovariance:
    def test_identity(self):
        cov = geo.build_covariance(np.array([1.0, 0, 0, 0]), np.ones(3))
        assert np.allclose(cov, np.eye(3))

    def test_axis_aligned(self):
        cov = geo.build_covariance(np.array([1.0, 0, 0, 0]), np.array([2.0, 1.0, 1.0]))
        assert np.allclose(cov, np.diag([4.0, 1.0, 1.0]))

    def test_rotated_90_about_z(self):
        # hand computation: R diag(4,1,1) R^T with R = Rz(90deg)
        q = np.array([np.cos(np.pi / 4), 0.0, 0.0, np.sin(np.pi / 4)])
        R = geo.rotation_z(np.pi / 2)
        expected = R @ np.diag([4.0, 1.0, 1.0]) @ R.T
        cov = geo.build_covariance(q, np.array([2.0, 1.0, 1.0]))
        assert np.allclose(cov, expected)
        assert np.allclose(cov, np.diag([1.0, 4.0, 1.0]), atol=1e-12)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=50, deadline=None)
    def test_symmetric_psd_with_scale_eigenvalues(self, seed):
        rng = np.random.default_rng(seed)
        q = random_quat(rng)
        a = np.exp(rng.uniform(-2, 2, 3))
        cov = geo.build_covariance(q, a)
        assert np.allclose(cov, cov.T)
        ev = np.sort(np.linalg.eigvalsh(cov))
        assert np.allclose(ev, np.sort(a**2), rtol=1e-9, atol=1e-12)

    def test_batched(self):
        rng = np.random.default_rng(0)
        q = geo.quat_normalize(rng.standard_normal((5, 4)))
        a = np.exp(rng.uniform(-1, 1, (5, 3)))
        covs = geo.build_covariance(q, a)
        for i in range(5):
            assert np.allclose(covs[i], geo.build_covariance(q[i], a[i]))


class TestEvalGaussian3d:
    def test_at_mean(self):
        assert geo.eval_gaussian3d(np.zeros(3), np.eye(3), np.zeros(3)) == 1.0

    def test_unit_mahalanobis(self):
        v = geo.eval_gaussian3d(np.zeros(3), np.eye(3), np.array([1.0, 0, 0]))
        assert np.isclose(v, np.exp(-0.5))

    def test_anisotropic_via_build_covariance(self):
        cov = geo.build_covariance(np.array([1.0, 0, 0, 0]), np.array([2.0, 1.0, 1.0]))
        v = geo.eval_gaussian3d(np.zeros(3), cov, np.array([2.0, 0, 0]))
        assert np.isclose(v, np.exp(-0.5))

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_rigid_invariance(self, seed):
        rng = np.random.default_rng(seed)
        mu = rng.standard_normal(3)
        cov = geo.build_covariance(random_quat(rng), np.exp(rng.uniform(-1, 1, 3)))
        x = rng.standard_normal(3)
        T = geo.RigidTransform(geo.quat_to_rotmat(random_quat(rng)), rng.standard_normal(3))
        v0 = geo.eval_gaussian3d(mu, cov, x)
        v1 = geo.eval_gaussian3d(
            T.apply(mu), T.rotation @ cov @ T.rotation.T, T.apply(x)
        )
        assert np.isclose(v0, v1, rtol=1e-9)


class TestContractSpace:
    def test_inside_unit_ball(self):
        x = np.array([0.5, 0.0, 0.0])
        for norm in ("infinity", "frobenius"):
            assert np.allclose(geo.contract_space(x, norm), x)

    def test_far_point_frobenius(self):
        y = geo.contract_space(np.array([10.0, 0.0, 0.0]), "frobenius")
        assert np.allclose(y, [1.9, 0.0, 0.0])

    def test_infinity_norm(self):
        y = geo.contract_space(np.array([3.0, 3.0, 0.0]), "infinity")
        assert np.isclose(np.max(np.abs(y)), 2.0 - 1.0 / 3.0)

    def test_zero_maps_to_zero(self):
        assert np.allclose(geo.contract_space(np.zeros(3), "frobenius"), 0.0)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=50, deadline=None)
    def test_continuity_and_bound(self, seed):
        rng = np.random.default_rng(seed)
        d = rng.standard_normal(3)
        for norm in ("infinity", "frobenius"):
            r = np.max(np.abs(d)) if norm == "infinity" else np.linalg.norm(d)
            u = d / r
            lo = geo.contract_space(u * (1 - 1e-10), norm)
            hi = geo.contract_space(u * (1 + 1e-10), norm)
            assert np.allclose(lo, hi, atol=1e-9)
            far = geo.contract_space(u * rng.uniform(1, 1e6), norm)
            rf = np.max(np.abs(far)) if norm == "infinity" else np.linalg.norm(far)
            assert rf < 2.0

    @pytest.mark.parametrize("norm", ["infinity", "frobenius"])
    def test_backward_matches_fd(self, norm):
        rng = np.random.default_rng(3)
        for _ in range(20):
            x = rng.uniform(-3, 3, 3)
            # keep away from the unit shell and from infinity-norm ties
            if abs((np.max(np.abs(x)) if norm == "infinity" else np.linalg.norm(x)) - 1) < 0.05:
                continue
            if norm == "infinity":
                s = np.sort(np.abs(x))
                if s[2] - s[1] < 0.05:
                    continue
            g_up = rng.standard_normal(3)
            got = geo.contract_space_backward(x, norm, g_up)
            want = finite_diff(lambda v: float(geo.contract_space(v, norm) @ g_up), x)
            assert np.allclose(got, want, rtol=1e-5, atol=1e-8)


class TestPoseInterpolation:
    def _track(self):
        times = np.array([0.0, 1.0])
        quats = np.stack([np.array([1.0, 0, 0, 0]), geo.rotmat_to_quat(geo.rotation_z(np.pi / 2))])
        trans = np.array([[0.0, 0, 0], [2.0, 0, 0]])
        return times, quats, trans

    def test_exact_at_keyframes(self):
        times, quats, trans = self._track()
        p = geo.interpolate_pose_track(times, quats, trans, 1.0)
        assert np.allclose(p.rotation, geo.rotation_z(np.pi / 2))
        assert np.allclose(p.translation, [2.0, 0, 0])

    def test_translation_midpoint(self):
        times, quats, trans = self._track()
        p = geo.interpolate_pose_track(times, quats, trans, 0.5)
        assert np.allclose(p.translation, [1.0, 0, 0])

    def test_rotation_geodesic_midpoint(self):
        times, quats, trans = self._track()
        p = geo.interpolate_pose_track(times, quats, trans, 0.5)
        assert np.allclose(p.rotation, geo.rotation_z(np.pi / 4), atol=1e-12)

    def test_clamping(self):
        times, quats, trans = self._track()
        lo = geo.interpolate_pose_track(times, quats, trans, -5.0)
        hi = geo.interpolate_pose_track(times, quats, trans, 7.0)
        assert np.allclose(lo.translation, [0, 0, 0])
        assert np.allclose(hi.translation, [2, 0, 0])

    def test_empty_track_error(self):
        with pytest.raises(ValueError, match="empty object track"):
            geo.track_bracket(np.array([]), 0.0)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_interpolated_rotations_valid(self, seed):
        rng = np.random.default_rng(seed)
        n = rng.integers(2, 6)
        times = np.sort(rng.uniform(0, 10, n))
        times += np.arange(n) * 1e-3  # strictly increasing
        quats = geo.quat_normalize(rng.standard_normal((n, 4)))
        trans = rng.standard_normal((n, 3))
        t = rng.uniform(-1, 11)
        p = geo.interpolate_pose_track(times, quats, trans, t)
        assert p.is_valid(tol=1e-9)


class TestResiduals:
    def test_zero_residual_is_identity(self):
        base = geo.RigidTransform(geo.rotation_z(0.3), np.array([1.0, 2.0, 3.0]))
        for kind in (geo.SE3, geo.SE2_UPRIGHT):
            out = geo.apply_residual(base, geo.TangentResidual.zero(kind))
            assert out.rotation is base.rotation and out.translation is base.translation

    def test_se3_pure_translation_in_parent_frame(self):
        base = geo.RigidTransform(geo.rotation_z(1.0), np.array([5.0, 0.0, 0.0]))
        r = geo.TangentResidual(geo.SE3, np.array([0.1, 0, 0, 0, 0, 0]))
        out = geo.apply_residual(base, r)
        assert np.allclose(out.translation, [5.1, 0, 0])
        assert np.allclose(out.rotation, base.rotation)

    def test_se2_yaw_on_identity(self):
        r = geo.TangentResidual(geo.SE2_UPRIGHT, np.array([0.0, 0.0, np.pi / 2]))
        out = geo.apply_residual(geo.RigidTransform.identity(), r)
        assert np.allclose(out.rotation, geo.rotation_z(np.pi / 2))
        # roll/pitch extraction: body z stays world z
        assert np.allclose(out.rotation @ np.array([0, 0, 1.0]), [0, 0, 1.0])

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_se2_preserves_tilt(self, seed):
        rng = np.random.default_rng(seed)
        base = geo.RigidTransform(geo.quat_to_rotmat(geo.quat_normalize(rng.standard_normal(4))), rng.standard_normal(3))
        r = geo.TangentResidual(geo.SE2_UPRIGHT, rng.uniform(-1, 1, 3))
        out = geo.apply_residual(base, r)
        tilt_before = base.rotation[2, 2]  # cos(angle between body z and parent z)
        tilt_after = out.rotation[2, 2]
        assert np.isclose(tilt_before, tilt_after, atol=1e-12)

    @pytest.mark.parametrize("kind", [geo.SE3, geo.SE2_UPRIGHT])
    def test_residual_backward_matches_fd(self, kind):
        rng = np.random.default_rng(7)
        base = geo.RigidTransform(geo.quat_to_rotmat(random_quat(rng)), rng.standard_normal(3))
        vals = rng.uniform(-0.3, 0.3, 6 if kind == geo.SE3 else 3)
        gR = rng.standard_normal((3, 3))
        gt = rng.standard_normal(3)

        def loss(v):
            p = geo.apply_residual(base, geo.TangentResidual(kind, v))
            return float(np.sum(p.rotation * gR) + p.translation @ gt)

        got = geo.residual_backward(geo.TangentResidual(kind, vals), base, gR, gt)
        want = finite_diff(loss, vals)
        assert np.allclose(got, want, rtol=1e-6, atol=1e-9)


class TestComposeBackward:
    def test_matches_fd_in_entries(self):
        rng = np.random.default_rng(11)
        A = geo.RigidTransform(geo.quat_to_rotmat(random_quat(rng)), rng.standard_normal(3))
        B = geo.RigidTransform(geo.quat_to_rotmat(random_quat(rng)), rng.standard_normal(3))
        gR = rng.standard_normal((3, 3))
        gt = rng.standard_normal(3)
        (gRA, gtA), (gRB, gtB) = geo.compose_backward(A, B, gR, gt)

        def loss_from(A_, B_):
            F = A_ @ B_
            return float(np.sum(F.rotation * gR) + F.translation @ gt)

        wantRA = finite_diff(lambda m: loss_from(geo.RigidTransform(m, A.translation), B), A.rotation.copy())
        wanttA = finite_diff(lambda v: loss_from(geo.RigidTransform(A.rotation, v), B), A.translation.copy())
        wantRB = finite_diff(lambda m: loss_from(A, geo.RigidTransform(m, B.translation)), B.rotation.copy())
        wanttB = finite_diff(lambda v: loss_from(A, geo.RigidTransform(B.rotation, v)), B.translation.copy())
        assert np.allclose(gRA, wantRA, rtol=1e-6, atol=1e-9)
        assert np.allclose(gtA, wanttA, rtol=1e-6, atol=1e-9)
        assert np.allclose(gRB, wantRB, rtol=1e-6, atol=1e-9)
        assert np.allclose(gtB, wanttB, rtol=1e-6, atol=1e-9)


class TestQuatBackward:
    def test_rotmat_backward_matches_fd(self):
        rng = np.random.default_rng(5)
        q = random_quat(rng)
        gR = rng.standard_normal((3, 3))
        got = geo.quat_to_rotmat_backward(q, gR)
        want = finite_diff(lambda v: float(np.sum(geo.quat_to_rotmat(v) * gR)), q.copy())
        assert np.allclose(got, want, rtol=1e-6, atol=1e-9)

    def test_normalize_backward_matches_fd(self):
        rng = np.random.default_rng(6)
        q = rng.standard_normal(4) * 2.0
        gu = rng.standard_normal(4)
        got = geo.quat_normalize_backward(q, gu)
        want = finite_diff(lambda v: float(geo.quat_normalize(v) @ gu), q.copy())
        assert np.allclose(got, want, rtol=1e-6, atol=1e-9)

    def test_roundtrip(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            q = random_quat(rng)
            if q[0] < 0:
                q = -q
            R = geo.quat_to_rotmat(q)
            assert np.allclose(geo.rotmat_to_quat(R), q, atol=1e-9)
