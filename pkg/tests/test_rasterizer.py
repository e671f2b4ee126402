import numpy as np
import pytest

from dynsplat import geometry as geo
from dynsplat import rasterizer as ras
from dynsplat.scenegraph import CameraIntrinsics
from fd import assert_grads_close, finite_diff


def identity_cam():
    return geo.RigidTransform.identity()


def intr16():
    return CameraIntrinsics(20.0, 20.0, 8.0, 8.0, 16, 16)


def make_scene(rng, n=8, dtype=np.float64):
    """Random Gaussians safely inside a 16x16 view with well-separated depths."""
    means = np.stack([
        rng.uniform(-0.8, 0.8, n),
        rng.uniform(-0.8, 0.8, n),
        np.linspace(3.0, 8.0, n) + rng.uniform(-0.1, 0.1, n),
    ], axis=1).astype(dtype)
    quats = geo.quat_normalize(rng.standard_normal((n, 4))).astype(dtype)
    scales = np.exp(rng.uniform(-1.2, -0.4, (n, 3))).astype(dtype)
    covs = geo.build_covariance(quats, scales).astype(dtype)
    colors = rng.uniform(0.05, 0.95, (n, 3)).astype(dtype)
    opac = rng.uniform(0.3, 0.8, n).astype(dtype)
    return means, covs, colors, opac


def fake_proj(means2d, conic, comp, depth, radius, dtype=np.float64):
    m = len(means2d)
    return {
        "index": np.arange(m),
        "means2d": np.asarray(means2d, dtype=dtype),
        "conic": np.asarray(conic, dtype=dtype),
        "comp": np.asarray(comp, dtype=dtype),
        "depth": np.asarray(depth, dtype=dtype),
        "radius": np.asarray(radius, dtype=dtype),
        "valid": np.ones(m, bool),
        "radius_full": np.asarray(radius, dtype=dtype),
    }


def composite_reference(proj, colors, opacities, width, height):
    """Scalar brute-force evaluation of the compositing series, pixel by pixel."""
    color = np.zeros((height, width, 3))
    depth_num = np.zeros((height, width))
    alpha = np.zeros((height, width))
    order = np.lexsort((np.arange(len(proj["depth"])), proj["depth"]))
    for iy in range(height):
        for ix in range(width):
            p = np.array([ix + 0.5, iy + 0.5])
            T = 1.0
            for k in order:
                if T < ras.TRANSMITTANCE_EPS:
                    break
                d = p - proj["means2d"][k]
                A, B, C = proj["conic"][k]
                w = opacities[k] * proj["comp"][k] * np.exp(
                    -0.5 * (A * d[0] ** 2 + C * d[1] ** 2) - B * d[0] * d[1]
                )
                color[iy, ix] += colors[k] * w * T
                depth_num[iy, ix] += proj["depth"][k] * w * T
                alpha[iy, ix] += w * T
                T *= 1.0 - w
    with np.errstate(divide="ignore", invalid="ignore"):
        depth = np.where(alpha >= ras.ALPHA_DEPTH_EPS, depth_num / alpha, np.inf)
    return np.clip(color, 0, 1), depth, alpha


class TestProjection:
    def test_on_axis_projects_to_principal_point(self):
        means = np.array([[0.0, 0.0, 20.0]])
        covs = np.eye(3)[None] * 0.04
        proj = ras.project_gaussians(means, covs, identity_cam(), intr16())
        assert np.allclose(proj["means2d"][0], [8.0, 8.0])

    def test_isotropic_screen_covariance(self):
        sigma, z = 0.5, 10.0
        means = np.array([[0.0, 0.0, z]])
        covs = np.eye(3)[None] * sigma**2
        proj = ras.project_gaussians(means, covs, identity_cam(), intr16())
        expected = (20.0 * sigma / z) ** 2
        assert np.allclose(proj["cov2d"][0], expected * np.eye(2), rtol=1e-12)

    def test_near_plane_cull(self):
        means = np.array([[0.0, 0.0, 0.5]])
        covs = np.eye(3)[None] * 0.01
        proj = ras.project_gaussians(means, covs, identity_cam(), intr16(), near=1.0)
        assert len(proj["index"]) == 0
        assert not proj["valid"][0]

    def test_off_screen_cull(self):
        means = np.array([[50.0, 0.0, 5.0]])
        covs = np.eye(3)[None] * 0.01
        proj = ras.project_gaussians(means, covs, identity_cam(), intr16())
        assert len(proj["index"]) == 0


class TestCompensation:
    def test_zero_covariance_vanishes(self):
        assert ras.compensation_factor(np.zeros((2, 2))) == 0.0

    def test_large_isotropic(self):
        got = ras.compensation_factor(100.0 * np.eye(2), blur=0.3)
        assert np.isclose(got, 100.0 / 100.3)

    def test_no_dilation_limit(self):
        got = ras.compensation_factor(4.0 * np.eye(2), blur=1e-12)
        assert np.isclose(got, 1.0, atol=1e-9)


class TestForward:
    def test_opaque_singleton_center_pixel(self):
        # one huge Gaussian centered exactly on a pixel, opacity 1, no blur: w = 1 there
        proj = fake_proj([[8.5, 8.5]], [[1e-8, 0.0, 1e-8]], [1.0], [5.0], [100.0])
        colors = np.array([[0.2, 0.6, 0.9]])
        buf, _ = ras.rasterize_forward(proj, colors, np.array([1.0]), 16, 16)
        assert np.allclose(buf.color[8, 8], colors[0])
        assert np.isclose(buf.alpha[8, 8], 1.0)
        assert np.isclose(buf.depth[8, 8], 5.0)

    def test_occlusion(self):
        proj = fake_proj(
            [[8.5, 8.5], [8.5, 8.5]], [[1e-8, 0, 1e-8]] * 2, [1.0, 1.0], [2.0, 6.0], [100.0] * 2
        )
        colors = np.array([[1.0, 0, 0], [0, 1.0, 0]])
        buf, _ = ras.rasterize_forward(proj, colors, np.array([1.0, 0.9]), 16, 16)
        assert np.allclose(buf.color[8, 8], [1.0, 0, 0])

    def test_three_fragment_series(self):
        proj = fake_proj(
            [[8.5, 8.5]] * 3, [[1e-8, 0, 1e-8]] * 3, [1.0] * 3, [2.0, 3.0, 4.0], [100.0] * 3
        )
        colors = np.array([[1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0]])
        buf, _ = ras.rasterize_forward(proj, colors, np.full(3, 0.5), 16, 16)
        assert np.allclose(buf.color[8, 8], [0.5, 0.25, 0.125])
        assert np.isclose(buf.alpha[8, 8], 0.875)

    def test_empty_scene(self):
        proj = fake_proj(np.zeros((0, 2)), np.zeros((0, 3)), np.zeros(0), np.zeros(0), np.zeros(0))
        buf, _ = ras.rasterize_forward(proj, np.zeros((0, 3)), np.zeros(0), 16, 16)
        assert np.all(buf.color == 0) and np.all(buf.alpha == 0) and np.all(np.isinf(buf.depth))

    def test_matches_bruteforce_oracle(self):
        rng = np.random.default_rng(0)
        for trial in range(5):
            n = rng.integers(2, 9)
            means2d = rng.uniform(0, 16, (n, 2))
            diag = rng.uniform(0.05, 0.5, (n, 2))
            off = rng.uniform(-0.05, 0.05, n)
            conic = np.stack([diag[:, 0], off, diag[:, 1]], axis=1)
            comp = rng.uniform(0.5, 1.0, n)
            depth = rng.uniform(1, 10, n)
            proj = fake_proj(means2d, conic, comp, depth, np.full(n, 50.0))
            colors = rng.uniform(0, 1, (n, 3))
            opac = rng.uniform(0.1, 0.95, n)
            buf, _ = ras.rasterize_forward(proj, colors, opac, 16, 16)
            ref_c, ref_d, ref_a = composite_reference(proj, colors, opac, 16, 16)
            assert np.max(np.abs(buf.color - ref_c)) < 1e-6
            assert np.max(np.abs(buf.alpha - ref_a)) < 1e-6
            finite = np.isfinite(ref_d)
            assert np.array_equal(finite, np.isfinite(buf.depth))
            assert np.max(np.abs(buf.depth[finite] - ref_d[finite])) < 1e-6

    def test_weight_sums_bounded(self):
        rng = np.random.default_rng(1)
        n = 30
        proj = fake_proj(
            rng.uniform(0, 32, (n, 2)),
            np.stack([rng.uniform(0.02, 1, n), np.zeros(n), rng.uniform(0.02, 1, n)], 1),
            rng.uniform(0.3, 1.0, n), rng.uniform(1, 5, n), np.full(n, 60.0),
        )
        buf, _ = ras.rasterize_forward(proj, rng.uniform(0, 1, (n, 3)), rng.uniform(0, 1, n), 32, 32)
        assert np.all(buf.alpha <= 1.0 + 1e-12) and np.all(buf.alpha >= 0.0)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(2)
        means, covs, colors, opac = make_scene(rng)
        proj = ras.project_gaussians(means, covs, identity_cam(), intr16())
        buf1, _ = ras.rasterize_forward(proj, colors, opac, 16, 16)
        perm = rng.permutation(len(means))
        proj2 = ras.project_gaussians(means[perm], covs[perm], identity_cam(), intr16())
        buf2, _ = ras.rasterize_forward(proj2, colors[perm], opac[perm], 16, 16)
        assert np.allclose(buf1.color, buf2.color, atol=1e-12)
        assert np.allclose(buf1.alpha, buf2.alpha, atol=1e-12)

    def test_antialiasing_downsample_agreement(self):
        # the compensation factor keeps renderings consistent across sampling rates:
        # a 2x render box-downsampled matches the 1x render on a smooth scene
        rng = np.random.default_rng(12)
        n = 40
        means = np.stack([
            rng.uniform(-1.5, 1.5, n), rng.uniform(-1.5, 1.5, n), rng.uniform(4, 10, n)
        ], 1)
        covs = geo.build_covariance(
            geo.quat_normalize(rng.standard_normal((n, 4))),
            np.exp(rng.uniform(-1.2, -0.2, (n, 3))),
        )
        colors = rng.uniform(0.1, 0.9, (n, 3))
        opac = rng.uniform(0.3, 0.9, n)
        intr1 = CameraIntrinsics(40.0, 40.0, 16.0, 16.0, 32, 32)
        intr2 = CameraIntrinsics(80.0, 80.0, 32.0, 32.0, 64, 64)
        proj1 = ras.project_gaussians(means, covs, identity_cam(), intr1)
        buf1, _ = ras.rasterize_forward(proj1, colors, opac, 32, 32)
        proj2 = ras.project_gaussians(means, covs, identity_cam(), intr2)
        buf2, _ = ras.rasterize_forward(proj2, colors, opac, 64, 64)
        down = buf2.color.reshape(32, 2, 32, 2, 3).mean(axis=(1, 3))
        mae = float(np.mean(np.abs(down - buf1.color)))
        assert mae < 0.02, mae

    def test_thread_count_determinism(self):
        rng = np.random.default_rng(3)
        n = 100
        means = np.stack([
            rng.uniform(-2, 2, n), rng.uniform(-2, 2, n), rng.uniform(3, 12, n)
        ], 1)
        covs = geo.build_covariance(
            geo.quat_normalize(rng.standard_normal((n, 4))), np.exp(rng.uniform(-1.5, 0, (n, 3)))
        )
        colors = rng.uniform(0, 1, (n, 3))
        opac = rng.uniform(0.2, 0.9, n)
        intr = CameraIntrinsics(40.0, 40.0, 24.0, 24.0, 48, 48)
        outs = []
        for threads in (1, 4, 8):
            proj = ras.project_gaussians(means, covs, identity_cam(), intr)
            buf, _ = ras.rasterize_forward(proj, colors, opac, 48, 48, threads=threads)
            outs.append(buf)
        for buf in outs[1:]:
            assert np.array_equal(outs[0].color, buf.color)
            assert np.array_equal(outs[0].depth, buf.depth)
            assert np.array_equal(outs[0].alpha, buf.alpha)


class TestBackward:
    def _render(self, means, covs, colors, opac, threads=1, cam=None, intr=None):
        proj = ras.project_gaussians(means, covs, cam or identity_cam(), intr or intr16())
        return ras.rasterize_forward(proj, colors, opac, 16, 16, threads=threads)

    def test_zero_upstream_zero_grads(self):
        rng = np.random.default_rng(4)
        means, covs, colors, opac = make_scene(rng)
        _, cache = self._render(means, covs, colors, opac)
        g = ras.rasterize_backward(cache, np.zeros((16, 16, 3)), np.zeros((16, 16)))
        for key in ("means", "covs", "colors", "opacities", "cam_t", "cam_R", "adc_stat"):
            assert np.allclose(g[key], 0.0), key

    def test_missing_cache_raises(self):
        with pytest.raises(ValueError):
            ras.rasterize_backward({}, np.zeros((16, 16, 3)))

    def test_single_gaussian_translation_identity(self):
        # loss = red channel at the center pixel; dL/dt must equal -dL/dmu
        means = np.array([[0.0, 0.0, 5.0]])
        covs = np.eye(3)[None] * 0.1
        colors = np.array([[0.8, 0.2, 0.2]])
        opac = np.array([0.7])
        _, cache = self._render(means, covs, colors, opac)
        up = np.zeros((16, 16, 3))
        up[8, 8, 0] = 1.0
        g = ras.rasterize_backward(cache, up)
        assert np.allclose(g["cam_t"], -g["means"][0])
        assert np.any(g["means"][0] != 0)

    def test_camera_translation_is_negative_mean_grad_sum(self):
        rng = np.random.default_rng(5)
        means, covs, colors, opac = make_scene(rng)
        _, cache = self._render(means, covs, colors, opac)
        g = ras.rasterize_backward(cache, rng.standard_normal((16, 16, 3)))
        assert np.allclose(g["cam_t"], -g["means"].sum(axis=0), rtol=1e-12)

    def test_full_gradcheck_vs_finite_differences(self):
        rng = np.random.default_rng(6)
        means, covs, colors, opac = make_scene(rng)
        up_c = rng.standard_normal((16, 16, 3))
        buf0, cache = self._render(means, covs, colors, opac)
        up_d = np.where(buf0.alpha > 0.05, rng.standard_normal((16, 16)), 0.0)

        def loss():
            buf, _ = self._render(means, covs, colors, opac)
            d = np.where(np.isfinite(buf.depth), buf.depth, 0.0)
            return float(np.sum(buf.color * up_c) + np.sum(d * up_d))

        g = ras.rasterize_backward(cache, up_c, up_d)
        assert_grads_close(g["means"], finite_diff(loss, means, eps=1e-5), label="means")
        assert_grads_close(g["colors"], finite_diff(loss, colors, eps=1e-5), label="colors")
        assert_grads_close(g["opacities"], finite_diff(loss, opac, eps=1e-6), label="opacities")
        assert_grads_close(g["covs"], finite_diff(loss, covs, eps=1e-6), label="covs")

    def test_camera_pose_gradients_vs_fd_isotropic_scene(self):
        # isotropic covariances and fixed colors: the positional-gradient camera
        # formula is exact, so finite differences over the pose must agree
        rng = np.random.default_rng(7)
        n = 6
        means = np.stack([
            rng.uniform(-0.6, 0.6, n), rng.uniform(-0.6, 0.6, n), np.linspace(4, 9, n)
        ], 1)
        covs = np.einsum("n,ij->nij", np.exp(rng.uniform(-2, -1, n)), np.eye(3))
        colors = rng.uniform(0.1, 0.9, (n, 3))
        opac = rng.uniform(0.3, 0.7, n)
        up_c = rng.standard_normal((16, 16, 3))
        R0 = geo.quat_to_rotmat(geo.quat_normalize(np.array([0.99, 0.02, -0.03, 0.01])))
        t0 = np.array([0.05, -0.04, 0.1])

        def loss_at(delta, rho):
            cam = geo.RigidTransform(geo.so3_exp(delta) @ R0, t0 + rho)
            proj = ras.project_gaussians(means, covs, cam, intr16())
            buf, _ = ras.rasterize_forward(proj, colors, opac, 16, 16)
            return float(np.sum(buf.color * up_c))

        cam = geo.RigidTransform(R0, t0)
        proj = ras.project_gaussians(means, covs, cam, intr16())
        _, cache = ras.rasterize_forward(proj, colors, opac, 16, 16)
        g = ras.rasterize_backward(cache, up_c)

        rho = np.zeros(3)
        fd_t = finite_diff(lambda: loss_at(np.zeros(3), rho), rho, eps=1e-5)
        assert_grads_close(g["cam_t"], fd_t, label="camera translation")

        delta = np.zeros(3)
        fd_r = finite_diff(lambda: loss_at(delta, np.zeros(3)), delta, eps=1e-6)
        tangent = geo.antivee(g["cam_R"] @ R0.T)
        assert_grads_close(tangent, fd_r, label="camera rotation")

    def test_adc_stat_positive_when_visible(self):
        rng = np.random.default_rng(8)
        means, covs, colors, opac = make_scene(rng)
        _, cache = self._render(means, covs, colors, opac)
        g = ras.rasterize_backward(cache, rng.standard_normal((16, 16, 3)))
        assert np.all(g["adc_stat"][g["visible"]] > 0)
        assert np.all(g["adc_stat"] >= 0)

    def test_numba_and_numpy_backends_agree(self, monkeypatch):
        rng = np.random.default_rng(10)
        means, covs, colors, opac = make_scene(rng, n=12)
        up_c = rng.standard_normal((16, 16, 3))
        outs = []
        for disable in ("", "1"):
            monkeypatch.setenv("DYNSPLAT_NO_NUMBA", disable)
            _, cache = self._render(means, covs, colors, opac)
            buf, cache = ras.rasterize_forward(
                cache["proj"], colors, opac, 16, 16
            )
            g = ras.rasterize_backward(cache, up_c)
            outs.append((buf, g))
        a, b = outs
        assert np.allclose(a[0].color, b[0].color, atol=1e-9)
        assert np.allclose(a[0].alpha, b[0].alpha, atol=1e-9)
        for key in ("means", "covs", "colors", "opacities", "adc_stat"):
            assert np.allclose(a[1][key], b[1][key], rtol=1e-7, atol=1e-10), key

    def test_threaded_backward_deterministic(self):
        rng = np.random.default_rng(9)
        means, covs, colors, opac = make_scene(rng, n=20)
        up = rng.standard_normal((16, 16, 3))
        grads = []
        for threads in (1, 4):
            _, cache = self._render(means, covs, colors, opac, threads=threads)
            g = ras.rasterize_backward(cache, up, threads=threads)
            grads.append(g)
        for key in ("means", "covs", "colors", "opacities", "adc_stat"):
            assert np.array_equal(grads[0][key], grads[1][key]), key
