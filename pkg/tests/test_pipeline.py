import numpy as np
import pytest

from dynsplat import geometry as geo
from dynsplat import pipeline as pl
from dynsplat.model import GaussianSet, inverse_sigmoid
from fd import assert_grads_close, finite_diff, finite_diff_subset, sample_indices
from model_utils import build_model, zero_direction_conditioning


class TestComposeScene:
    def test_static_only_without_active_objects(self):
        rng = np.random.default_rng(0)
        model = build_model(rng, object_specs=[("car", True)])
        pose, intr, _ = model.graph.resolve_camera("seq_a", "cam0", 2.0)  # t outside track
        composed = pl.compose_scene(model, "seq_a", 2.0, pose, intr)
        assert all(g["kind"] == "static" for g in composed.groups)

    def test_attenuation_off_reproduces_base_opacities(self):
        rng = np.random.default_rng(1)
        model = build_model(rng)
        pose, intr, _ = model.graph.resolve_camera("seq_a", "cam0", 0.5)
        composed = pl.compose_scene(model, "seq_a", 0.5, pose, intr, attenuation=False)
        sel = composed.groups[0]["sel"]
        assert np.allclose(composed.opacities, model.static.opacities()[sel])
        composed_on = pl.compose_scene(model, "seq_a", 0.5, pose, intr, attenuation=True)
        assert not np.allclose(composed_on.opacities, composed.opacities)

    def test_rigid_object_identity_chain_keeps_canonical_positions(self):
        rng = np.random.default_rng(2)
        model = build_model(rng, object_specs=[("car", True)])
        node = model.graph.sequences["seq_a"].objects["car"]
        node.track_trans = np.zeros((2, 3))
        pose, intr, _ = model.graph.resolve_camera("seq_a", "cam0", 0.0)
        composed = pl.compose_scene(model, "seq_a", 0.0, pose, intr)
        grp = composed.groups[-1]
        assert grp["kind"] == "object"
        n = grp["count"]
        assert np.allclose(composed.means[-n:], model.objects[("seq_a", "car")].means)

    def test_object_counts(self):
        rng = np.random.default_rng(3)
        model = build_model(rng, object_specs=[("car", True), ("ped", False)], n_obj_prims=4)
        pose, intr, _ = model.graph.resolve_camera("seq_a", "cam0", 0.5)
        composed = pl.compose_scene(model, "seq_a", 0.5, pose, intr)
        n_static = composed.groups[0]["count"]
        assert len(composed) == n_static + 8


class TestRenderView:
    def test_empty_model_black_image(self):
        rng = np.random.default_rng(4)
        model = build_model(rng, n_static=1)
        model.static = GaussianSet.empty(np.float64)
        buf, _ = pl.render_view(model, "seq_a", 0.5, camera="cam0")
        assert np.all(buf.color == 0) and np.all(buf.alpha == 0) and np.all(np.isinf(buf.depth))

    def test_opaque_white_gaussian_fills_view(self):
        rng = np.random.default_rng(5)
        model = build_model(rng, n_static=1)
        model.static.means[0] = [0.0, 0.0, 5.0]
        model.static.log_scales[:] = np.log(2.0)
        model.static.opacity_logits[:] = inverse_sigmoid(0.9999)
        model.fields.static.mlp_color.biases[-1][:] = 30.0  # saturate the color head
        model.fields.static.mlp_atten.biases[-1][:] = 30.0  # attenuation ~ 1
        buf, _ = pl.render_view(model, "seq_a", 0.5, camera="cam0")
        assert np.allclose(buf.color[8, 8], 1.0)

    def test_bit_identical_rerender(self):
        rng = np.random.default_rng(6)
        model = build_model(rng, object_specs=[("car", True)])
        a, _ = pl.render_view(model, "seq_a", 0.4, camera="cam0")
        b, _ = pl.render_view(model, "seq_a", 0.4, camera="cam0")
        assert np.array_equal(a.color, b.color)
        assert np.array_equal(a.depth, b.depth)

    def test_sequence_conditioning_is_only_cross_sequence_difference(self):
        rng = np.random.default_rng(7)
        model = build_model(rng, sequences=("seq_a", "seq_b"))
        sa = model.graph.sequences["seq_a"]
        sb = model.graph.sequences["seq_b"]
        sb.appearance[:] = sa.appearance
        sb.geometry_mod[:] = sa.geometry_mod
        a, _ = pl.render_view(model, "seq_a", 0.3, camera="cam0")
        b, _ = pl.render_view(model, "seq_b", 0.3, camera="cam0")
        assert np.array_equal(a.color, b.color)
        sb.appearance[:] += 0.5
        c, _ = pl.render_view(model, "seq_b", 0.3, camera="cam0")
        assert not np.array_equal(a.color, c.color)

    def test_rigid_appearance_invariant_under_joint_rotation(self):
        rng = np.random.default_rng(8)
        model = build_model(rng, n_static=1, object_specs=[("car", True)], n_obj_prims=4)
        model.static = GaussianSet.empty(np.float64)
        rot = geo.rotation_z(0.7)
        pose0, intr, _ = model.graph.resolve_camera("seq_a", "cam0", 0.0)
        buf0, _ = pl.render_view(model, "seq_a", 0.0, pose=pose0, intr=intr)

        node = model.graph.sequences["seq_a"].objects["car"]
        q = geo.rotmat_to_quat(rot)
        node.track_quats = np.stack([
            geo.quat_multiply(q, node.track_quats[0]),
            geo.quat_multiply(q, node.track_quats[1]),
        ])
        node.track_trans = node.track_trans @ rot.T
        pose1 = geo.RigidTransform(rot @ pose0.rotation, rot @ pose0.translation)
        buf1, _ = pl.render_view(model, "seq_a", 0.0, pose=pose1, intr=intr)
        assert np.allclose(buf0.color, buf1.color, atol=1e-6)

    def test_timing_stages_present(self):
        rng = np.random.default_rng(9)
        model = build_model(rng)
        _, cache = pl.render_view(model, "seq_a", 0.5, camera="cam0")
        assert set(cache["timings"]) == set(pl.STAGES)


class TestRenderBackward:
    def _loss_and_grads(self, model, s, t, up_c, up_d):
        buf, cache = pl.render_view(model, s, t, camera="cam0", need_grad=True)
        grads, aux = pl.render_backward(model, cache, up_c, up_d)
        return buf, grads, aux

    def test_full_model_gradcheck(self):
        rng = np.random.default_rng(10)
        model = build_model(rng, n_static=4, object_specs=[("ped", False)], n_obj_prims=3)
        up_c = rng.standard_normal((16, 16, 3))
        buf0, _ = pl.render_view(model, "seq_a", 0.5, camera="cam0")
        up_d = np.where(buf0.alpha > 0.05, rng.standard_normal((16, 16)), 0.0)

        def loss():
            buf, _ = pl.render_view(model, "seq_a", 0.5, camera="cam0")
            d = np.where(np.isfinite(buf.depth), buf.depth, 0.0)
            return float(np.sum(buf.color * up_c) + np.sum(d * up_d))

        _, grads, _ = self._loss_and_grads(model, "seq_a", 0.5, up_c, up_d)
        params = model.parameters()
        checked = 0
        for name in [
            "static.means", "static.quats", "static.log_scales", "static.opacity_logits",
            "object.seq_a.ped.means", "object.seq_a.ped.quats",
            "object.seq_a.ped.log_scales", "object.seq_a.ped.opacity_logits",
            "phi.table.0", "phi.color.W0", "phi.color.b2", "phi.atten.W1",
            "psi_n.table.0", "psi_n.color.W1", "psi_n.deform.W0",
            "seq.seq_a.appearance", "seq.seq_a.geometry",
        ]:
            arr = params[name]
            idx = sample_indices(rng, arr.size, 24)
            fdg = finite_diff_subset(loss, arr, idx, eps=1e-5)
            assert_grads_close(grads[name].flat[idx], fdg, rtol=2e-3, atol=1e-7, label=name)
            checked += 1
        assert checked == 17

    def test_pose_residual_gradcheck_fixed_colors_isotropic(self):
        rng = np.random.default_rng(11)
        model = build_model(rng, n_static=4, object_specs=[("car", True)],
                            n_obj_prims=3, isotropic=True)
        model.objects[("seq_a", "car")].log_scales[:] = np.log(0.2)
        zero_direction_conditioning(model)
        seq = model.graph.sequences["seq_a"]
        seq.ego_residuals = rng.uniform(-0.02, 0.02, (2, 6))
        seq.cameras["cam0"].residual = rng.uniform(-0.02, 0.02, 6)
        seq.objects["car"].residuals = rng.uniform(-0.02, 0.02, (2, 3))
        up_c = rng.standard_normal((16, 16, 3))

        def loss():
            buf, _ = pl.render_view(model, "seq_a", 0.5, camera="cam0")
            return float(np.sum(buf.color * up_c))

        buf, cache = pl.render_view(model, "seq_a", 0.5, camera="cam0", need_grad=True)
        grads, _ = pl.render_backward(model, cache, up_c)
        params = model.parameters()
        for name in ("pose.cam.seq_a.cam0", "pose.ego.seq_a", "pose.obj.seq_a.car"):
            fdg = finite_diff(loss, params[name], eps=1e-6).reshape(params[name].shape)
            assert_grads_close(grads[name], fdg, rtol=2e-3, atol=1e-7, label=name)

    def test_adc_aux_structure(self):
        rng = np.random.default_rng(12)
        model = build_model(rng, object_specs=[("car", True)])
        up = rng.standard_normal((16, 16, 3))
        _, grads, aux = self._loss_and_grads(model, "seq_a", 0.5, up, np.zeros((16, 16)))
        assert "static" in aux["adc"] and "object.seq_a.car" in aux["adc"]
        st = aux["adc"]["static"]
        assert st["stat"].shape == st["radius"].shape == st["visible"].shape
