import numpy as np
import pytest

from dynsplat import geometry as geo
from dynsplat.scenegraph import (
    CameraIntrinsics,
    CameraNode,
    ObjectNode,
    SceneGraph,
    SequenceNode,
    encode_time,
    scatter_bracket,
)


def make_graph(freqs=6):
    dim = 1 + 2 * freqs
    seq = SequenceNode(
        sequence_id="seq_a",
        appearance=np.zeros((32, dim)),
        geometry_mod=np.zeros((32, dim)),
        ego_times=np.array([0.0, 1.0]),
        ego_quats=np.array([[1.0, 0, 0, 0], [1.0, 0, 0, 0]]),
        ego_trans=np.array([[0.0, 0, 0], [0.0, 0, 0]]),
    )
    seq.cameras["cam0"] = CameraNode(
        "cam0", CameraIntrinsics(50.0, 50.0, 32.0, 32.0, 64, 64), geo.RigidTransform.identity()
    )
    seq.objects["obj0"] = ObjectNode(
        object_id="obj0",
        code=7,
        rigid=True,
        dims=np.array([1.0, 1.0, 1.0]),
        track_times=np.array([0.0, 1.0]),
        track_quats=np.array([[1.0, 0, 0, 0], [1.0, 0, 0, 0]]),
        track_trans=np.array([[1.0, 0, 0], [1.0, 0, 0]]),
        sequence_id="seq_a",
    )
    g = SceneGraph(time_freqs=freqs)
    g.sequences["seq_a"] = seq
    return g


class TestEncodeTime:
    def test_t0_f6(self):
        v = encode_time(0.0, 6)
        assert v.shape == (13,)
        assert np.allclose(v, [0, 0, 1, 0, 1, 0, 1, 0, 1, 0, 1, 0, 1])

    def test_t1_f1(self):
        v = encode_time(1.0, 1)
        assert np.allclose(v, [1.0, np.sin(np.pi), np.cos(np.pi)], atol=1e-12)
        assert np.isclose(v[2], -1.0)

    def test_scalar_oracle(self):
        t, F = 0.25, 2
        v = encode_time(t, F)
        expect = [t]
        for f in range(F):
            expect += [np.sin(2**f * np.pi * t), np.cos(2**f * np.pi * t)]
        assert np.allclose(v, expect)
        assert np.isclose(v[1], np.sin(np.pi / 4))


class TestSequenceLatent:
    def test_zero_matrices(self):
        g = make_graph()
        assert np.allclose(g.sequence_latent("seq_a", 0.37), 0.0)
        assert g.sequence_latent("seq_a", 0.37).shape == (64,)

    def test_raw_t_slot(self):
        g = make_graph()
        seq = g.sequences["seq_a"]
        # A_s picks out only the raw-t component: code = t * first column of A_s
        seq.appearance = np.zeros((32, 13))
        seq.appearance[:, 0] = np.arange(32)
        t = 0.6
        code = g.sequence_latent("seq_a", t)
        assert np.allclose(code[:32], t * np.arange(32))
        assert np.allclose(code[32:], 0.0)

    def test_matrix_vector_oracle(self):
        g = make_graph()
        seq = g.sequences["seq_a"]
        rng = np.random.default_rng(0)
        seq.appearance = rng.standard_normal((32, 13))
        seq.geometry_mod = rng.standard_normal((32, 13))
        t = -0.3
        gam = encode_time(t, 6)
        code = g.sequence_latent("seq_a", t)
        assert np.allclose(code, np.concatenate([seq.appearance @ gam, seq.geometry_mod @ gam]))

    def test_distinct_times_distinct_codes(self):
        g = make_graph()
        rng = np.random.default_rng(1)
        g.sequences["seq_a"].appearance = rng.standard_normal((32, 13))
        c1 = g.sequence_latent("seq_a", 0.1)
        c2 = g.sequence_latent("seq_a", 0.2)
        assert not np.allclose(c1, c2)

    def test_pure_and_deterministic(self):
        g = make_graph()
        rng = np.random.default_rng(2)
        g.sequences["seq_a"].appearance = rng.standard_normal((32, 13))
        a = g.sequence_latent("seq_a", 0.5)
        b = g.sequence_latent("seq_a", 0.5)
        assert np.array_equal(a, b)

    def test_unknown_sequence(self):
        g = make_graph()
        with pytest.raises(KeyError, match="nope"):
            g.sequence_latent("nope", 0.0)

    def test_backward_outer_products(self):
        g = make_graph()
        rng = np.random.default_rng(3)
        grad = rng.standard_normal(64)
        dA, dG = g.sequence_latent_backward("seq_a", 0.4, grad)
        gam = encode_time(0.4, 6)
        assert np.allclose(dA, np.outer(grad[:32], gam))
        assert np.allclose(dG, np.outer(grad[32:], gam))


class TestObjectLatent:
    def test_code_and_encoding(self):
        g = make_graph()
        code, gam = g.object_latent("seq_a", "obj0", 0.0)
        assert code == 7
        assert np.allclose(gam, encode_time(0.0, 6))

    def test_same_object_two_times(self):
        g = make_graph()
        c1, g1 = g.object_latent("seq_a", "obj0", 0.0)
        c2, g2 = g.object_latent("seq_a", "obj0", 0.9)
        assert c1 == c2
        assert not np.allclose(g1, g2)

    def test_clamped_to_span(self):
        g = make_graph()
        _, gam = g.object_latent("seq_a", "obj0", 5.0)
        assert np.allclose(gam, encode_time(1.0, 6))


class TestActiveObjects:
    def test_before_all_tracks(self):
        g = make_graph()
        assert g.active_objects("seq_a", -1.0) == []

    def test_inside_span(self):
        g = make_graph()
        out = g.active_objects("seq_a", 0.5)
        assert [n.object_id for n in out] == ["obj0"]

    def test_overlapping_ordered_by_id(self):
        g = make_graph()
        seq = g.sequences["seq_a"]
        seq.objects["obj1"] = ObjectNode(
            "obj1", 8, False, np.ones(3),
            np.array([0.2, 0.8]), np.array([[1.0, 0, 0, 0]] * 2), np.zeros((2, 3)), "seq_a",
        )
        out = g.active_objects("seq_a", 0.5)
        assert [n.object_id for n in out] == ["obj0", "obj1"]


class TestResolve:
    def test_all_identity(self):
        g = make_graph()
        T, _ = g.resolve_world_from_object("seq_a", "obj0", 0.0)
        assert np.allclose(T.translation, [1, 0, 0])

    def test_pure_translations(self):
        g = make_graph()
        g.sequences["seq_a"].ego_trans = np.array([[10.0, 0, 0], [10.0, 0, 0]])
        T, _ = g.resolve_world_from_object("seq_a", "obj0", 0.0)
        assert np.allclose(T.translation, [11, 0, 0])

    def test_rotated_ego(self):
        g = make_graph()
        seq = g.sequences["seq_a"]
        qz = geo.rotmat_to_quat(geo.rotation_z(np.pi / 2))
        seq.ego_quats = np.stack([qz, qz])
        seq.ego_trans = np.array([[5.0, 0, 0], [5.0, 0, 0]])
        T, _ = g.resolve_world_from_object("seq_a", "obj0", 0.0)
        expected = np.array([5.0, 0, 0]) + geo.rotation_z(np.pi / 2) @ np.array([1.0, 0, 0])
        assert np.allclose(T.translation, expected)

    def test_camera_matches_manual_compose(self):
        g = make_graph()
        seq = g.sequences["seq_a"]
        qz = geo.rotmat_to_quat(geo.rotation_z(0.7))
        seq.ego_quats = np.stack([qz, qz])
        seq.ego_trans = np.array([[1.0, 2, 3], [1.0, 2, 3]])
        cam = seq.cameras["cam0"]
        cam.mount = geo.RigidTransform(geo.rotation_z(-0.2), np.array([0.5, 0, 0.1]))
        T, K, _ = g.resolve_camera("seq_a", "cam0", 0.3)
        ego = geo.RigidTransform(geo.rotation_z(0.7), np.array([1.0, 2, 3]))
        manual = ego @ cam.mount
        assert T.allclose(manual)
        assert K.fx == 50.0

    def test_keyframe_equals_direct_composition(self):
        g = make_graph()
        seq = g.sequences["seq_a"]
        rng = np.random.default_rng(4)
        seq.ego_quats = geo.quat_normalize(rng.standard_normal((2, 4)))
        seq.ego_trans = rng.standard_normal((2, 3))
        obj = seq.objects["obj0"]
        obj.track_quats = geo.quat_normalize(rng.standard_normal((2, 4)))
        obj.track_trans = rng.standard_normal((2, 3))
        T, _ = g.resolve_world_from_object("seq_a", "obj0", 1.0)
        ego = geo.RigidTransform(geo.quat_to_rotmat(seq.ego_quats[1]), seq.ego_trans[1])
        xi = geo.RigidTransform(geo.quat_to_rotmat(obj.track_quats[1]), obj.track_trans[1])
        assert T.allclose(ego @ xi)

    def test_unknown_ids(self):
        g = make_graph()
        with pytest.raises(KeyError):
            g.resolve_camera("seq_a", "camX", 0.0)
        with pytest.raises(KeyError):
            g.resolve_world_from_object("seq_a", "objX", 0.0)

    def test_traversal_does_not_mutate(self):
        g = make_graph()
        seq = g.sequences["seq_a"]
        before = (seq.ego_residuals.copy(), seq.objects["obj0"].residuals.copy())
        g.resolve_world_from_object("seq_a", "obj0", 0.4)
        g.resolve_camera("seq_a", "cam0", 0.4)
        assert np.array_equal(seq.ego_residuals, before[0])
        assert np.array_equal(seq.objects["obj0"].residuals, before[1])


class TestPoseChainBackward:
    def finite_diff(self, f, x, eps=1e-6):
        g = np.zeros_like(x)
        for i in range(x.size):
            old = x.flat[i]
            x.flat[i] = old + eps
            fp = f()
            x.flat[i] = old - eps
            fm = f()
            x.flat[i] = old
            g.flat[i] = (fp - fm) / (2 * eps)
        return g

    def test_residual_gradients_match_fd(self):
        g = make_graph()
        seq = g.sequences["seq_a"]
        rng = np.random.default_rng(9)
        seq.ego_residuals = rng.uniform(-0.1, 0.1, (2, 6))
        obj = seq.objects["obj0"]
        obj.residuals = rng.uniform(-0.1, 0.1, (2, 3))
        gR = rng.standard_normal((3, 3))
        gt = rng.standard_normal(3)
        t = 0.3

        def loss():
            T, _ = g.resolve_world_from_object("seq_a", "obj0", t)
            return float(np.sum(T.rotation * gR) + T.translation @ gt)

        _, chain = g.resolve_world_from_object("seq_a", "obj0", t)
        g_parent, g_child = chain.backward(gR, gt)
        ego_grads = np.zeros_like(seq.ego_residuals)
        obj_grads = np.zeros_like(obj.residuals)
        scatter_bracket(ego_grads, chain.parent.bracket, g_parent)
        scatter_bracket(obj_grads, chain.child.bracket, g_child)

        fd_ego = self.finite_diff(loss, seq.ego_residuals)
        fd_obj = self.finite_diff(loss, obj.residuals)
        assert np.allclose(ego_grads, fd_ego, rtol=1e-5, atol=1e-8)
        assert np.allclose(obj_grads, fd_obj, rtol=1e-5, atol=1e-8)
