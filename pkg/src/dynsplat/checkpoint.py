"""Versioned binary checkpoint container: magic `4DGF`, u32 version, JSON header
with a named-tensor manifest, then raw little-endian array payload. Round trips
reproduce renders bit-identically.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from . import geometry as geo
from .fields import DynamicField, GridConfig, HashGrid, Mlp, StaticField
from .model import FieldBundle, GaussianSet, ModelConfig, SceneModel
from .scenegraph import CameraIntrinsics, CameraNode, ObjectNode, SceneGraph, SequenceNode

MAGIC = b"4DGF"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _collect_tensors(model: SceneModel, optim=None):
    tensors = dict(model.parameters())
    for prefix, gs in model.gaussian_sets().items():
        tensors[f"{prefix}.is_background"] = gs.is_background.astype(np.uint8)
    for s, seq in model.graph.sequences.items():
        tensors[f"graph.{s}.ego_times"] = seq.ego_times
        tensors[f"graph.{s}.ego_quats"] = seq.ego_quats
        tensors[f"graph.{s}.ego_trans"] = seq.ego_trans
        for o, node in seq.objects.items():
            tensors[f"graph.{s}.obj.{o}.times"] = node.track_times
            tensors[f"graph.{s}.obj.{o}.quats"] = node.track_quats
            tensors[f"graph.{s}.obj.{o}.trans"] = node.track_trans
    tensors["scene.center"] = model.scene_center
    tensors["scene.bounds"] = model.scene_bounds
    if optim is not None:
        tensors.update(optim.state_arrays())
    return tensors


def save_checkpoint(path, model: SceneModel, optim=None, train_config_text: str = None,
                    config_hash: str = None, step: int = 0):
    tensors = _collect_tensors(model, optim)
    names = sorted(tensors)
    manifest = []
    offset = 0
    for name in names:
        arr = np.ascontiguousarray(tensors[name])
        manifest.append({
            "name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
            "offset": offset, "nbytes": arr.nbytes,
        })
        offset += arr.nbytes

    graph_meta = []
    for s, seq in model.graph.sequences.items():
        cams = [{
            "id": c, "fx": cam.intrinsics.fx, "fy": cam.intrinsics.fy,
            "cx": cam.intrinsics.cx, "cy": cam.intrinsics.cy,
            "width": cam.intrinsics.width, "height": cam.intrinsics.height,
            "mount_quat": [float(v) for v in geo.rotmat_to_quat(cam.mount.rotation)],
            "mount_pos": [float(v) for v in cam.mount.translation],
        } for c, cam in seq.cameras.items()]
        objs = [{
            "id": o, "code": node.code, "rigid": node.rigid,
            "dims": [float(v) for v in node.dims],
        } for o, node in seq.objects.items()]
        graph_meta.append({"id": s, "time_denominator": seq.time_denominator,
                           "cameras": cams, "objects": objs})

    header = {
        "model_config": model.config.to_dict(),
        "scene_scale": float(model.scene_scale),
        "graph": graph_meta,
        "object_sets": [[s, o] for (s, o) in model.objects],
        "tensors": manifest,
        "train_config": train_config_text,
        "config_hash": config_hash,
        "step": step,
        "optimizer_step": getattr(optim, "step_count", 0) if optim is not None else 0,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for name in names:
            fh.write(np.ascontiguousarray(tensors[name]).tobytes())


def load_checkpoint(path):
    """Returns (SceneModel, extras dict with optimizer tensors and metadata)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    (version,) = struct.unpack("<I", data[4:8])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + hlen].decode())
    payload = data[16 + hlen:]

    tensors = {}
    for rec in header["tensors"]:
        arr = np.frombuffer(
            payload, dtype=np.dtype(rec["dtype"]),
            count=int(np.prod(rec["shape"])) if rec["shape"] else 1,
            offset=rec["offset"],
        ).reshape(rec["shape"]).copy()
        tensors[rec["name"]] = arr

    cfg = ModelConfig.from_dict(header["model_config"])
    graph = SceneGraph(time_freqs=cfg.time_freqs, code_dim=cfg.code_dim)
    for sq in header["graph"]:
        s = sq["id"]
        node = SequenceNode(
            sequence_id=s,
            appearance=tensors[f"seq.{s}.appearance"],
            geometry_mod=tensors[f"seq.{s}.geometry"],
            ego_times=tensors[f"graph.{s}.ego_times"],
            ego_quats=tensors[f"graph.{s}.ego_quats"],
            ego_trans=tensors[f"graph.{s}.ego_trans"],
            time_denominator=sq["time_denominator"],
            ego_residuals=tensors[f"pose.ego.{s}"],
        )
        for cam in sq["cameras"]:
            intr = CameraIntrinsics(cam["fx"], cam["fy"], cam["cx"], cam["cy"],
                                    cam["width"], cam["height"])
            q = geo.quat_normalize(np.asarray(cam["mount_quat"]))
            node.cameras[cam["id"]] = CameraNode(
                cam["id"], intr,
                geo.RigidTransform(geo.quat_to_rotmat(q), np.asarray(cam["mount_pos"])),
                residual=tensors[f"pose.cam.{s}.{cam['id']}"],
            )
        for ob in sq["objects"]:
            node.objects[ob["id"]] = ObjectNode(
                object_id=ob["id"], code=ob["code"], rigid=ob["rigid"],
                dims=np.asarray(ob["dims"]),
                track_times=tensors[f"graph.{s}.obj.{ob['id']}.times"],
                track_quats=tensors[f"graph.{s}.obj.{ob['id']}.quats"],
                track_trans=tensors[f"graph.{s}.obj.{ob['id']}.trans"],
                sequence_id=s,
                residuals=tensors[f"pose.obj.{s}.{ob['id']}"],
            )
        graph.sequences[s] = node

    def load_set(prefix):
        return GaussianSet(
            tensors[f"{prefix}.means"], tensors[f"{prefix}.quats"],
            tensors[f"{prefix}.log_scales"], tensors[f"{prefix}.opacity_logits"],
            tensors[f"{prefix}.is_background"].astype(bool),
        )

    static = load_set("static")
    objects = {}
    for s, o in header["object_sets"]:
        objects[(s, o)] = load_set(f"object.{s}.{o}")

    single_seq = len(graph.sequences) == 1
    fields = FieldBundle.create(cfg, single_seq, np.random.default_rng(cfg.seed))
    for fname, fobj in (("phi", fields.static), ("psi_r", fields.dyn_rigid),
                        ("psi_n", fields.dyn_nonrigid)):
        for lv in range(len(fobj.grid.tables)):
            t = tensors[f"{fname}.table.{lv}"]
            if t.shape != fobj.grid.tables[lv].shape:
                raise CheckpointError(f"{fname}.table.{lv}: shape mismatch with config")
            fobj.grid.tables[lv] = t
        heads = [("color", fobj.mlp_color)]
        heads.append(("atten", fobj.mlp_atten) if fname == "phi" else ("deform", fobj.mlp_deform))
        for hname, mlp in heads:
            for i in range(len(mlp.weights)):
                mlp.weights[i] = tensors[f"{fname}.{hname}.W{i}"]
                mlp.biases[i] = tensors[f"{fname}.{hname}.b{i}"]

    model = SceneModel(
        config=cfg, graph=graph, static=static, objects=objects, fields=fields,
        scene_center=tensors["scene.center"], scene_scale=header["scene_scale"],
        scene_bounds=tensors["scene.bounds"],
    )
    extras = {
        "optimizer_tensors": {k: v for k, v in tensors.items() if k.startswith("adam.")},
        "optimizer_step": header.get("optimizer_step", 0),
        "train_config": header.get("train_config"),
        "config_hash": header.get("config_hash"),
        "step": header.get("step", 0),
    }
    return model, extras
