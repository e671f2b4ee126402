"""Hash-grid + MLP neural fields for appearance, opacity attenuation, and deformation.

Forward passes cache activations so the analytic backward can return exact
reverse-mode gradients for tables, MLP weights, conditioning codes, and query
positions. Everything runs in the dtype the field was created with; tests use
float64, the trainer float32.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import contract_space, contract_space_backward

# Teschner-style spatial hash primes, one per hashed dimension (x, y, z, object code).
HASH_PRIMES = np.array([73856093, 19349663, 83492791, 49979687], dtype=np.uint64)

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)

# corner offsets of the trilinear cell, bit d of corner c selects hi/lo in dim d
_CORNERS = np.array([[(c >> d) & 1 for d in range(3)] for c in range(8)], dtype=np.int64)


def sh_encode(dirs: np.ndarray) -> np.ndarray:
    """Real spherical-harmonics basis of the first four bands (16 values) for unit dirs."""
    dirs = np.asarray(dirs)
    n = np.linalg.norm(dirs, axis=-1)
    if np.any(n < 1e-12):
        raise ValueError("direction encoding requires non-zero vectors")
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    xx, yy, zz = x * x, y * y, z * z
    out = np.empty(dirs.shape[:-1] + (16,), dtype=dirs.dtype)
    out[..., 0] = SH_C0
    out[..., 1] = -SH_C1 * y
    out[..., 2] = SH_C1 * z
    out[..., 3] = -SH_C1 * x
    out[..., 4] = SH_C2[0] * x * y
    out[..., 5] = SH_C2[1] * y * z
    out[..., 6] = SH_C2[2] * (2 * zz - xx - yy)
    out[..., 7] = SH_C2[3] * x * z
    out[..., 8] = SH_C2[4] * (xx - yy)
    out[..., 9] = SH_C3[0] * y * (3 * xx - yy)
    out[..., 10] = SH_C3[1] * x * y * z
    out[..., 11] = SH_C3[2] * y * (4 * zz - xx - yy)
    out[..., 12] = SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
    out[..., 13] = SH_C3[4] * x * (4 * zz - xx - yy)
    out[..., 14] = SH_C3[5] * z * (xx - yy)
    out[..., 15] = SH_C3[6] * x * (xx - 3 * yy)
    return out


def sh_encode_backward(dirs: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """d(sh_encode)/d(dirs)^T @ grad for unit dirs, shape (..., 3)."""
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    xx, yy, zz = x * x, y * y, z * z
    g = grad
    gx = (-SH_C1 * g[..., 3]
          + SH_C2[0] * y * g[..., 4] + SH_C2[2] * (-2 * x) * g[..., 6]
          + SH_C2[3] * z * g[..., 7] + SH_C2[4] * 2 * x * g[..., 8]
          + SH_C3[0] * 6 * x * y * g[..., 9] + SH_C3[1] * y * z * g[..., 10]
          + SH_C3[2] * (-2 * x * y) * g[..., 11] + SH_C3[3] * (-6 * x * z) * g[..., 12]
          + SH_C3[4] * (4 * zz - 3 * xx - yy) * g[..., 13]
          + SH_C3[5] * 2 * x * z * g[..., 14] + SH_C3[6] * 3 * (xx - yy) * g[..., 15])
    gy = (-SH_C1 * g[..., 1]
          + SH_C2[0] * x * g[..., 4] + SH_C2[1] * z * g[..., 5]
          + SH_C2[2] * (-2 * y) * g[..., 6] + SH_C2[4] * (-2 * y) * g[..., 8]
          + SH_C3[0] * 3 * (xx - yy) * g[..., 9] + SH_C3[1] * x * z * g[..., 10]
          + SH_C3[2] * (4 * zz - xx - 3 * yy) * g[..., 11]
          + SH_C3[3] * (-6 * y * z) * g[..., 12] + SH_C3[4] * (-2 * x * y) * g[..., 13]
          + SH_C3[5] * (-2 * y * z) * g[..., 14] + SH_C3[6] * (-6 * x * y) * g[..., 15])
    gz = (SH_C1 * g[..., 2]
          + SH_C2[1] * y * g[..., 5] + SH_C2[2] * 4 * z * g[..., 6]
          + SH_C2[3] * x * g[..., 7]
          + SH_C3[1] * x * y * g[..., 10] + SH_C3[2] * 8 * y * z * g[..., 11]
          + SH_C3[3] * (6 * zz - 3 * xx - 3 * yy) * g[..., 12]
          + SH_C3[4] * 8 * x * z * g[..., 13] + SH_C3[5] * (xx - yy) * g[..., 14])
    return np.stack([gx, gy, gz], axis=-1)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def scaled_sigmoid(x, c: float = 0.9):
    """(1/c) sigmoid(c x): lets color predictions slightly exceed [0, 1]."""
    return sigmoid(c * np.asarray(x)) / c


def level_resolutions(base: int, max_res: int, levels: int) -> np.ndarray:
    if levels == 1:
        return np.array([max_res], dtype=np.int64)
    growth = (max_res / base) ** (1.0 / (levels - 1))
    return np.round(base * growth ** np.arange(levels)).astype(np.int64)


@dataclass
class GridConfig:
    levels: int
    log2_table: int
    base_res: int = 16
    max_res: int = 2048
    features: int = 2
    four_d: bool = False  # object-code participates in hashing only


@dataclass
class HashGrid:
    config: GridConfig
    resolutions: np.ndarray
    tables: list  # per level, (entries, features)
    dense: list  # per level, True when directly indexed (no hashing)

    @staticmethod
    def create(config: GridConfig, rng: np.random.Generator, dtype=np.float32) -> "HashGrid":
        res = level_resolutions(config.base_res, config.max_res, config.levels)
        table_size = 1 << config.log2_table
        tables, dense = [], []
        for r in res:
            n_vertices = (int(r) + 1) ** 3
            if n_vertices <= table_size and not config.four_d:
                entries, is_dense = n_vertices, True
            else:
                entries, is_dense = table_size, False
            tables.append(rng.uniform(-1e-4, 1e-4, (entries, config.features)).astype(dtype))
            dense.append(is_dense)
        return HashGrid(config, res, tables, dense)

    @property
    def out_dim(self) -> int:
        return self.config.levels * self.config.features

    def _indices(self, corner_xyz: np.ndarray, level: int, extra: Optional[np.ndarray]):
        """Flat table indices for integer corner coordinates (N, 8, 3)."""
        if self.dense[level]:
            r1 = int(self.resolutions[level]) + 1
            cx, cy, cz = corner_xyz[..., 0], corner_xyz[..., 1], corner_xyz[..., 2]
            return cx + r1 * (cy + r1 * cz)
        h = (corner_xyz[..., 0].astype(np.uint64) * HASH_PRIMES[0]
             ^ corner_xyz[..., 1].astype(np.uint64) * HASH_PRIMES[1]
             ^ corner_xyz[..., 2].astype(np.uint64) * HASH_PRIMES[2])
        if self.config.four_d:
            if extra is None:
                raise ValueError("4D-indexed grid requires an extra index per query")
            h = h ^ (extra.astype(np.uint64)[:, None] * HASH_PRIMES[3])
        return (h & np.uint64(len(self.tables[level]) - 1)).astype(np.int64)

    def query(self, x: np.ndarray, extra: Optional[np.ndarray] = None, need_grad: bool = True):
        """Per-level trilinear interpolation of (hashed) corner features.

        x: (N, 3) in the contracted domain [-2, 2]. Returns (features (N, L*F), cache).
        """
        x = np.asarray(x)
        if extra is not None and not self.config.four_d:
            raise ValueError("extra index given for a 3D grid")
        n = x.shape[0]
        out = np.empty((n, self.out_dim), dtype=x.dtype)
        cache = {"x": x, "extra": extra, "levels": []} if need_grad else None
        for lv in range(self.config.levels):
            res = int(self.resolutions[lv])
            u = (x + 2.0) * (res / 4.0)  # cell units
            i0 = np.clip(np.floor(u).astype(np.int64), 0, res - 1)
            f = u - i0  # (N, 3) in [0, 1]
            corners = i0[:, None, :] + _CORNERS[None, :, :]  # (N, 8, 3)
            idx = self._indices(corners, lv, extra)  # (N, 8)
            feats = self.tables[lv][idx]  # (N, 8, F)
            g = 1.0 - f
            wx = np.stack([g[:, 0], f[:, 0]], axis=1)  # (N, 2)
            wy = np.stack([g[:, 1], f[:, 1]], axis=1)
            wz = np.stack([g[:, 2], f[:, 2]], axis=1)
            # (N, 2z, 2y, 2x) flattens to corner order c = x + 2y + 4z
            w = (wz[:, :, None, None] * wy[:, None, :, None] * wx[:, None, None, :]) \
                .reshape(-1, 8)
            out[:, lv * self.config.features:(lv + 1) * self.config.features] = (
                (w[:, :, None] * feats).sum(axis=1)
            )
            if need_grad:
                tau = np.where(_CORNERS[None, :, :] == 1, f[:, None, :], 1.0 - f[:, None, :])
                cache["levels"].append({"idx": idx, "w": w, "tau": tau, "feats": feats, "res": res})
        return out, cache

    def query_backward(self, cache, grad_out: np.ndarray):
        """Gradients of query: (per-level table grads, grad wrt x)."""
        x = cache["x"]
        if grad_out.shape != (x.shape[0], self.out_dim):
            raise ValueError(
                f"upstream gradient shape {grad_out.shape} does not match cache "
                f"({x.shape[0]}, {self.out_dim})"
            )
        grad_tables = []
        grad_x = np.zeros_like(x)
        F = self.config.features
        for lv, c in enumerate(cache["levels"]):
            g = grad_out[:, lv * F:(lv + 1) * F]  # (N, F)
            # table gradient: scatter w * g onto the 8 corners (bincount is a fast,
            # deterministic sequential sum)
            entries = len(self.tables[lv])
            flat = c["idx"].ravel()
            wg = c["w"][..., None] * g[:, None, :]  # (N, 8, F)
            gt = np.stack(
                [np.bincount(flat, weights=wg[..., f].ravel(), minlength=entries)
                 for f in range(F)], axis=1,
            ).astype(self.tables[lv].dtype)
            grad_tables.append(gt)
            # position gradient via d w / d f
            gdotf = np.einsum("nf,ncf->nc", g, c["feats"])  # (N, 8)
            tau = c["tau"]
            scale = c["res"] / 4.0
            for d in range(3):
                others = [o for o in range(3) if o != d]
                w_wo = tau[..., others[0]] * tau[..., others[1]]  # (N, 8)
                sign = np.where(_CORNERS[None, :, d] == 1, 1.0, -1.0)
                grad_x[:, d] += np.sum(gdotf * w_wo * sign, axis=1) * scale
        return grad_tables, grad_x


@dataclass
class Mlp:
    weights: list  # (in, out) per layer
    biases: list
    out_activation: str = "none"  # none | sigmoid | scaled_sigmoid

    @staticmethod
    def create(sizes, out_activation, rng: np.random.Generator, dtype=np.float32,
               zero_init_last: bool = False) -> "Mlp":
        weights, biases = [], []
        for i in range(len(sizes) - 1):
            std = np.sqrt(2.0 / sizes[i])
            weights.append((rng.standard_normal((sizes[i], sizes[i + 1])) * std).astype(dtype))
            biases.append(np.zeros(sizes[i + 1], dtype=dtype))
        if zero_init_last:
            weights[-1][:] = 0.0
        return Mlp(weights, biases, out_activation)

    def forward(self, x: np.ndarray, need_grad: bool = True):
        cache = {"inputs": [], "out_pre": None} if need_grad else None
        h = x
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if need_grad:
                cache["inputs"].append(h)
            z = h @ W + b
            if i < last:
                h = np.maximum(z, 0.0)
            else:
                if need_grad:
                    cache["out_pre"] = z
                h = self._activate(z)
        return h, cache

    def _activate(self, z):
        if self.out_activation == "sigmoid":
            return sigmoid(z)
        if self.out_activation == "scaled_sigmoid":
            return scaled_sigmoid(z)
        return z

    def forward_from_preact(self, z0: np.ndarray):
        """Forward pass given the first layer's preactivation (inference only)."""
        h = np.maximum(z0, 0.0) if len(self.weights) > 1 else self._activate(z0)
        for i in range(1, len(self.weights)):
            z = h @ self.weights[i] + self.biases[i]
            h = np.maximum(z, 0.0) if i < len(self.weights) - 1 else self._activate(z)
        return h

    def backward(self, cache, grad_y: np.ndarray):
        """Returns (grad wrt input, [(dW, db) per layer])."""
        z = cache["out_pre"]
        if grad_y.shape != z.shape:
            raise ValueError(f"upstream gradient shape {grad_y.shape} does not match {z.shape}")
        if self.out_activation == "sigmoid":
            y = sigmoid(z)
            g = grad_y * y * (1.0 - y)
        elif self.out_activation == "scaled_sigmoid":
            s = sigmoid(0.9 * z)
            g = grad_y * s * (1.0 - s)
        else:
            g = grad_y
        grads = [None] * len(self.weights)
        for i in range(len(self.weights) - 1, -1, -1):
            h = cache["inputs"][i]
            grads[i] = (h.T @ g, g.sum(axis=0))
            g = g @ self.weights[i].T
            if i > 0:
                g = g * (cache["inputs"][i] > 0)
        return g, grads

    def param_arrays(self):
        for i in range(len(self.weights)):
            yield f"W{i}", self.weights[i]
            yield f"b{i}", self.biases[i]


@dataclass
class StaticField:
    """Field phi over the static scaffold: view-dependent color, view-independent attenuation."""

    grid: HashGrid
    mlp_color: Mlp
    mlp_atten: Mlp

    @staticmethod
    def create(grid_cfg: GridConfig, code_dim: int, hidden: int, rng, dtype=np.float32):
        grid = HashGrid.create(grid_cfg, rng, dtype)
        f = grid.out_dim
        mlp_color = Mlp.create([f + code_dim + 16, hidden, hidden, 3], "scaled_sigmoid", rng, dtype)
        mlp_atten = Mlp.create([f + code_dim + 1, hidden, 1], "sigmoid", rng, dtype)
        return StaticField(grid, mlp_color, mlp_atten)

    def evaluate(self, mu_norm, dirs, alpha_base, omega, need_grad=True):
        """(attenuation (N,), color (N, 3), cache) for scene-normalized positions."""
        contracted = contract_space(mu_norm, "infinity")
        feats, gcache = self.grid.query(contracted, need_grad=need_grad)
        sh = sh_encode(dirs)
        if not need_grad:
            # the conditioning code is constant per render: fold it into the biases
            f = feats.shape[1]
            code = omega.shape[-1]
            Wc = self.mlp_color.weights[0]
            z0 = feats @ Wc[:f] + sh @ Wc[f + code:] \
                + (omega @ Wc[f:f + code] + self.mlp_color.biases[0])
            color = self.mlp_color.forward_from_preact(z0)
            Wa = self.mlp_atten.weights[0]
            z0a = feats @ Wa[:f] + alpha_base[:, None] * Wa[-1] \
                + (omega @ Wa[f:f + code] + self.mlp_atten.biases[0])
            nu = self.mlp_atten.forward_from_preact(z0a)
            return nu[:, 0], color, None
        om = np.broadcast_to(omega, (len(mu_norm), omega.shape[-1]))
        color_in = np.concatenate([feats, om, sh], axis=1)
        atten_in = np.concatenate([feats, om, alpha_base[:, None]], axis=1)
        color, ccache = self.mlp_color.forward(color_in, need_grad)
        nu, acache = self.mlp_atten.forward(atten_in, need_grad)
        cache = None
        if need_grad:
            cache = {
                "mu_norm": mu_norm, "dirs": dirs, "grid": gcache,
                "color": ccache, "atten": acache, "f_dim": feats.shape[1],
            }
        return nu[:, 0], color, cache

    def backward(self, cache, grad_nu, grad_color):
        """Gradients for tables/MLPs plus (grad mu_norm, grad dirs, grad alpha, grad omega)."""
        f_dim = cache["f_dim"]
        gci, color_grads = self.mlp_color.backward(cache["color"], grad_color)
        gai, atten_grads = self.mlp_atten.backward(cache["atten"], grad_nu[:, None])
        grad_feats = gci[:, :f_dim] + gai[:, :f_dim]
        code_dim = gci.shape[1] - f_dim - 16
        grad_omega = gci[:, f_dim:f_dim + code_dim].sum(0) + gai[:, f_dim:f_dim + code_dim].sum(0)
        grad_dirs = sh_encode_backward(cache["dirs"], gci[:, f_dim + code_dim:])
        grad_alpha = gai[:, -1]
        grad_tables, grad_contracted = self.grid.query_backward(cache["grid"], grad_feats)
        grad_mu = contract_space_backward(cache["mu_norm"], "infinity", grad_contracted)
        return {
            "tables": grad_tables, "color": color_grads, "atten": atten_grads,
            "mu_norm": grad_mu, "dirs": grad_dirs, "alpha_base": grad_alpha,
            "omega": grad_omega,
        }


@dataclass
class DynamicField:
    """Field psi over object scaffolds: color plus a deformation head for non-rigid motion."""

    grid: HashGrid  # 4D-indexed by object code
    mlp_color: Mlp
    mlp_deform: Mlp

    @staticmethod
    def create(grid_cfg: GridConfig, code_dim: int, gamma_dim: int, hidden: int, rng,
               dtype=np.float32):
        grid_cfg.four_d = True
        grid = HashGrid.create(grid_cfg, rng, dtype)
        f = grid.out_dim
        mlp_color = Mlp.create([f + code_dim + gamma_dim + 16, hidden, 3], "scaled_sigmoid", rng, dtype)
        # deformations start at exactly zero and grow only where motion demands them
        mlp_deform = Mlp.create([f + gamma_dim, hidden, 3], "none", rng, dtype,
                                zero_init_last=True)
        return DynamicField(grid, mlp_color, mlp_deform)

    def evaluate(self, mu_unit, dirs, omega, obj_code, gamma, rigid, need_grad=True):
        """(color (N, 3), deformation (N, 3), cache) for box-normalized object positions."""
        n = len(mu_unit)
        contracted = contract_space(mu_unit, "frobenius")
        codes = np.full(n, obj_code, dtype=np.int64)
        feats, gcache = self.grid.query(contracted, extra=codes, need_grad=need_grad)
        sh = sh_encode(dirs)
        gm_vec = gamma.astype(mu_unit.dtype)
        if not need_grad:
            f = feats.shape[1]
            code = omega.shape[-1]
            gd = gm_vec.shape[-1]
            Wc = self.mlp_color.weights[0]
            z0 = feats @ Wc[:f] + sh @ Wc[f + code + gd:] \
                + (omega @ Wc[f:f + code] + gm_vec @ Wc[f + code:f + code + gd]
                   + self.mlp_color.biases[0])
            color = self.mlp_color.forward_from_preact(z0)
            if rigid:
                delta = np.zeros((n, 3), dtype=mu_unit.dtype)
            else:
                Wd = self.mlp_deform.weights[0]
                z0d = feats @ Wd[:f] + (gm_vec @ Wd[f:] + self.mlp_deform.biases[0])
                delta = self.mlp_deform.forward_from_preact(z0d)
            return color, delta, None
        om = np.broadcast_to(omega, (n, omega.shape[-1]))
        gm = np.broadcast_to(gm_vec, (n, gamma.shape[-1]))
        color_in = np.concatenate([feats, om, gm, sh], axis=1)
        color, ccache = self.mlp_color.forward(color_in, need_grad)
        dcache = None
        if rigid:
            delta = np.zeros((n, 3), dtype=mu_unit.dtype)
        else:
            deform_in = np.concatenate([feats, gm], axis=1)
            delta, dcache = self.mlp_deform.forward(deform_in, need_grad)
        cache = None
        if need_grad:
            cache = {
                "mu_unit": mu_unit, "dirs": dirs, "grid": gcache, "color": ccache,
                "deform": dcache, "rigid": rigid, "f_dim": feats.shape[1],
                "code_dim": omega.shape[-1], "gamma_dim": gamma.shape[-1],
            }
        return color, delta, cache

    def backward(self, cache, grad_color, grad_delta):
        f_dim, code_dim, gamma_dim = cache["f_dim"], cache["code_dim"], cache["gamma_dim"]
        gci, color_grads = self.mlp_color.backward(cache["color"], grad_color)
        grad_feats = gci[:, :f_dim].copy()
        grad_omega = gci[:, f_dim:f_dim + code_dim].sum(0)
        grad_gamma = gci[:, f_dim + code_dim:f_dim + code_dim + gamma_dim].sum(0)
        grad_dirs = sh_encode_backward(cache["dirs"], gci[:, f_dim + code_dim + gamma_dim:])
        if cache["rigid"] or cache["deform"] is None:
            deform_grads = [(np.zeros_like(W), np.zeros_like(b))
                            for W, b in zip(self.mlp_deform.weights, self.mlp_deform.biases)]
        else:
            gdi, deform_grads = self.mlp_deform.backward(cache["deform"], grad_delta)
            grad_feats += gdi[:, :f_dim]
            grad_gamma += gdi[:, f_dim:].sum(0)
        grad_tables, grad_contracted = self.grid.query_backward(cache["grid"], grad_feats)
        grad_mu = contract_space_backward(cache["mu_unit"], "frobenius", grad_contracted)
        return {
            "tables": grad_tables, "color": color_grads, "deform": deform_grads,
            "mu_unit": grad_mu, "dirs": grad_dirs, "omega": grad_omega, "gamma": grad_gamma,
        }
