"""Per-parameter-group Adam with exponential learning-rate schedules.

Groups are derived from parameter names; pose residuals additionally get
decoupled weight decay so they shrink geometrically without gradient signal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class GroupSpec:
    lr: float
    lr_final: float = None  # exponential decay target; None = constant
    weight_decay: float = 0.0

    def lr_at(self, step: int, total_steps: int) -> float:
        if self.lr_final is None or total_steps <= 1 or self.lr == 0.0:
            return self.lr
        frac = min(max(step / max(total_steps - 1, 1), 0.0), 1.0)
        return self.lr * (self.lr_final / self.lr) ** frac


def group_of(name: str) -> str:
    if name.startswith("pose."):
        return "poses"
    if name.startswith(("phi.", "psi_")):
        return "fields"
    if name.startswith("seq."):
        return "codes"
    for suffix in ("means", "quats", "log_scales", "opacity_logits"):
        if name.endswith(suffix):
            return suffix
    raise KeyError(f"no optimizer group for parameter {name!r}")


def default_groups(position_lr_scale: float = 1.0) -> dict:
    return {
        "means": GroupSpec(1.6e-5 * position_lr_scale, 1.6e-6 * position_lr_scale),
        "opacity_logits": GroupSpec(5e-2),
        "log_scales": GroupSpec(1e-3),
        "quats": GroupSpec(1e-3),
        "fields": GroupSpec(2.5e-3, 2.5e-4),
        "codes": GroupSpec(5e-4),
        "poses": GroupSpec(1e-5, 1e-6, weight_decay=1e-2),
    }


class Adam:
    def __init__(self, params: dict, groups: dict, total_steps: int,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.groups = groups
        self.total_steps = total_steps
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            spec = self.groups[group_of(name)]
            lr = spec.lr_at(self.step_count - 1, self.total_steps)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if spec.weight_decay:
                p *= 1.0 - lr * spec.weight_decay

    def rebuild_param(self, name: str, keep_mask: np.ndarray = None, n_new: int = 0,
                      template: np.ndarray = None):
        """Density-control surgery: drop pruned rows, add zeroed state for new ones."""
        for state in (self.m, self.v):
            arr = state[name]
            if keep_mask is not None:
                arr = arr[keep_mask]
            if n_new:
                pad = np.zeros((n_new,) + arr.shape[1:], dtype=arr.dtype)
                arr = np.concatenate([arr, pad])
            state[name] = arr
        if template is not None and self.m[name].shape != template.shape:
            raise ValueError(f"optimizer state for {name} does not match parameter shape")

    def state_arrays(self):
        """Named tensors for checkpointing."""
        out = {}
        for k, arr in self.m.items():
            out[f"adam.m.{k}"] = arr
        for k, arr in self.v.items():
            out[f"adam.v.{k}"] = arr
        return out

    def load_state_arrays(self, tensors: dict, step_count: int):
        self.step_count = step_count
        for k in list(self.m):
            if f"adam.m.{k}" in tensors:
                self.m[k] = tensors[f"adam.m.{k}"]
                self.v[k] = tensors[f"adam.v.{k}"]
