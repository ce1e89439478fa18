"""AdamW with decoupled weight decay, updating parameter arrays in place."""

from __future__ import annotations

import numpy as np


class AdamW:
    def __init__(self, params: dict[str, np.ndarray], lr=1e-4, betas=(0.9, 0.999),
                 eps=1e-8, weight_decay=1e-4):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray], lr=None):
        lr = self.lr if lr is None else lr
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                continue
            g = g.astype(p.dtype, copy=False)
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                p *= p.dtype.type(1.0 - lr * self.weight_decay)
            p -= (lr * update).astype(p.dtype, copy=False)

    def state_tensors(self, prefix="") -> dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out[f"opt.{prefix}{k}.m"] = self.m[k]
            out[f"opt.{prefix}{k}.v"] = self.v[k]
        out[f"opt.{prefix}step"] = np.array([self.step_count], dtype=np.float32)
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray], prefix=""):
        for k in self.params:
            self.m[k][...] = tensors[f"opt.{prefix}{k}.m"]
            self.v[k][...] = tensors[f"opt.{prefix}{k}.v"]
        self.step_count = int(tensors[f"opt.{prefix}step"][0])
