"""Adam with bias correction and (coupled-by-default) weight decay."""

from __future__ import annotations

import logging

import numpy as np

from .tensor import Parameter

log = logging.getLogger(__name__)


class Adam:
    """Standard Adam.

    Weight decay defaults to the coupled convention (decay added to the
    gradient before the moment updates); set ``decoupled=True`` for the
    AdamW behaviour. Tensors whose gradient contains a non-finite value
    are skipped for that step and counted in ``skipped_updates``.
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=1e-5, decoupled=False):
        self.params: list[Parameter] = [p for p in params if p.requires_grad]
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decoupled = decoupled
        self.step_count = 0
        self.skipped_updates = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                self.skipped_updates += 1
                log.warning("non-finite gradient for %s; update skipped", p.name or f"param{i}")
                continue
            if self.weight_decay and not self.decoupled:
                g = g + self.weight_decay * p.data
            m = self._m[i]
            v = self._v[i]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay and self.decoupled:
                update = update + self.weight_decay * p.data
            p.data = p.data - self.lr * update
            if not np.all(np.isfinite(p.data)):
                raise FloatingPointError(f"non-finite parameter after update: {p.name or i}")

    def state_dict(self):
        out = {"step_count": np.array([self.step_count], dtype="<f8")}
        for i, _ in enumerate(self.params):
            out[f"m.{i}"] = self._m[i]
            out[f"v.{i}"] = self._v[i]
        return out

    def load_state_dict(self, state):
        self.step_count = int(state["step_count"][0])
        for i in range(len(self.params)):
            self._m[i] = state[f"m.{i}"].astype(self._m[i].dtype, copy=True)
            self._v[i] = state[f"v.{i}"].astype(self._v[i].dtype, copy=True)
