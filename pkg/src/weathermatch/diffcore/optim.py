"""AdamW with decoupled weight decay and per-group learning rates."""

from __future__ import annotations

import numpy as np

from ..errors import NumericError
from .store import ParameterStore


class AdamW:
    """Decoupled-weight-decay adaptive-moment optimizer.

    Update (per tensor, bias-corrected, eps added outside the square root):

        m <- b1*m + (1-b1)*g        v <- b2*v + (1-b2)*g^2
        w <- w*(1 - lr*wd) - lr * (m/(1-b1^t)) / (sqrt(v/(1-b2^t)) + eps)

    `groups` maps name prefixes to learning rates; the first matching prefix
    wins, anything unmatched uses `lr`.  Only trainable tensors are  updated;
    moment state is keyed by tensor name so freezing/unfreezing keeps state.
    """

    def __init__(
        self,
        store: ParameterStore,
        lr: float = 1e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        groups=None,
    ):
        self.store = store
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.groups = list(groups or [])
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def _lr_for(self, name: str) -> float:
        for prefix, lr in self.groups:
            if name.startswith(prefix):
                return lr
        return self.lr

    def touched_names(self):
        return list(self.m)

    def zero_grad(self):
        self.store.zero_grads()

    def step(self):
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for tensor in self.store.tensors():
            if not tensor.trainable:
                continue
            g = tensor.grad
            if not np.all(np.isfinite(g)):
                raise NumericError(
                    f"non-finite gradient in {tensor.name!r} at step {t}"
                )
            if tensor.name not in self.m:
                self.m[tensor.name] = np.zeros_like(tensor.values)
                self.v[tensor.name] = np.zeros_like(tensor.values)
            m, v = self.m[tensor.name], self.v[tensor.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            lr = self._lr_for(tensor.name)
            if self.weight_decay:
                tensor.values *= 1.0 - lr * self.weight_decay
            denom = np.sqrt(v / c2)
            denom += self.eps
            tensor.values -= (lr / c1) * (m / denom)

    def state_arrays(self):
        """Flat (name, array) records for checkpointing, plus the step index."""
        records = []
        for name in self.m:
            records.append((f"adam.m.{name}", self.m[name]))
            records.append((f"adam.v.{name}", self.v[name]))
        records.append(("adam.step", np.array([self.step_count], dtype=np.float32)))
        return records

    def load_state_arrays(self, records):
        for name, arr in records:
            if name == "adam.step":
                self.step_count = int(arr[0])
            elif name.startswith("adam.m."):
                self.m[name[len("adam.m.") :]] = arr.astype(self.store.dtype)
            elif name.startswith("adam.v."):
                self.v[name[len("adam.v.") :]] = arr.astype(self.store.dtype)
