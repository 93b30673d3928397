"""Named trainable tensors with bias tagging and gradient buffers."""

from __future__ import annotations

import hashlib

import numpy as np

from ..errors import ParameterError, ShapeError
from .tape import Var


class ParamTensor:
    """One named array with its gradient buffer and role flags.

    is_bias marks additive offsets only: convolution/linear biases and
    normalization shift terms.  Scales and weights are never bias-tagged.
    """

    __slots__ = ("name", "values", "grad", "is_bias", "trainable")

    def __init__(self, name, values, is_bias=False, trainable=True):
        self.name = name
        self.values = values
        self.grad = np.zeros_like(values)
        self.is_bias = bool(is_bias)
        self.trainable = bool(trainable)

    def zero_grad(self):
        self.grad[...] = 0


class ParameterStore:
    """Insertion-ordered map of ParamTensors, all at one precision."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._tensors: dict[str, ParamTensor] = {}

    def add(self, name: str, values, is_bias: bool = False, trainable: bool = True) -> ParamTensor:
        if name in self._tensors:
            raise ParameterError(f"duplicate parameter name {name!r}")
        t = ParamTensor(name, np.asarray(values, dtype=self.dtype), is_bias, trainable)
        self._tensors[name] = t
        return t

    def __contains__(self, name):
        return name in self._tensors

    def __getitem__(self, name) -> ParamTensor:
        return self._tensors[name]

    def __len__(self):
        return len(self._tensors)

    def names(self):
        return list(self._tensors)

    def tensors(self):
        return list(self._tensors.values())

    def leaf(self, name: str, train: bool = True) -> Var:
        """A graph leaf for one tensor; train=False detaches it (inference)."""
        t = self._tensors[name]
        requires = train and t.trainable
        return Var(t.values, requires=requires, param=t if requires else None)

    def zero_grads(self):
        for t in self._tensors.values():
            t.zero_grad()

    def astype(self, dtype) -> "ParameterStore":
        out = ParameterStore(dtype)
        for t in self._tensors.values():
            out.add(t.name, t.values, is_bias=t.is_bias, trainable=t.trainable)
        return out

    def clone(self) -> "ParameterStore":
        return self.astype(self.dtype)

    def digest(self, names=None) -> str:
        """sha256 over the raw bytes of the selected tensors, in name order."""
        h = hashlib.sha256()
        for name in names if names is not None else self.names():
            t = self._tensors[name]
            h.update(name.encode("utf-8"))
            h.update(np.ascontiguousarray(t.values).tobytes())
        return h.hexdigest()

    def bias_names(self):
        return [t.name for t in self._tensors.values() if t.is_bias]

    def check_partition(self):
        """Bias/non-bias tensors partition the store (sanity assertion)."""
        bias = set(self.bias_names())
        other = set(self.names()) - bias
        if bias & other or (bias | other) != set(self.names()):
            raise ShapeError("bias partition violated")
        return True
