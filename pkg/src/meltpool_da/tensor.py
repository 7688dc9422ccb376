"""Dense value-and-gradient container used for all trainable parameters."""

from __future__ import annotations

import numpy as np

from .errors import DimensionError


class Tensor:
    """A named n-d float buffer with an optional same-shape gradient buffer.

    Parameters and network activations are stored in float32 by default;
    gradient checking clones the whole network into float64.
    """

    __slots__ = ("name", "data", "grad")

    def __init__(self, data, name: str = "", with_grad: bool = False, dtype=np.float32):
        self.name = name
        self.data = np.ascontiguousarray(data, dtype=dtype)
        # gradients stay None until a backward pass populates them, so a
        # step without a preceding backward is detectable
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def require_grad(self) -> "Tensor":
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def astype(self, dtype) -> "Tensor":
        t = Tensor(self.data.astype(dtype), name=self.name, dtype=dtype)
        if self.grad is not None:
            t.grad = self.grad.astype(dtype)
        return t

    def check_finite(self) -> None:
        if not np.all(np.isfinite(self.data)):
            raise DimensionError(f"tensor {self.name!r} contains non-finite values")

    def __repr__(self):
        return f"Tensor(name={self.name!r}, shape={self.data.shape}, dtype={self.data.dtype})"
