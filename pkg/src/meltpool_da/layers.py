"""Layer primitives with hand-written forward/backward passes.

Every layer caches what its backward pass needs during forward. backward()
overwrites parameter gradients (it does not accumulate) and returns the
gradient with respect to the layer input, so it may be called repeatedly
on the same cached forward with different upstream gradients.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DegenerateBatchError, DimensionError
from .tensor import Tensor

SIGMOID_CLAMP = 1e-7


class Layer:
    """Base layer: stateless unless it declares parameters."""

    def params(self) -> list[Tensor]:
        return []

    def forward(self, x: np.ndarray, train: bool = True) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def astype(self, dtype) -> None:
        for p in self.params():
            p.data = p.data.astype(dtype)
            if p.grad is not None:
                p.grad = p.grad.astype(dtype)


def _uniform_fan_in(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d(Layer):
    """3x3 convolution, stride 1, zero padding 1 (spatial dims preserved)."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int = 3,
                 padding: int = 1, rng: np.random.Generator | None = None,
                 name: str = "conv", dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.padding = padding
        fan_in = in_channels * kernel * kernel
        self.weight = Tensor(
            _uniform_fan_in(rng, (out_channels, in_channels, kernel, kernel), fan_in, dtype),
            name=f"{name}.weight", with_grad=True)
        self.bias = Tensor(_uniform_fan_in(rng, (out_channels,), fan_in, dtype),
                           name=f"{name}.bias", with_grad=True)
        self._cols = None
        self._in_shape = None

    def params(self):
        return [self.weight, self.bias]

    def _im2col(self, x: np.ndarray) -> np.ndarray:
        n, c, h, w = x.shape
        k, p = self.kernel, self.padding
        if p:
            x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        win = sliding_window_view(x, (k, k), axis=(2, 3))  # n,c,ho,wo,k,k
        ho, wo = win.shape[2], win.shape[3]
        return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k), ho, wo

    def forward(self, x, train=True):
        if x.ndim != 4:
            raise DimensionError(f"conv2d expects 4-d input [N,C,H,W], got {x.ndim}-d")
        if x.shape[1] != self.in_channels:
            raise DimensionError(
                f"conv2d channel axis mismatch: input has {x.shape[1]}, weights expect {self.in_channels}")
        n = x.shape[0]
        cols, ho, wo = self._im2col(x)
        self._cols = cols
        self._in_shape = x.shape
        w2 = self.weight.data.reshape(self.out_channels, -1)
        out = cols @ w2.T + self.bias.data
        return out.reshape(n, ho, wo, self.out_channels).transpose(0, 3, 1, 2)

    def backward(self, dout, need_dx: bool = True):
        n, co, ho, wo = dout.shape
        dflat = dout.transpose(0, 2, 3, 1).reshape(-1, co)
        self.weight.grad = (dflat.T @ self._cols).reshape(self.weight.data.shape)
        self.bias.grad = dflat.sum(axis=0)
        if not need_dx:
            return None
        # dx: full correlation of dout with the 180-degree-rotated, channel-swapped kernel
        k, p = self.kernel, self.padding
        wt = self.weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)  # cin,cout,k,k
        dpad = np.pad(dout, ((0, 0), (0, 0), (k - 1 - p, k - 1 - p), (k - 1 - p, k - 1 - p)))
        win = sliding_window_view(dpad, (k, k), axis=(2, 3))
        hi, wi = win.shape[2], win.shape[3]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * hi * wi, co * k * k)
        dx = cols @ wt.reshape(self.in_channels, -1).T
        return dx.reshape(n, hi, wi, self.in_channels).transpose(0, 3, 1, 2)


class MaxPool2d(Layer):
    """2x2 max pooling, stride 2; gradient routed to the first max in row-major order."""

    def __init__(self, kernel: int = 2, stride: int = 2):
        if kernel != 2 or stride != 2:
            raise ContractError("only kernel=2, stride=2 pooling is supported")
        self._idx = None
        self._in_shape = None

    def forward(self, x, train=True):
        n, c, h, w = x.shape
        if h < 2 or w < 2:
            raise DimensionError(f"maxpool2d input spatial dims {h}x{w} smaller than 2x2 kernel")
        ho, wo = h // 2, w // 2
        x6 = x[:, :, :ho * 2, :wo * 2].reshape(n, c, ho, 2, wo, 2)
        cells = (x6[:, :, :, 0, :, 0], x6[:, :, :, 0, :, 1],
                 x6[:, :, :, 1, :, 0], x6[:, :, :, 1, :, 1])
        out = np.maximum(np.maximum(cells[0], cells[1]),
                         np.maximum(cells[2], cells[3]))
        # first max in row-major window order wins (nested where keeps the
        # earliest cell that attains the max)
        idx = np.where(cells[0] == out, 0,
                       np.where(cells[1] == out, 1,
                                np.where(cells[2] == out, 2, 3))).astype(np.int8)
        self._idx = idx
        self._in_shape = x.shape
        return out

    def backward(self, dout):
        n, c, h, w = self._in_shape
        ho, wo = h // 2, w // 2
        dx6 = np.zeros((n, c, ho, 2, wo, 2), dtype=dout.dtype)
        for cell in range(4):
            dx6[:, :, :, cell // 2, :, cell % 2] = dout * (self._idx == cell)
        dx_t = dx6.reshape(n, c, ho * 2, wo * 2)
        if ho * 2 != h or wo * 2 != w:
            dx = np.zeros(self._in_shape, dtype=dout.dtype)
            dx[:, :, :ho * 2, :wo * 2] = dx_t
            return dx
        return dx_t


class BatchNorm(Layer):
    """Batch normalization over the channel axis for 2-d or 4-d inputs."""

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1,
                 name: str = "bn", dtype=np.float32):
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.scale = Tensor(np.ones(channels, dtype=dtype), name=f"{name}.scale", with_grad=True)
        self.shift = Tensor(np.zeros(channels, dtype=dtype), name=f"{name}.shift", with_grad=True)
        self.running_mean = Tensor(np.zeros(channels, dtype=dtype), name=f"{name}.running_mean")
        self.running_var = Tensor(np.ones(channels, dtype=dtype), name=f"{name}.running_var")
        self._cache = None

    def params(self):
        return [self.scale, self.shift]

    def state(self):
        return [self.running_mean, self.running_var]

    def astype(self, dtype):
        super().astype(dtype)
        for t in self.state():
            t.data = t.data.astype(dtype)

    def _axes_and_view(self, x):
        if x.ndim == 4:
            return (0, 2, 3), (1, -1, 1, 1)
        if x.ndim == 2:
            return (0,), (1, -1)
        raise DimensionError(f"batchnorm expects 2-d or 4-d input, got {x.ndim}-d")

    def forward(self, x, train=True):
        axes, view = self._axes_and_view(x)
        if x.shape[1] != self.channels:
            raise DimensionError(
                f"batchnorm channel axis mismatch: input has {x.shape[1]}, expected {self.channels}")
        if train:
            if x.shape[0] < 2:
                raise DegenerateBatchError("train-mode batchnorm needs batch size >= 2")
            m = float(np.prod([x.shape[a] for a in axes]))
            mean = x.mean(axis=axes)
            spec = "nchw,nchw->c" if x.ndim == 4 else "nc,nc->c"
            var = np.maximum(np.einsum(spec, x, x) / m - mean * mean, 0.0)
            m = self.momentum
            self.running_mean.data = ((1 - m) * self.running_mean.data + m * mean).astype(x.dtype)
            self.running_var.data = ((1 - m) * self.running_var.data + m * var).astype(x.dtype)
        else:
            mean = self.running_mean.data
            var = self.running_var.data
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean.reshape(view)) * inv_std.reshape(view)
        self._cache = (xhat, inv_std, axes, view, train)
        return xhat * self.scale.data.reshape(view) + self.shift.data.reshape(view)

    def backward(self, dout):
        xhat, inv_std, axes, view, train = self._cache
        self.scale.grad = (dout * xhat).sum(axis=axes)
        self.shift.grad = dout.sum(axis=axes)
        dxhat = dout * self.scale.data.reshape(view)
        if not train:
            return dxhat * inv_std.reshape(view)
        m = float(np.prod([xhat.shape[a] for a in axes]))
        s1 = dxhat.sum(axis=axes, keepdims=True)
        s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
        return (inv_std.reshape(view) / m) * (m * dxhat - s1 - xhat * s2)


class Linear(Layer):
    """Affine map: y = x @ W.T + b."""

    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator | None = None, name: str = "linear",
                 dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Tensor(_uniform_fan_in(rng, (out_features, in_features), in_features, dtype),
                             name=f"{name}.weight", with_grad=True)
        self.bias = Tensor(_uniform_fan_in(rng, (out_features,), in_features, dtype),
                           name=f"{name}.bias", with_grad=True)
        self._x = None

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x, train=True):
        if x.ndim != 2:
            raise DimensionError(f"linear expects 2-d input [N,F], got {x.ndim}-d")
        if x.shape[1] != self.in_features:
            raise DimensionError(
                f"linear inner-dimension mismatch: input has {x.shape[1]}, weights expect {self.in_features}")
        self._x = x
        return x @ self.weight.data.T + self.bias.data

    def backward(self, dout):
        self.weight.grad = dout.T @ self._x
        self.bias.grad = dout.sum(axis=0)
        return dout @ self.weight.data


class ReLU(Layer):
    def forward(self, x, train=True):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dout):
        return dout * self._mask


class Sigmoid(Layer):
    """Logistic activation; output clamped to [1e-7, 1-1e-7] for log-loss stability."""

    def forward(self, x, train=True):
        y = 1.0 / (1.0 + np.exp(-x))
        y = np.clip(y, SIGMOID_CLAMP, 1.0 - SIGMOID_CLAMP)
        self._y = y
        return y

    def backward(self, dout):
        return dout * self._y * (1.0 - self._y)


class Flatten(Layer):
    """Row-major reshape [N,C,H,W] -> [N, C*H*W]."""

    def forward(self, x, train=True):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._shape)
