"""Minimal neural-network core with fully explicit forward/backward passes.

Layers follow a small duck-typed protocol:

* ``forward(x, train=True)`` returns the output and caches what backward needs,
* ``backward(dy)`` returns the input gradient and fills the layer's parameter
  gradients,
* ``params()`` / ``grads()`` expose learnables and their gradients as parallel
  lists of float64 arrays (mutated in place by the optimizer),
* ``clone()`` deep-copies parameters and state but never caches.

Everything is plain numpy in float64; there is no autodiff graph.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .tensor import as_tensor, require_ndim

__all__ = [
    "DenseLayer",
    "Conv2dLayer",
    "ReluLayer",
    "FlattenLayer",
    "ResidualBlock",
    "Model",
    "LossValue",
    "softmax_cross_entropy",
]


def _uniform_fan_in(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class DenseLayer:
    """Affine map y = x W^T + b with weight shape [out, in]."""

    def __init__(self, weight, bias):
        self.weight = as_tensor(weight)
        self.bias = as_tensor(bias)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError("dense layer needs weight [out, in] and bias [out]")
        self.dweight = np.zeros_like(self.weight)
        self.dbias = np.zeros_like(self.bias)
        self._x = None

    @classmethod
    def init(cls, in_features: int, out_features: int, rng: np.random.Generator):
        """Seeded uniform init scaled by 1/sqrt(fan_in); zero bias."""
        w = _uniform_fan_in(rng, in_features, (out_features, in_features))
        return cls(w, np.zeros(out_features))

    def forward(self, x, train=True):
        require_ndim(x, 2, "dense input")
        if x.shape[1] != self.weight.shape[1]:
            raise ShapeError(
                f"dense input has {x.shape[1]} features, weight expects {self.weight.shape[1]}"
            )
        self._x = x
        return x @ self.weight.T + self.bias

    def backward(self, dy):
        if self._x is None:
            raise ShapeError("dense backward called before forward")
        if dy.shape != (self._x.shape[0], self.weight.shape[0]):
            raise ShapeError(f"dense upstream gradient has shape {dy.shape}")
        self.dweight += dy.T @ self._x
        self.dbias += dy.sum(axis=0)
        return dy @ self.weight

    def params(self):
        return [self.weight, self.bias]

    def grads(self):
        return [self.dweight, self.dbias]

    def zero_grads(self):
        self.dweight[...] = 0.0
        self.dbias[...] = 0.0

    def clone(self):
        return DenseLayer(self.weight.copy(), self.bias.copy())


class Conv2dLayer:
    """2-d cross-correlation with zero padding; kernel shape [outC, inC, kH, kW]."""

    def __init__(self, kernel, bias, stride=1, padding=0):
        self.kernel = as_tensor(kernel)
        self.bias = as_tensor(bias)
        if self.kernel.ndim != 4 or self.bias.shape != (self.kernel.shape[0],):
            raise ShapeError("conv layer needs kernel [outC, inC, kH, kW] and bias [outC]")
        if stride < 1 or padding < 0:
            raise ShapeError("conv stride must be >= 1 and padding >= 0")
        self.stride = int(stride)
        self.padding = int(padding)
        self.dkernel = np.zeros_like(self.kernel)
        self.dbias = np.zeros_like(self.bias)
        self._x_padded = None
        self._x_shape = None

    @classmethod
    def init(cls, in_channels, out_channels, kernel_size, rng, stride=1, padding=0):
        fan_in = in_channels * kernel_size * kernel_size
        k = _uniform_fan_in(rng, fan_in, (out_channels, in_channels, kernel_size, kernel_size))
        return cls(k, np.zeros(out_channels), stride=stride, padding=padding)

    def _out_extent(self, size, k):
        return (size + 2 * self.padding - k) // self.stride + 1

    def forward(self, x, train=True):
        require_ndim(x, 4, "conv input")
        n, c, h, w = x.shape
        oc, ic, kh, kw = self.kernel.shape
        if c != ic:
            raise ShapeError(f"conv input has {c} channels, kernel expects {ic}")
        oh, ow = self._out_extent(h, kh), self._out_extent(w, kw)
        if oh < 1 or ow < 1:
            raise ShapeError(f"conv output extent {oh}x{ow} is empty for input {h}x{w}")
        p = self.padding
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        self._x_padded = xp
        self._x_shape = x.shape
        s = self.stride
        y = np.zeros((n, oc, oh, ow))
        for i in range(kh):
            for j in range(kw):
                window = xp[:, :, i : i + s * oh : s, j : j + s * ow : s]
                y += np.einsum("oi,nihw->nohw", self.kernel[:, :, i, j], window)
        return y + self.bias[None, :, None, None]

    def backward(self, dy):
        if self._x_padded is None:
            raise ShapeError("conv backward called before forward")
        xp = self._x_padded
        n, c, h, w = self._x_shape
        oc, ic, kh, kw = self.kernel.shape
        oh, ow = self._out_extent(h, kh), self._out_extent(w, kw)
        if dy.shape != (n, oc, oh, ow):
            raise ShapeError(f"conv upstream gradient has shape {dy.shape}")
        s, p = self.stride, self.padding
        self.dbias += dy.sum(axis=(0, 2, 3))
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                window = xp[:, :, i : i + s * oh : s, j : j + s * ow : s]
                self.dkernel[:, :, i, j] += np.einsum("nohw,nihw->oi", dy, window)
                dxp[:, :, i : i + s * oh : s, j : j + s * ow : s] += np.einsum(
                    "oi,nohw->nihw", self.kernel[:, :, i, j], dy
                )
        return dxp[:, :, p : p + h, p : p + w] if p else dxp

    def params(self):
        return [self.kernel, self.bias]

    def grads(self):
        return [self.dkernel, self.dbias]

    def zero_grads(self):
        self.dkernel[...] = 0.0
        self.dbias[...] = 0.0

    def clone(self):
        return Conv2dLayer(self.kernel.copy(), self.bias.copy(), self.stride, self.padding)


class ReluLayer:
    """y = max(x, 0); the subgradient at exactly 0 is taken as 0."""

    def __init__(self):
        self._mask = None

    def forward(self, x, train=True):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, dy):
        if self._mask is None:
            raise ShapeError("relu backward called before forward")
        return np.where(self._mask, dy, 0.0)

    def params(self):
        return []

    def grads(self):
        return []

    def zero_grads(self):
        pass

    def clone(self):
        return ReluLayer()


class FlattenLayer:
    """Collapse all but the batch dimension."""

    def __init__(self):
        self._shape = None

    def forward(self, x, train=True):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        if self._shape is None:
            raise ShapeError("flatten backward called before forward")
        return dy.reshape(self._shape)

    def params(self):
        return []

    def grads(self):
        return []

    def zero_grads(self):
        pass

    def clone(self):
        return FlattenLayer()


class ResidualBlock:
    """Element-wise skip connection: y = x + body(x).

    The body is an ordered layer list whose output shape must equal its input
    shape.  Enough to assemble a tiny residual CNN; not a full ResNet replica.
    """

    def __init__(self, body):
        self.body = list(body)

    def forward(self, x, train=True):
        y = x
        for layer in self.body:
            y = layer.forward(y, train=train)
        if y.shape != x.shape:
            raise ShapeError(f"residual body maps {x.shape} to {y.shape}; shapes must match")
        return x + y

    def backward(self, dy):
        dbody = dy
        for layer in reversed(self.body):
            dbody = layer.backward(dbody)
        return dy + dbody

    def params(self):
        return [p for layer in self.body for p in layer.params()]

    def grads(self):
        return [g for layer in self.body for g in layer.grads()]

    def zero_grads(self):
        for layer in self.body:
            layer.zero_grads()

    def clone(self):
        return ResidualBlock([layer.clone() for layer in self.body])


class Model:
    """Ordered layer list with flat parameter access.

    Parameters and gradients are exposed as parallel flat lists so the
    optimizer and the federated aggregation can address them by index.
    """

    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x, train=True):
        y = as_tensor(x)
        for layer in self.layers:
            y = layer.forward(y, train=train)
        return y

    def backward(self, dy):
        """Propagate an output gradient back to the input; fills param grads."""
        dx = dy
        for layer in reversed(self.layers):
            dx = layer.backward(dx)
        return dx

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def grads(self):
        return [g for layer in self.layers for g in layer.grads()]

    def zero_grads(self):
        for layer in self.layers:
            layer.zero_grads()

    def parameter_count(self) -> int:
        """Total number of learnable floats."""
        return sum(p.size for p in self.params())

    def trainable_mask(self):
        """Per-parameter flags; False where a layer currently pins a learnable
        (e.g. a frozen normalization layer with fixed affine)."""
        mask = []
        for layer in self.iter_layers():
            own = len(layer.params()) if not isinstance(layer, (ResidualBlock, Model)) else 0
            if own:
                pinned = bool(getattr(layer, "affine_pinned", lambda: False)())
                mask.extend([not pinned] * own)
        return mask

    def iter_layers(self):
        """All layers depth-first, descending into residual bodies."""
        stack = list(reversed(self.layers))
        while stack:
            layer = stack.pop()
            yield layer
            if isinstance(layer, ResidualBlock):
                stack.extend(reversed(layer.body))

    def norm_stat_layers(self):
        """Layers that carry running normalization statistics."""
        return [l for l in self.iter_layers() if hasattr(l, "running_mean")]

    def clone(self):
        return Model([layer.clone() for layer in self.layers])


@dataclass
class LossValue:
    """Scalar loss and its gradient w.r.t. the logits."""

    loss: float
    grad: np.ndarray


def softmax_cross_entropy(logits, labels) -> LossValue:
    """Mean negative log-softmax of the true class.

    The returned gradient is (softmax - onehot) / N, so each row sums to zero.
    """
    logits = as_tensor(logits)
    require_ndim(logits, 2, "logits")
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels must have shape ({n},), got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ShapeError(f"labels must lie in [0, {k})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    loss = float(-log_probs[np.arange(n), labels].mean())
    grad = np.exp(log_probs)
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return LossValue(loss, grad)
