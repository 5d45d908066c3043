"""Batch and group normalization with hand-written forward/backward math.

Batch normalization in train mode normalizes by per-channel mini-batch
statistics (biased variance over batch and spatial dims jointly),

    y = gamma * (x - mu_B) / sqrt(var_B + eps) + beta,

while accumulating running statistics by exponential moving average,

    mu  <- alpha*mu  + (1-alpha)*mu_B,
    var <- alpha*var + (1-alpha)*var_B.

In eval mode the running statistics replace the mini-batch ones.  A layer can
be frozen: its running statistics are overwritten once and used for all later
normalization, train and test alike, and the EMA never runs again.  The
freeze is permanent (mode transitions only TRAIN -> FROZEN_EVAL).

Group normalization operates per data instance over channel groups; group
count 1 gives layer norm, group count C gives instance norm.
"""

import enum
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateVarianceError, ModeError, ShapeError
from .tensor import as_tensor

__all__ = [
    "NormMode",
    "BnForwardCache",
    "BatchNormLayer",
    "GroupNormLayer",
    "bn_forward_train",
    "bn_forward_eval",
    "bn_backward_train",
    "bn_backward_eval",
    "freeze",
]


class NormMode(enum.Enum):
    TRAIN = "train"
    FROZEN_EVAL = "frozen_eval"


@dataclass
class BnForwardCache:
    """Transient per-forward quantities needed by the train-mode backward."""

    batch_mean: np.ndarray
    batch_var: np.ndarray
    x_hat: np.ndarray
    batch_count: int  # elements per channel: N * spatial size


def _check_channels(x, channels, what):
    if x.ndim < 2:
        raise ShapeError(f"{what}: input must be at least 2-d (batch, channels, ...)")
    if x.shape[1] != channels:
        raise ShapeError(f"{what}: input has {x.shape[1]} channels, layer expects {channels}")


def _channel_shape(x):
    """Broadcast shape putting a per-channel vector on axis 1."""
    return (1, x.shape[1]) + (1,) * (x.ndim - 2)


def _reduce_axes(x):
    return (0,) + tuple(range(2, x.ndim))


class BatchNormLayer:
    """Per-channel batch normalization state: learnable affine, running
    statistics, EMA factor, epsilon, and train/frozen mode."""

    def __init__(self, channels, ema_alpha=0.9, eps=1e-5, fix_affine=False):
        if not 0.0 <= ema_alpha < 1.0:
            raise ValueError(f"ema_alpha must lie in [0, 1), got {ema_alpha}")
        if eps < 0.0:
            raise ValueError(f"eps must be non-negative, got {eps}")
        self.channels = int(channels)
        self.gamma = np.ones(self.channels)
        self.beta = np.zeros(self.channels)
        self.running_mean = np.zeros(self.channels)
        self.running_var = np.ones(self.channels)
        self.ema_alpha = float(ema_alpha)
        self.eps = float(eps)
        self.mode = NormMode.TRAIN
        self.fix_affine = bool(fix_affine)
        self.dgamma = np.zeros(self.channels)
        self.dbeta = np.zeros(self.channels)
        # (mean, var) the layer last normalized a training batch with;
        # feeds the statistic-deviation diagnostics.
        self.last_batch_stats = None
        self._cache = None
        self._eval_x = None

    @property
    def frozen(self) -> bool:
        return self.mode is NormMode.FROZEN_EVAL

    def affine_pinned(self) -> bool:
        return self.frozen and self.fix_affine

    def forward(self, x, train=True):
        _check_channels(x, self.channels, "batchnorm")
        if train and self.mode is NormMode.TRAIN:
            y, cache = bn_forward_train(self, x)
            self._cache = cache
            self._eval_x = None
            self.last_batch_stats = (cache.batch_mean.copy(), cache.batch_var.copy())
        else:
            y = bn_forward_eval(self, x)
            self._cache = None
            self._eval_x = x
            if train:
                # frozen local training: normalization uses the fixed stats
                self.last_batch_stats = (self.running_mean.copy(), self.running_var.copy())
        return y

    def backward(self, dy):
        if self._cache is not None:
            dx, dgamma, dbeta = bn_backward_train(self, self._cache, dy)
        elif self._eval_x is not None:
            dx, dgamma, dbeta = bn_backward_eval(self, self._eval_x, dy)
        else:
            raise ShapeError("batchnorm backward called before forward")
        self.dgamma += dgamma
        self.dbeta += dbeta
        return dx

    def params(self):
        return [self.gamma, self.beta]

    def grads(self):
        return [self.dgamma, self.dbeta]

    def zero_grads(self):
        self.dgamma[...] = 0.0
        self.dbeta[...] = 0.0

    def stats(self):
        return self.running_mean, self.running_var

    def clone(self):
        other = BatchNormLayer(self.channels, self.ema_alpha, self.eps, self.fix_affine)
        other.gamma = self.gamma.copy()
        other.beta = self.beta.copy()
        other.running_mean = self.running_mean.copy()
        other.running_var = self.running_var.copy()
        other.mode = self.mode
        return other


def bn_forward_train(layer: BatchNormLayer, x):
    """Train-mode forward: normalize by mini-batch statistics, update the EMA.

    Returns the output and the cache consumed by ``bn_backward_train``.
    """
    if layer.mode is not NormMode.TRAIN:
        raise ModeError("train-mode forward on a frozen normalization layer")
    _check_channels(x, layer.channels, "batchnorm")
    axes = _reduce_axes(x)
    count = x.size // layer.channels
    if count < 2 and layer.eps == 0.0:
        raise DegenerateVarianceError(
            "effective batch of one element with eps=0 cannot be normalized"
        )
    bshape = _channel_shape(x)
    batch_mean = x.mean(axis=axes)
    batch_var = x.var(axis=axes)  # biased
    inv_std = 1.0 / np.sqrt(batch_var + layer.eps)
    x_hat = (x - batch_mean.reshape(bshape)) * inv_std.reshape(bshape)
    y = layer.gamma.reshape(bshape) * x_hat + layer.beta.reshape(bshape)
    a = layer.ema_alpha
    layer.running_mean[...] = a * layer.running_mean + (1.0 - a) * batch_mean
    layer.running_var[...] = a * layer.running_var + (1.0 - a) * batch_var
    return y, BnForwardCache(batch_mean, batch_var, x_hat, count)


def bn_forward_eval(layer: BatchNormLayer, x):
    """Normalize by the running (or frozen) statistics; never mutates state."""
    _check_channels(x, layer.channels, "batchnorm")
    bshape = _channel_shape(x)
    inv_std = 1.0 / np.sqrt(layer.running_var + layer.eps)
    x_hat = (x - layer.running_mean.reshape(bshape)) * inv_std.reshape(bshape)
    return layer.gamma.reshape(bshape) * x_hat + layer.beta.reshape(bshape)


def bn_backward_train(layer: BatchNormLayer, cache: BnForwardCache, dy):
    """Backward through the mini-batch statistics.

    With dxh = gamma * dy and B the elements per channel:

        dx = (B*dxh - sum_j dxh_j - x_hat * sum_j(dxh_j * x_hat_j))
             / (B * sqrt(var_B + eps))

    The sums couple every sample to its mini-batch peers.
    """
    if dy.shape != cache.x_hat.shape:
        raise ShapeError(
            f"upstream gradient shape {dy.shape} does not match cached forward "
            f"{cache.x_hat.shape}; stale cache?"
        )
    axes = _reduce_axes(dy)
    bshape = _channel_shape(dy)
    inv_std = 1.0 / np.sqrt(cache.batch_var + layer.eps)
    dx_hat = layer.gamma.reshape(bshape) * dy
    sum_dx_hat = dx_hat.sum(axis=axes)
    sum_dx_hat_x_hat = (dx_hat * cache.x_hat).sum(axis=axes)
    count = cache.batch_count
    dx = (
        count * dx_hat
        - sum_dx_hat.reshape(bshape)
        - cache.x_hat * sum_dx_hat_x_hat.reshape(bshape)
    ) * (inv_std.reshape(bshape) / count)
    dgamma = (dy * cache.x_hat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    return dx, dgamma, dbeta


def bn_backward_eval(layer: BatchNormLayer, x, dy):
    """Backward through fixed statistics: dx = gamma * dy / sqrt(var + eps).

    Per-sample and independent of mini-batch composition.
    """
    if dy.shape != x.shape:
        raise ShapeError(f"upstream gradient shape {dy.shape} does not match input {x.shape}")
    axes = _reduce_axes(x)
    bshape = _channel_shape(x)
    inv_std = 1.0 / np.sqrt(layer.running_var + layer.eps)
    x_hat = (x - layer.running_mean.reshape(bshape)) * inv_std.reshape(bshape)
    dx = layer.gamma.reshape(bshape) * dy * inv_std.reshape(bshape)
    dgamma = (dy * x_hat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    return dx, dgamma, dbeta


def freeze(layer: BatchNormLayer, frozen_stats):
    """Overwrite running statistics and pin the layer in frozen-eval mode.

    Freezing twice signals a schedule bug and raises.
    """
    if layer.frozen:
        raise ModeError("normalization layer is already frozen")
    mean, var = frozen_stats
    mean = as_tensor(mean)
    var = as_tensor(var)
    if mean.shape != (layer.channels,) or var.shape != (layer.channels,):
        raise ShapeError("frozen statistics must be per-channel vectors")
    if np.any(var < 0.0):
        raise ValueError("frozen variance must be non-negative")
    layer.running_mean[...] = mean
    layer.running_var[...] = var
    layer.mode = NormMode.FROZEN_EVAL


class GroupNormLayer:
    """Per-instance normalization over channel groups with per-channel affine.

    group_count=1 normalizes over all channels of an instance (layer norm);
    group_count=channels normalizes each channel separately (instance norm).
    """

    def __init__(self, channels, group_count, eps=1e-5):
        channels, group_count = int(channels), int(group_count)
        if group_count < 1 or channels % group_count != 0:
            raise ShapeError(
                f"channel count {channels} is not divisible by group count {group_count}"
            )
        self.channels = channels
        self.group_count = group_count
        self.eps = float(eps)
        self.gamma = np.ones(channels)
        self.beta = np.zeros(channels)
        self.dgamma = np.zeros(channels)
        self.dbeta = np.zeros(channels)
        self._cache = None

    @classmethod
    def layer_norm(cls, channels, eps=1e-5):
        return cls(channels, 1, eps=eps)

    @classmethod
    def instance_norm(cls, channels, eps=1e-5):
        return cls(channels, channels, eps=eps)

    def forward(self, x, train=True):
        _check_channels(x, self.channels, "groupnorm")
        n = x.shape[0]
        grouped = x.reshape(n, self.group_count, -1)
        mean = grouped.mean(axis=2, keepdims=True)
        var = grouped.var(axis=2, keepdims=True)  # biased
        inv_std = 1.0 / np.sqrt(var + self.eps)
        x_hat_g = (grouped - mean) * inv_std
        x_hat = x_hat_g.reshape(x.shape)
        bshape = _channel_shape(x)
        self._cache = (x_hat_g, inv_std, x.shape)
        return self.gamma.reshape(bshape) * x_hat + self.beta.reshape(bshape)

    def backward(self, dy):
        if self._cache is None:
            raise ShapeError("groupnorm backward called before forward")
        x_hat_g, inv_std, x_shape = self._cache
        if dy.shape != x_shape:
            raise ShapeError(f"upstream gradient shape {dy.shape} does not match {x_shape}")
        axes = _reduce_axes(dy)
        bshape = _channel_shape(dy)
        x_hat = x_hat_g.reshape(x_shape)
        self.dgamma += (dy * x_hat).sum(axis=axes)
        self.dbeta += dy.sum(axis=axes)
        dx_hat_g = (self.gamma.reshape(bshape) * dy).reshape(x_hat_g.shape)
        k = x_hat_g.shape[2]  # elements per group
        s1 = dx_hat_g.sum(axis=2, keepdims=True)
        s2 = (dx_hat_g * x_hat_g).sum(axis=2, keepdims=True)
        dx_g = (k * dx_hat_g - s1 - x_hat_g * s2) * (inv_std / k)
        return dx_g.reshape(x_shape)

    def params(self):
        return [self.gamma, self.beta]

    def grads(self):
        return [self.dgamma, self.dbeta]

    def zero_grads(self):
        self.dgamma[...] = 0.0
        self.dbeta[...] = 0.0

    def clone(self):
        other = GroupNormLayer(self.channels, self.group_count, self.eps)
        other.gamma = self.gamma.copy()
        other.beta = self.beta.copy()
        return other
