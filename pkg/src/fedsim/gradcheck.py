"""Central finite-difference gradient oracle and a per-layer check suite.

The oracle perturbs parameters coordinate-by-coordinate and never goes
through any backward implementation, so it stays independent of the code it
verifies.
"""

import numpy as np

from .nn import (
    Conv2dLayer,
    DenseLayer,
    FlattenLayer,
    Model,
    ReluLayer,
    ResidualBlock,
    softmax_cross_entropy,
)
from .normalization import BatchNormLayer, GroupNormLayer
from .seeding import derive_rng

__all__ = ["finite_difference_grad", "relative_error", "check_model_layers", "GRADCHECK_TOLERANCE"]

GRADCHECK_TOLERANCE = 1e-5


def finite_difference_grad(f, params, h=1e-5):
    """Central differences (f(p+h*e) - f(p-h*e)) / 2h per coordinate.

    ``f`` is a zero-argument scalar function evaluated after the arrays in
    ``params`` are perturbed in place; they are restored afterwards.
    """
    grads = []
    for p in params:
        g = np.zeros_like(p)
        flat_p = p.reshape(-1)
        flat_g = g.reshape(-1)
        for i in range(flat_p.size):
            orig = flat_p[i]
            flat_p[i] = orig + h
            f_plus = f()
            flat_p[i] = orig - h
            f_minus = f()
            flat_p[i] = orig
            flat_g[i] = (f_plus - f_minus) / (2.0 * h)
        grads.append(g)
    return grads


def relative_error(analytic, numeric) -> float:
    """Max elementwise |a - n| / (|a| + |n| + 1e-8) over a list of arrays."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.abs(a) + np.abs(n) + 1e-8
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def _check_case(model: Model, x, labels, h=1e-5, check_input=True):
    """Compare backward grads of a model (params and input) with the oracle."""

    def loss_fn():
        return softmax_cross_entropy(model.forward(x.copy(), train=True), labels).loss

    model.zero_grads()
    out = model.forward(x.copy(), train=True)
    lv = softmax_cross_entropy(out, labels)
    dx = model.backward(lv.grad)

    params = model.params()
    numeric = finite_difference_grad(loss_fn, params, h=h)
    err = relative_error(model.grads(), numeric)
    if check_input:
        numeric_dx = finite_difference_grad(loss_fn, [x], h=h)
        err = max(err, relative_error([dx], numeric_dx))
    return err


def _head(width, classes, rng):
    return DenseLayer.init(width, classes, rng)


def _cases(seed):
    """Small random instances for every backward implementation."""
    rng = derive_rng(seed, "gradcheck")

    def dense(r):
        model = Model([DenseLayer.init(4, 3, r)])
        return model, r.normal(size=(5, 4)), r.integers(0, 3, size=5)

    def conv(r):
        model = Model([
            Conv2dLayer.init(2, 3, 3, r, stride=1, padding=1),
            FlattenLayer(),
            _head(3 * 4 * 4, 3, r),
        ])
        return model, r.normal(size=(2, 2, 4, 4)), r.integers(0, 3, size=2)

    def conv_strided(r):
        model = Model([
            Conv2dLayer.init(1, 2, 3, r, stride=2, padding=0),
            FlattenLayer(),
            _head(2 * 2 * 2, 2, r),
        ])
        return model, r.normal(size=(2, 1, 5, 5)), r.integers(0, 2, size=2)

    def relu(r):
        dense = DenseLayer.init(4, 4, r)
        model = Model([dense, ReluLayer(), _head(4, 3, r)])
        # resample until pre-activations clear the kink at 0, so central
        # differences never straddle it
        while True:
            x = r.normal(size=(5, 4))
            if np.min(np.abs(dense.forward(x))) > 5e-3:
                break
        return model, x, r.integers(0, 3, size=5)

    def cross_entropy(r):
        model = Model([DenseLayer.init(3, 4, r)])
        return model, r.normal(size=(6, 3)), r.integers(0, 4, size=6)

    def bn_train(r):
        model = Model([DenseLayer.init(4, 3, r), BatchNormLayer(3), _head(3, 2, r)])
        return model, r.normal(size=(6, 4)), r.integers(0, 2, size=6)

    def bn_train_conv(r):
        model = Model([
            Conv2dLayer.init(1, 2, 3, r, padding=1),
            BatchNormLayer(2),
            FlattenLayer(),
            _head(2 * 3 * 3, 2, r),
        ])
        return model, r.normal(size=(3, 1, 3, 3)), r.integers(0, 2, size=3)

    def bn_frozen(r):
        bn = BatchNormLayer(3)
        bn.freeze((r.normal(size=3), r.uniform(0.5, 1.5, size=3)))
        model = Model([DenseLayer.init(4, 3, r), bn, _head(3, 2, r)])
        return model, r.normal(size=(5, 4)), r.integers(0, 2, size=5)

    def gn(r):
        model = Model([DenseLayer.init(4, 6, r), GroupNormLayer(6, 2), _head(6, 3, r)])
        return model, r.normal(size=(4, 4)), r.integers(0, 3, size=4)

    def ln(r):
        model = Model([DenseLayer.init(4, 6, r), GroupNormLayer(6, 1), _head(6, 3, r)])
        return model, r.normal(size=(4, 4)), r.integers(0, 3, size=4)

    def instance_norm(r):
        model = Model([
            Conv2dLayer.init(1, 4, 3, r, padding=1),
            GroupNormLayer(4, 4),
            FlattenLayer(),
            _head(4 * 3 * 3, 2, r),
        ])
        return model, r.normal(size=(2, 1, 3, 3)), r.integers(0, 2, size=2)

    def residual(r):
        inner = DenseLayer.init(4, 4, r)
        block = ResidualBlock([inner, ReluLayer()])
        stem = DenseLayer.init(3, 4, r)
        model = Model([stem, block, _head(4, 2, r)])
        while True:
            x = r.normal(size=(4, 3))
            if np.min(np.abs(inner.forward(stem.forward(x)))) > 5e-3:
                break
        return model, x, r.integers(0, 2, size=4)

    builders = {
        "dense": dense,
        "conv2d": conv,
        "conv2d_strided": conv_strided,
        "relu": relu,
        "cross_entropy": cross_entropy,
        "batchnorm_train": bn_train,
        "batchnorm_train_conv": bn_train_conv,
        "batchnorm_frozen": bn_frozen,
        "groupnorm": gn,
        "layernorm": ln,
        "instancenorm": instance_norm,
        "residual": residual,
    }
    return rng, builders


def check_model_layers(seed=0, instances=20, tolerance=GRADCHECK_TOLERANCE, h=1e-5):
    """Run the finite-difference suite; returns {case: worst relative error}."""
    rng, builders = _cases(seed)
    results = {}
    for name, build in builders.items():
        worst = 0.0
        for _ in range(instances):
            model, x, labels = build(rng)
            worst = max(worst, _check_case(model, x, labels, h=h))
        results[name] = worst
    return results
