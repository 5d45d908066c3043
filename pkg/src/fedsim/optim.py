"""Heavy-ball SGD and its velocity buffer.

Update rule (weight decay folded into the raw gradient before the velocity
update): v <- m*v + (g + wd*theta); theta <- theta - lr*v.  With m=0 and wd=0
this reduces exactly to theta - lr*g.
"""

import numpy as np

from .errors import ShapeError


class MomentumBuffer:
    """One velocity array per learnable parameter, shape-congruent."""

    def __init__(self, velocities):
        self.velocities = list(velocities)

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(p) for p in params])

    def clone(self):
        return MomentumBuffer([v.copy() for v in self.velocities])

    def float_count(self) -> int:
        return sum(v.size for v in self.velocities)

    def check_congruent(self, params):
        if len(self.velocities) != len(params) or any(
            v.shape != p.shape for v, p in zip(self.velocities, params)
        ):
            raise ShapeError("momentum buffer is not shape-congruent with the parameter set")


def sgd_step(params, grads, momentum: MomentumBuffer, lr, momentum_coef=0.0,
             weight_decay=0.0, trainable=None):
    """One in-place heavy-ball step over parallel param/grad lists.

    ``trainable`` optionally masks out parameters that are pinned (their
    velocity is left untouched as well).
    """
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    if len(params) != len(grads):
        raise ShapeError("params and grads must be parallel lists")
    momentum.check_congruent(params)
    if trainable is None:
        trainable = [True] * len(params)
    for p, g, v, on in zip(params, grads, momentum.velocities, trainable):
        if not on:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        np.multiply(v, momentum_coef, out=v)
        v += g
        if weight_decay:
            v += weight_decay * p
        p -= lr * v
