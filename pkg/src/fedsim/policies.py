"""Two-stage statistic freezing and cross-round momentum regimes.

The freeze policy splits training into an exploration stage (normal batch
normalization with the EMA running) and a calibration stage in which every
normalization layer's running statistics are snapshot once and used, frozen,
for all later local training and testing.  The switch round can be a fixed
fraction of the schedule, a fixed round, or data-driven: freeze once the
windowed variance of the per-round statistic-deviation signal falls below a
threshold.  Triggering is latched; a freeze is never undone.

Momentum regimes control what the velocity buffer looks like at the start of
each local round: re-initialized to zero, carried per client across rounds,
or aggregated on the server and broadcast back (at the cost of doubling the
parameter message).
"""

import enum
import math
from dataclasses import dataclass, field

from .diagnostics import windowed_variance
from .errors import ModeError
from .normalization import freeze
from .optim import MomentumBuffer

__all__ = [
    "MomentumMode",
    "FixBnKind",
    "FixBnPolicy",
    "should_freeze",
    "enter_stage_two",
    "momentum_for_round",
    "aggregate_momentum",
]


class MomentumMode(enum.Enum):
    REINIT = "reinit"
    LOCAL_MAINTAINED = "local"
    GLOBAL_MAINTAINED = "global"


class FixBnKind(enum.Enum):
    OFF = "off"
    FIXED_FRACTION = "fixed_fraction"
    FIXED_ROUND = "fixed_round"
    SLIDING_WINDOW = "sliding_window"


@dataclass
class FixBnPolicy:
    """Freeze-round selection policy.

    fixed_fraction: freeze for rounds t > ceil(fraction * T).
    fixed_round:    freeze for rounds t > round.
    sliding_window: freeze once the trailing-window population variance of the
                    observed deviation signal drops below the threshold.
    """

    kind: FixBnKind = FixBnKind.OFF
    fraction: float = 0.5
    round: int = 1
    window: int = 20
    threshold: float = 1e-4
    triggered: bool = field(default=False)
    history: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind is FixBnKind.FIXED_FRACTION and not 0.0 < self.fraction < 1.0:
            raise ValueError(f"fraction must lie in (0, 1), got {self.fraction}")
        if self.kind is FixBnKind.FIXED_ROUND and self.round < 1:
            raise ValueError(f"round must be >= 1, got {self.round}")
        if self.kind is FixBnKind.SLIDING_WINDOW:
            if self.window < 2:
                raise ValueError(f"window must be >= 2, got {self.window}")
            if self.threshold <= 0.0:
                raise ValueError(f"threshold must be > 0, got {self.threshold}")

    def observe(self, deviation: float) -> None:
        """Record one round's deviation signal (sliding-window evidence).

        Keeps only the trailing window; latches once the windowed variance
        falls below the threshold.
        """
        self.history.append(float(deviation))
        if len(self.history) > self.window:
            del self.history[: len(self.history) - self.window]
        if self.kind is FixBnKind.SLIDING_WINDOW and not self.triggered:
            var = windowed_variance(self.history, self.window)
            if var is not None and var < self.threshold:
                self.triggered = True


def should_freeze(policy: FixBnPolicy, t: int, total_rounds: int) -> bool:
    """Whether round ``t`` (1-based) of ``total_rounds`` runs frozen.

    Non-decreasing in t for every policy kind.
    """
    if policy.kind is FixBnKind.OFF:
        return False
    if policy.triggered:
        return True
    if policy.kind is FixBnKind.FIXED_FRACTION:
        fire = t > math.ceil(policy.fraction * total_rounds)
    elif policy.kind is FixBnKind.FIXED_ROUND:
        fire = t > policy.round
    else:  # SLIDING_WINDOW: decided entirely by observe()
        fire = False
    if fire:
        policy.triggered = True
    return policy.triggered


def enter_stage_two(state) -> None:
    """Snapshot the aggregated statistics and freeze every normalization layer.

    After this, local training and testing normalize with the same fixed
    statistics, and the EMA never runs again.  Entering twice raises.
    """
    if state.stage_two:
        raise ModeError("stage two already entered")
    for layer in state.model.norm_stat_layers():
        freeze(layer, (layer.running_mean.copy(), layer.running_var.copy()))
    state.stage_two = True


def momentum_for_round(mode: MomentumMode, shard, server_buffer, params) -> MomentumBuffer:
    """Velocity buffer a client starts its local round with.

    REINIT zeroes it; LOCAL_MAINTAINED resumes the shard's persisted buffer;
    GLOBAL_MAINTAINED copies the server's aggregated buffer (zeros at the
    first round, before any aggregate exists).
    """
    if mode is MomentumMode.REINIT:
        return MomentumBuffer.zeros_like(params)
    if mode is MomentumMode.LOCAL_MAINTAINED:
        if shard.momentum is None:
            shard.momentum = MomentumBuffer.zeros_like(params)
        shard.momentum.check_congruent(params)
        return shard.momentum
    if server_buffer is None:
        return MomentumBuffer.zeros_like(params)
    server_buffer.check_congruent(params)
    return server_buffer.clone()


def aggregate_momentum(reports) -> MomentumBuffer:
    """Example-count-weighted mean of uploaded velocity buffers.

    Uses the same weights and canonical client-id summation order as the
    parameter aggregation.
    """
    if not reports:
        raise ValueError("no reports to aggregate")
    ordered = sorted(reports, key=lambda r: r.client_id)
    if any(r.momentum is None for r in ordered):
        missing = [r.client_id for r in ordered if r.momentum is None]
        raise ValueError(f"reports from clients {missing} carry no momentum buffer")
    total = float(sum(r.example_count for r in ordered))
    first = ordered[0]
    weight = first.example_count / total
    acc = [weight * v for v in first.momentum.velocities]
    for report in ordered[1:]:
        weight = report.example_count / total
        for a, v in zip(acc, report.momentum.velocities):
            a += weight * v
    return MomentumBuffer(acc)
