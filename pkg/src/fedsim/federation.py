"""The federated averaging engine.

One round: sample participants, broadcast the global model, run E local
mini-batch SGD steps on each participant's copy (parallelizable), then
average every learnable parameter and every running normalization statistic
element-wise, weighted by example counts.  Aggregation always sums in
client-id order so results are bitwise independent of scheduling.

A centralized trainer with the same sampling stream lives alongside as the
degenerate single-client reference.
"""

import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import ClientShard, Dataset
from .diagnostics import (
    RoundRecord,
    l1_drift,
    local_deviation,
    stat_float_count,
    windowed_variance,
)
from .errors import DivergenceError, ModeError, ShapeError
from .nn import Model, softmax_cross_entropy
from .optim import MomentumBuffer, sgd_step
from .policies import (
    FixBnKind,
    FixBnPolicy,
    MomentumMode,
    enter_stage_two,
    momentum_for_round,
    should_freeze,
)
from .policies import aggregate_momentum as _aggregate_momentum
from .seeding import derive_rng

__all__ = [
    "BudgetMode",
    "FedConfig",
    "GlobalState",
    "ClientReport",
    "lr_at",
    "sample_participants",
    "client_update",
    "aggregate",
    "evaluate",
    "resolve_rounds",
    "run_training",
    "centralized_train",
    "CentralizedResult",
    "snapshot_norm_stats",
]

DIAGNOSTIC_WINDOW = 20  # trailing window for the recorded deviation variance


class BudgetMode(enum.Enum):
    FIXED_ROUNDS = "fixed_rounds"
    FIXED_EPOCHS = "fixed_epochs"


@dataclass
class FedConfig:
    """Hyperparameters of one federated run."""

    rounds: int = 100
    local_steps: int = 1
    batch_size: int = 20
    base_lr: float = 0.02
    lr_decay_points: tuple = (0.5, 0.75)
    lr_decay_factor: float = 0.1
    participation_rate: float = 1.0
    momentum_mode: MomentumMode = MomentumMode.REINIT
    momentum_coef: float = 0.9
    weight_decay: float = 0.0
    budget_mode: BudgetMode = BudgetMode.FIXED_ROUNDS
    epoch_budget: float = 128.0
    seed: int = 0

    def __post_init__(self):
        if self.rounds < 0:
            raise ValueError(f"rounds must be >= 0, got {self.rounds}")
        if self.local_steps < 1:
            raise ValueError(f"local_steps must be >= 1, got {self.local_steps}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.base_lr <= 0:
            raise ValueError(f"base_lr must be > 0, got {self.base_lr}")
        if not 0.0 < self.participation_rate <= 1.0:
            raise ValueError(f"participation_rate must lie in (0, 1], got {self.participation_rate}")
        if self.lr_decay_factor <= 0:
            raise ValueError(f"lr_decay_factor must be > 0, got {self.lr_decay_factor}")
        pts = tuple(self.lr_decay_points)
        if any(not 0.0 < p < 1.0 for p in pts) or any(
            a >= b for a, b in zip(pts, pts[1:])
        ):
            raise ValueError(f"lr_decay_points must be strictly increasing in (0, 1): {pts}")
        self.lr_decay_points = pts


@dataclass
class GlobalState:
    """Server-side state: global model, round counter, optional global
    momentum, and whether stage two (frozen statistics) has begun."""

    model: Model
    round: int = 0
    momentum: Optional[MomentumBuffer] = None
    stage_two: bool = False

    def norm_stats(self):
        return snapshot_norm_stats(self.model)


@dataclass
class ClientReport:
    """What one client uploads after its local round."""

    client_id: int
    model: Model
    example_count: int
    final_loss: float
    minibatch_stats: list  # last step's per-layer (mean, var), feeds diagnostics
    stats_trace: list = field(default_factory=list)  # one entry per local step
    momentum: Optional[MomentumBuffer] = None


def snapshot_norm_stats(model: Model):
    """Copies of every stat-carrying layer's (running_mean, running_var)."""
    return [
        (layer.running_mean.copy(), layer.running_var.copy())
        for layer in model.norm_stat_layers()
    ]


def lr_at(t: int, cfg: FedConfig, total_rounds: Optional[int] = None) -> float:
    """base_lr * factor^(decay points passed); a point at fraction f applies
    from round ceil(f * T) inclusive."""
    total = cfg.rounds if total_rounds is None else total_rounds
    passed = sum(1 for f in cfg.lr_decay_points if t >= math.ceil(f * total))
    return cfg.base_lr * cfg.lr_decay_factor**passed


def sample_participants(client_count: int, rate: float, seed: int, round_index: int):
    """Sample max(1, floor(rate*M)) distinct clients, deterministic per
    (seed, round)."""
    if rate <= 0.0 or rate > 1.0:
        raise ValueError(f"participation rate must lie in (0, 1], got {rate}")
    count = max(1, int(math.floor(rate * client_count)))
    if count >= client_count:
        return list(range(client_count))
    rng = derive_rng(seed, "participation", round_index)
    return sorted(int(i) for i in rng.choice(client_count, size=count, replace=False))


def _check_freeze_consistency(model: Model, freeze_active: bool):
    frozen_layers = [l for l in model.norm_stat_layers() if l.frozen]
    stat_layers = model.norm_stat_layers()
    if freeze_active and len(frozen_layers) != len(stat_layers):
        raise ModeError("freeze is active but the broadcast model has unfrozen layers")
    if not freeze_active and frozen_layers:
        raise ModeError("broadcast model is frozen but freeze is not active")


def client_update(
    global_model: Model,
    shard: ClientShard,
    cfg: FedConfig,
    lr: float,
    freeze_active: bool = False,
    server_momentum: Optional[MomentumBuffer] = None,
) -> ClientReport:
    """E local mini-batch SGD steps on a copy of the global model.

    Batch-norm layers normalize by mini-batch statistics and run the EMA
    while unfrozen; once freeze is active they normalize by the fixed global
    statistics.  The velocity buffer follows the configured momentum regime.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be > 0, got {lr}")
    _check_freeze_consistency(global_model, freeze_active)
    model = global_model.clone()
    params = model.params()
    velocity = momentum_for_round(cfg.momentum_mode, shard, server_momentum, params)
    mask = model.trainable_mask()
    stats_trace = []
    loss = math.nan
    for step in range(1, cfg.local_steps + 1):
        batch = shard.next_batch(cfg.batch_size)
        x, y = shard.take(batch)
        logits = model.forward(x, train=True)
        value = softmax_cross_entropy(logits, y)
        if not math.isfinite(value.loss):
            raise DivergenceError(
                f"client {shard.client_id}: non-finite loss at local step {step}"
            )
        model.zero_grads()
        model.backward(value.grad)
        sgd_step(params, model.grads(), velocity, lr, cfg.momentum_coef,
                 cfg.weight_decay, trainable=mask)
        stats_trace.append(
            [
                (layer.last_batch_stats[0].copy(), layer.last_batch_stats[1].copy())
                for layer in model.norm_stat_layers()
            ]
        )
        loss = value.loss
    if cfg.momentum_mode is MomentumMode.LOCAL_MAINTAINED:
        shard.momentum = velocity
    upload = velocity if cfg.momentum_mode is MomentumMode.GLOBAL_MAINTAINED else None
    return ClientReport(
        client_id=shard.client_id,
        model=model,
        example_count=len(shard),
        final_loss=loss,
        minibatch_stats=stats_trace[-1],
        stats_trace=stats_trace,
        momentum=upload,
    )


def _aggregation_weights(reports):
    total = float(sum(r.example_count for r in reports))
    return [r.example_count / total for r in reports]


def aggregate(reports) -> Model:
    """Example-count-weighted element-wise mean of uploaded models.

    Covers every learnable and every unfrozen running statistic; frozen
    statistics are validated identical across reports and carried through
    untouched.  Reports are summed in client-id order, so the result does not
    depend on arrival order.
    """
    if not reports:
        raise ValueError("no reports to aggregate")
    ordered = sorted(reports, key=lambda r: r.client_id)
    weights = _aggregation_weights(ordered)
    models = [r.model for r in ordered]
    param_lists = [m.params() for m in models]
    base = param_lists[0]
    for other in param_lists[1:]:
        if len(other) != len(base) or any(a.shape != b.shape for a, b in zip(base, other)):
            raise ShapeError("reports carry incongruent model architectures")
    result = models[0].clone()
    for i, target in enumerate(result.params()):
        acc = weights[0] * param_lists[0][i]
        for w, plist in zip(weights[1:], param_lists[1:]):
            acc += w * plist[i]
        target[...] = acc
    stat_layer_sets = [m.norm_stat_layers() for m in models]
    if any(len(s) != len(stat_layer_sets[0]) for s in stat_layer_sets):
        raise ShapeError("reports carry different normalization layer counts")
    for j, target_layer in enumerate(result.norm_stat_layers()):
        layers = [s[j] for s in stat_layer_sets]
        frozen_flags = {l.frozen for l in layers}
        if len(frozen_flags) != 1:
            raise ModeError("reports disagree on layer freeze state")
        if frozen_flags == {True}:
            ref_mean, ref_var = layers[0].running_mean, layers[0].running_var
            for l in layers[1:]:
                if not (np.array_equal(ref_mean, l.running_mean)
                        and np.array_equal(ref_var, l.running_var)):
                    raise ModeError("frozen statistics diverged across clients")
            continue  # frozen stats already carried by the clone
        mean_acc = weights[0] * layers[0].running_mean
        var_acc = weights[0] * layers[0].running_var
        for w, l in zip(weights[1:], layers[1:]):
            mean_acc += w * l.running_mean
            var_acc += w * l.running_var
        target_layer.running_mean[...] = mean_acc
        target_layer.running_var[...] = var_acc
    return result


def evaluate(model: Model, test: Dataset, chunk_size: int = 512) -> float:
    """Top-1 accuracy with eval-mode forward passes; mutates nothing."""
    if len(test) == 0:
        raise ValueError("empty test set")
    feats = test.features
    correct = 0
    for start in range(0, len(test), chunk_size):
        x = feats[start : start + chunk_size]
        logits = model.forward(x, train=False)
        correct += int((logits.argmax(axis=1) == test.labels[start : start + chunk_size]).sum())
    return correct / len(test)


def resolve_rounds(cfg: FedConfig, dataset_size: int, client_count: int) -> int:
    """Round count under the configured budget.

    Fixed-epochs converts a total sample-visit budget into rounds:
    T = epoch_budget * N / (E * batch_size * participants_per_round).
    """
    if cfg.budget_mode is BudgetMode.FIXED_ROUNDS:
        return cfg.rounds
    participants = max(1, int(math.floor(cfg.participation_rate * client_count)))
    per_round = cfg.local_steps * cfg.batch_size * participants
    return max(1, int(cfg.epoch_budget * dataset_size // per_round))


def run_training(
    model0: Model,
    shards,
    cfg: FedConfig,
    fixbn: Optional[FixBnPolicy] = None,
    test_data: Optional[Dataset] = None,
    threads: int = 1,
):
    """The FedAvg loop: T rounds of sample -> broadcast -> local update ->
    aggregate -> evaluate -> record.

    The freeze policy is consulted at the start of each round; once it fires,
    the aggregated statistics are snapshot and every later round (training
    and testing alike) normalizes with them.  Results are independent of the
    thread count.
    """
    shards = sorted(shards, key=lambda s: s.client_id)
    client_count = len(shards)
    if client_count == 0:
        raise ValueError("no client shards")
    dataset_size = sum(len(s) for s in shards)
    total_rounds = resolve_rounds(cfg, dataset_size, client_count)
    state = GlobalState(model=model0.clone())
    records = []
    prev_stats = snapshot_norm_stats(state.model)
    deviation_history = []
    diag_window = fixbn.window if (fixbn and fixbn.kind.value == "sliding_window") else DIAGNOSTIC_WINDOW
    for t in range(1, total_rounds + 1):
        lr = lr_at(t, cfg, total_rounds)
        if fixbn is not None and not state.stage_two and should_freeze(fixbn, t, total_rounds):
            enter_stage_two(state)
            prev_stats = snapshot_norm_stats(state.model)
        participant_ids = sample_participants(
            client_count, cfg.participation_rate, cfg.seed, t
        )
        freeze_active = state.stage_two

        def update(cid):
            return client_update(
                state.model, shards[cid], cfg, lr, freeze_active, state.momentum
            )

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                reports = list(pool.map(update, participant_ids))
        else:
            reports = [update(cid) for cid in participant_ids]
        state.model = aggregate(reports)
        if cfg.momentum_mode is MomentumMode.GLOBAL_MAINTAINED:
            state.momentum = _aggregate_momentum(reports)
        state.round = t
        new_stats = snapshot_norm_stats(state.model)
        drift = l1_drift(prev_stats, new_stats)
        weights = _aggregation_weights(sorted(reports, key=lambda r: r.client_id))
        ordered_reports = sorted(reports, key=lambda r: r.client_id)
        avg_loss = float(
            sum(w * r.final_loss for w, r in zip(weights, ordered_reports))
        )
        deviations = [
            local_deviation(r.minibatch_stats, prev_stats) for r in ordered_reports
        ]
        mean_dev = float(np.mean(deviations)) if deviations else 0.0
        stat_count = stat_float_count(prev_stats)
        normalized_dev = mean_dev / stat_count if stat_count else 0.0
        deviation_history.append(normalized_dev)
        if fixbn is not None:
            fixbn.observe(normalized_dev)
        win_var = windowed_variance(deviation_history, diag_window)
        test_acc = evaluate(state.model, test_data) if test_data is not None else math.nan
        records.append(
            RoundRecord(
                round=t,
                test_acc=test_acc,
                avg_local_loss=avg_loss,
                stat_drift=drift,
                local_dev=mean_dev,
                win_var=win_var,
                lr=lr,
                frozen=state.stage_two,
                participants=list(participant_ids),
            )
        )
        prev_stats = new_stats
    return state, records


@dataclass
class CentralizedResult:
    model: Model
    velocity: MomentumBuffer
    losses: list


def centralized_train(
    model0: Model,
    dataset: Dataset,
    steps: int,
    batch_size: int,
    lr,
    momentum_coef: float = 0.0,
    weight_decay: float = 0.0,
    seed: int = 0,
) -> CentralizedResult:
    """Plain sequential mini-batch SGD with a persistent velocity buffer.

    Draws batches from the same kind of seeded shuffled-cycling stream a
    single client would own, so a one-client federation with maintained local
    momentum must reproduce this run exactly.  ``lr`` may be a scalar or a
    per-step callable.
    """
    stream = ClientShard(0, dataset, np.arange(len(dataset)), seed)
    model = model0.clone()
    params = model.params()
    velocity = MomentumBuffer.zeros_like(params)
    lr_fn = lr if callable(lr) else (lambda _step: lr)
    losses = []
    for step in range(1, steps + 1):
        batch = stream.next_batch(batch_size)
        x, y = stream.take(batch)
        value = softmax_cross_entropy(model.forward(x, train=True), y)
        if not math.isfinite(value.loss):
            raise DivergenceError(f"non-finite loss at step {step}")
        model.zero_grads()
        model.backward(value.grad)
        sgd_step(params, model.grads(), velocity, lr_fn(step), momentum_coef,
                 weight_decay, trainable=model.trainable_mask())
        losses.append(value.loss)
    return CentralizedResult(model, velocity, losses)
