"""SGD-with-momentum training: dense, gradual pruning, lottery, scratch and
randomly zeroed initializations."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .data import Dataset, batches
from .net import BatchNormStats, LossBreakdown, init_params, loss, loss_and_grad
from .params import Architecture, ParamVector, check_layouts
from .sparsity import PruningSchedule, SparsityMask, apply_mask, magnitude_mask, target_sparsity

PROVENANCES = ("dense", "pruned", "lottery", "scratch", "sparse_init")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"training diverged at step {step}: loss = {value}")
        self.step = step
        self.value = value


@dataclass(frozen=True)
class LrSchedule:
    """Linear warmup from 0 to ``base_lr``, then step decay at ``drop_steps``."""

    base_lr: float = 0.1
    warmup_steps: int = 0
    drop_steps: tuple[int, ...] = ()
    drop_factor: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "drop_steps", tuple(int(s) for s in self.drop_steps))
        errors = []
        if self.warmup_steps < 0:
            errors.append("warmup_steps must be >= 0")
        if any(b <= a for a, b in zip(self.drop_steps, self.drop_steps[1:])):
            errors.append(f"drop_steps must be strictly increasing, got {list(self.drop_steps)}")
        if not 0.0 < self.drop_factor < 1.0:
            errors.append(f"drop_factor must lie in (0, 1), got {self.drop_factor}")
        if errors:
            raise ValueError("; ".join(errors))

    @classmethod
    def desk_default(cls, total_steps: int, base_lr: float = 0.1) -> "LrSchedule":
        """Warmup of 100 steps, drops at 60/85/95% of training."""
        drops = [int(round(total_steps * f)) for f in (0.60, 0.85, 0.95)]
        return cls(base_lr, min(100, total_steps // 10), tuple(drops))

    def to_dict(self) -> dict:
        return {
            "base_lr": self.base_lr,
            "warmup_steps": self.warmup_steps,
            "drop_steps": list(self.drop_steps),
            "drop_factor": self.drop_factor,
        }


def lr_at(sched: LrSchedule, step: int) -> float:
    if step < 0:
        raise ValueError("step must be >= 0")
    if step < sched.warmup_steps:
        return sched.base_lr * step / sched.warmup_steps
    n_drops = sum(1 for d in sched.drop_steps if step >= d)
    return sched.base_lr * sched.drop_factor ** n_drops


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 3000
    batch_size: int = 128
    lr: LrSchedule = field(default_factory=lambda: LrSchedule.desk_default(3000))
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    log_every: int = 100
    l2_scope: str = "weights"

    def __post_init__(self):
        errors = []
        if self.total_steps < 1:
            errors.append("total_steps must be >= 1")
        if self.batch_size < 1:
            errors.append("batch_size must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            errors.append("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            errors.append("weight_decay must be >= 0")
        if self.log_every < 1:
            errors.append("log_every must be >= 1")
        if errors:
            raise ValueError("; ".join(errors))

    def to_dict(self) -> dict:
        return {
            "total_steps": self.total_steps,
            "batch_size": self.batch_size,
            "lr": self.lr.to_dict(),
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "seed": self.seed,
            "log_every": self.log_every,
            "l2_scope": self.l2_scope,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "lr" in d:
            d["lr"] = LrSchedule(**d["lr"])
        return cls(**d)


@dataclass(frozen=True)
class HistoryRow:
    step: int
    train: LossBreakdown
    eval_accuracy: float


@dataclass
class Solution:
    params: ParamVector
    mask: SparsityMask | None
    history: list[HistoryRow]
    provenance: str
    bn_stats: BatchNormStats | None = None

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValueError(f"provenance must be one of {PROVENANCES}")

    @property
    def final_accuracy(self) -> float:
        return self.history[-1].eval_accuracy if self.history else float("nan")


# callback(step, params_values, velocity, mask) runs after every update
StepCallback = Callable[[int, np.ndarray, np.ndarray, SparsityMask | None], None]


def evaluate_accuracy(params: ParamVector, data: Dataset, bn_stats: BatchNormStats | None = None) -> float:
    mode = "eval" if params.arch.has_batchnorm else "train"
    return loss(params, data.features, data.labels, 0.0, mode, bn_stats).accuracy


def _sgd(
    config: TrainConfig,
    init: ParamVector,
    data: Dataset,
    eval_data: Dataset | None,
    mask: SparsityMask | None,
    on_event: Callable[[int, np.ndarray, SparsityMask | None], tuple[SparsityMask | None, bool]] | None = None,
    enforce: bool = True,
    callback: StepCallback | None = None,
):
    """Shared training loop.

    ``on_event(step, theta, mask)`` runs before each update (and once after
    the last) and returns the new mask plus whether it must be enforced on
    every following update.
    """
    layout = init.layout
    theta = init.values.copy()
    velocity = np.zeros_like(theta)
    dropped = None
    if mask is not None:
        check_layouts(layout, mask.layout)
        dropped = np.flatnonzero(~mask.bits)
        theta[dropped] = 0.0
    view = ParamVector(theta, layout)
    bn = BatchNormStats.fresh(layout.arch) if layout.arch.has_batchnorm else None
    eval_data = eval_data if eval_data is not None else data
    history: list[HistoryRow] = []

    epoch = 0
    order = batches(data, config.batch_size, config.seed, epoch)
    pos = 0
    for step in range(config.total_steps + 1):
        if on_event is not None:
            new_mask, enforce = on_event(step, theta, mask)
            if new_mask is not mask:
                mask = new_mask
                dropped = np.flatnonzero(~mask.bits)
                theta[dropped] = 0.0
                velocity[dropped] = 0.0
        if step == config.total_steps:
            break
        if pos == len(order):
            epoch += 1
            order = batches(data, config.batch_size, config.seed, epoch)
            pos = 0
        idx = order[pos]
        pos += 1
        lb, g, batch_stats = loss_and_grad(
            view, data.features[idx], data.labels[idx], config.weight_decay, "train", l2_scope=config.l2_scope
        )
        if not math.isfinite(lb.total):
            raise TrainingDiverged(step, lb.total)
        if bn is not None:
            bn.update(batch_stats)
        masked = enforce and dropped is not None
        if masked:
            g[dropped] = 0.0
        velocity *= config.momentum
        velocity += g
        theta -= lr_at(config.lr, step) * velocity
        if masked:
            theta[dropped] = 0.0
            velocity[dropped] = 0.0
        if callback is not None:
            callback(step, theta, velocity, mask)
        done = step + 1
        if done % config.log_every == 0 or done == config.total_steps:
            history.append(HistoryRow(done, lb, evaluate_accuracy(view, eval_data, bn)))
    return ParamVector(theta, layout), mask, history, bn


def train(
    config: TrainConfig,
    init: ParamVector,
    mask: SparsityMask | None,
    data: Dataset,
    eval_data: Dataset | None = None,
    provenance: str | None = None,
    callback: StepCallback | None = None,
) -> Solution:
    """Train from ``init``; with a mask, gradients and weights stay masked every step."""
    if provenance is None:
        provenance = "dense" if mask is None else "scratch"
    params, mask, history, bn = _sgd(config, init, data, eval_data, mask, callback=callback)
    return Solution(params, mask, history, provenance, bn)


def prune_train(
    config: TrainConfig,
    sched: PruningSchedule,
    init: ParamVector,
    data: Dataset,
    eval_data: Dataset | None = None,
    callback: StepCallback | None = None,
) -> Solution:
    """Dense training with gradual magnitude pruning.

    Masks are recomputed at ``sched.event_steps()``; the last event is
    ``end_step``, after which the mask is frozen.  With a monotone schedule
    pruned weights stay at zero between events; otherwise they train densely
    between events and may regrow until the final event.
    """
    if sched.start_step < config.total_steps < sched.end_step:
        raise ValueError(
            f"pruning ends at step {sched.end_step}, after training ends ({config.total_steps})"
        )
    events = set(sched.event_steps())

    def on_event(step, theta, mask):
        enforce = sched.monotone or step >= sched.end_step
        if step not in events:
            return mask, enforce
        current = ParamVector(theta, init.layout)
        previous = mask if sched.monotone else None
        new = magnitude_mask(current, target_sparsity(sched, step), sched.exclusions, previous=previous)
        return new, enforce

    params, mask, history, bn = _sgd(config, init, data, eval_data, None, on_event, callback=callback)
    if mask is None:
        mask = SparsityMask.ones(init.layout, sched.exclusions)
    return Solution(params, mask, history, "pruned", bn)


def lottery_init(pruned: Solution, original_init: ParamVector) -> tuple[ParamVector, SparsityMask]:
    """The original initialization restricted to the pruned solution's mask."""
    if pruned.mask is None:
        raise ValueError("lottery initialization needs a solution with a mask")
    return apply_mask(original_init, pruned.mask), pruned.mask


def scratch_init(arch: Architecture, seed: int, mask: SparsityMask) -> ParamVector:
    """A fresh draw from the same init family, restricted to ``mask``."""
    return apply_mask(init_params(arch, seed), mask)


def random_zero_init(params: ParamVector, fraction: float, seed: int) -> ParamVector:
    """Zero exactly ``floor(fraction * n_weights)`` weight entries chosen uniformly."""
    if not 0.0 <= fraction < 1.0:
        raise ValueError(f"fraction must lie in [0, 1), got {fraction}")
    weight_idx = np.flatnonzero(params.layout.kind_mask(("weight",)))
    count = math.floor(fraction * weight_idx.size)
    out = params.copy()
    if count:
        rng = np.random.default_rng([seed, 0x5EED])
        out.values[rng.choice(weight_idx, size=count, replace=False)] = 0.0
    return out


def sparse_init_sweep(
    config: TrainConfig,
    arch: Architecture,
    zero_fractions: Sequence[float],
    data: Dataset,
    eval_data: Dataset | None = None,
) -> list[tuple[float, float]]:
    """Train densely from inits with a random fraction of weights zeroed."""
    base = init_params(arch, config.seed)
    out = []
    for frac in zero_fractions:
        sol = train(config, random_zero_init(base, frac, config.seed), None, data, eval_data, "sparse_init")
        out.append((float(frac), sol.final_accuracy))
    return out


def with_seed(config: TrainConfig, seed: int) -> TrainConfig:
    return replace(config, seed=seed)
