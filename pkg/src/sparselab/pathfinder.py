"""Bezier curves between two solutions and stochastic optimization of their
interior control points."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .data import Dataset, batches
from .landscape import EvalSpec, LossProfile, _profile, default_grid
from .net import loss_and_grad
from .params import ParamVector, check_layouts
from .sparsity import SparsityMask, apply_mask
from .training import Solution, TrainingDiverged

SWEEP_LRS = (1.0, 1e-1, 1e-2, 1e-3)
SWEEP_MOMENTA = (0.9, 0.95, 0.99, 0.995)


def bernstein(n: int, i: int, t: float) -> float:
    if not 0 <= i <= n:
        raise ValueError(f"need 0 <= i <= n, got i={i}, n={n}")
    return math.comb(n, i) * (1.0 - t) ** (n - i) * t ** i


class BezierPath:
    """Order-n Bezier curve; the first and last control points are pinned."""

    def __init__(self, control_points: Sequence[ParamVector], constraint: SparsityMask | None = None):
        order = len(control_points) - 1
        if order not in (2, 3):
            raise ValueError(f"Bezier order must be 2 or 3, got {order}")
        layout = control_points[0].layout
        for cp in control_points[1:]:
            check_layouts(layout, cp.layout)
        if constraint is not None:
            check_layouts(layout, constraint.layout)
            for i, cp in enumerate(control_points):
                if np.any(cp.values[~constraint.bits] != 0.0):
                    raise ValueError(f"control point {i} violates the sparsity constraint")
        self.control_points = [cp.copy() for cp in control_points]
        self.constraint = constraint

    @classmethod
    def straight(cls, start: ParamVector, end: ParamVector, order: int, constraint=None) -> "BezierPath":
        """Control points evenly spaced on the segment, so B(t) is the segment itself."""
        check_layouts(start.layout, end.layout)
        pts = [start.copy()]
        for i in range(1, order):
            s = i / order
            pts.append(ParamVector((1.0 - s) * start.values + s * end.values, start.layout))
        pts.append(end.copy())
        if constraint is not None:
            pts[1:-1] = [apply_mask(p, constraint) for p in pts[1:-1]]
        return cls(pts, constraint)

    @property
    def order(self) -> int:
        return len(self.control_points) - 1

    @property
    def layout(self):
        return self.control_points[0].layout


def bezier_point(path: BezierPath, t: float) -> ParamVector:
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    if t == 0.0:
        return path.control_points[0].copy()
    if t == 1.0:
        return path.control_points[-1].copy()
    n = path.order
    acc = bernstein(n, 0, t) * path.control_points[0].values
    for i in range(1, n + 1):
        acc = acc + bernstein(n, i, t) * path.control_points[i].values
    return ParamVector(acc, path.layout)


def path_grad(path: BezierPath, t: float, inputs, labels, weight_decay: float = 1e-4, l2_scope: str = "weights"):
    """Gradient of L(B(t)) for each interior control point (chain rule:
    the Bernstein weight times the loss gradient at the curve point)."""
    point = bezier_point(path, t)
    _, g, _ = loss_and_grad(point, inputs, labels, weight_decay, "train", l2_scope=l2_scope)
    if path.constraint is not None:
        g[~path.constraint.bits] = 0.0
    return [ParamVector(bernstein(path.order, i, t) * g, path.layout) for i in range(1, path.order)]


@dataclass(frozen=True)
class PathOptConfig:
    steps: int = 2000
    batch_size: int = 128
    base_lr: float = 0.01
    momentum: float = 0.95
    weight_decay: float = 1e-4
    seed: int = 0
    l2_scope: str = "weights"

    def __post_init__(self):
        errors = []
        if self.steps < 0:
            errors.append("steps must be >= 0")
        if self.batch_size < 1:
            errors.append("batch_size must be >= 1")
        if self.base_lr <= 0:
            errors.append("base_lr must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            errors.append("momentum must lie in [0, 1)")
        if errors:
            raise ValueError("; ".join(errors))

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def path_lr(config: PathOptConfig, step: int) -> float:
    """Base rate for the first half, linear decay to 1% by 90% of the steps, then flat."""
    frac = step / config.steps if config.steps else 0.0
    if frac <= 0.5:
        scale = 1.0
    elif frac <= 0.9:
        scale = 1.0 - 0.99 * (frac - 0.5) / 0.4
    else:
        scale = 0.01
    return config.base_lr * scale


@dataclass
class PathTrace:
    step: np.ndarray
    t: np.ndarray
    loss: np.ndarray

    def to_csv(self) -> str:
        lines = ["step,t,loss"]
        lines += [f"{s},{t:.17g},{v:.17g}" for s, t, v in zip(self.step, self.t, self.loss)]
        return "\n".join(lines) + "\n"


def _as_params(x) -> ParamVector:
    return x.params if isinstance(x, Solution) else x


def optimize_path(
    theta_e,
    theta_s,
    order: int,
    constraint: SparsityMask | None,
    config: PathOptConfig,
    data: Dataset,
) -> tuple[BezierPath, PathTrace]:
    """Minimize the expected loss along a Bezier curve with t ~ U(0, 1).

    ``theta_e`` is the t=0 end and ``theta_s`` the t=1 end; both stay fixed.
    Interior points start on the straight segment and move by SGD with
    momentum, one (t, batch) sample per step.
    """
    start, end = _as_params(theta_e), _as_params(theta_s)
    path = BezierPath.straight(start, end, order, constraint)
    interior = [cp.values for cp in path.control_points[1:-1]]
    velocity = [np.zeros_like(v) for v in interior]
    dropped = None if constraint is None else np.flatnonzero(~constraint.bits)
    rng = np.random.default_rng([config.seed, 0xB321])
    trace_t = np.empty(config.steps)
    trace_loss = np.empty(config.steps)

    epoch, pos = 0, 0
    order_ = batches(data, config.batch_size, config.seed, epoch)
    for step in range(config.steps):
        if pos == len(order_):
            epoch += 1
            order_ = batches(data, config.batch_size, config.seed, epoch)
            pos = 0
        idx = order_[pos]
        pos += 1
        t = float(rng.uniform(0.0, 1.0))
        point = bezier_point(path, t)
        lb, g, _ = loss_and_grad(
            point, data.features[idx], data.labels[idx], config.weight_decay, "train", l2_scope=config.l2_scope
        )
        if not math.isfinite(lb.total):
            raise TrainingDiverged(step, lb.total)
        if dropped is not None:
            g[dropped] = 0.0
        lr = path_lr(config, step)
        for i, (theta, vel) in enumerate(zip(interior, velocity), start=1):
            vel *= config.momentum
            vel += bernstein(order, i, t) * g
            theta -= lr * vel
            if dropped is not None:
                theta[dropped] = 0.0
        trace_t[step] = t
        trace_loss[step] = lb.total
    return path, PathTrace(np.arange(config.steps), trace_t, trace_loss)


def profile_path(
    path: BezierPath,
    t_grid=None,
    eval_data: Dataset | None = None,
    weight_decay: float = 1e-4,
    batch_size: int | None = None,
    seed: int = 0,
    endpoints: tuple[str, str] = ("start", "end"),
    workers: int | None = None,
    l2_scope: str = "weights",
) -> LossProfile:
    """Loss decomposition along the curve; default grid is [0, 1] step 0.01."""
    if eval_data is None:
        raise ValueError("eval_data is required")
    grid = default_grid(0.0, 1.0, 0.01) if t_grid is None else np.asarray(t_grid, dtype=np.float64)
    if grid.min() < 0.0 or grid.max() > 1.0:
        raise ValueError("Bezier profiles need t_grid within [0, 1]")
    spec = EvalSpec(eval_data.id, batch_size, seed, weight_decay, l2_scope)
    return _profile(lambda t: bezier_point(path, t), grid, eval_data, spec, endpoints, workers)


@dataclass
class SweepResult:
    base_lr: float
    momentum: float
    max_loss: float
    path: BezierPath | None
    profile: LossProfile | None
    error: str = ""


def sweep_path(
    theta_e,
    theta_s,
    order: int,
    constraint: SparsityMask | None,
    config: PathOptConfig,
    data: Dataset,
    eval_data: Dataset | None = None,
    lrs: Sequence[float] = SWEEP_LRS,
    momenta: Sequence[float] = SWEEP_MOMENTA,
) -> list[SweepResult]:
    """Grid over (lr, momentum); results sorted best-first by max loss on the curve.
    Diverged runs are kept with ``max_loss = inf``."""
    eval_data = eval_data if eval_data is not None else data
    results = []
    for lr in lrs:
        for mom in momenta:
            cfg = replace(config, base_lr=lr, momentum=mom)
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    path, _ = optimize_path(theta_e, theta_s, order, constraint, cfg, data)
            except TrainingDiverged as exc:
                results.append(SweepResult(lr, mom, math.inf, None, None, str(exc)))
                continue
            prof = profile_path(path, eval_data=eval_data, weight_decay=config.weight_decay)
            peak = float(np.max(prof.total)) if np.all(np.isfinite(prof.total)) else math.inf
            results.append(SweepResult(lr, mom, peak, path, prof))
    results.sort(key=lambda r: r.max_loss)
    return results
