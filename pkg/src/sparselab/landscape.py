"""Loss profiles along straight lines in parameter space."""

from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import Dataset, batches
from .net import LossBreakdown, l2_term, loss
from .params import ParamVector, check_layouts

CSV_COLUMNS = ("t", "total", "cross_entropy", "l2_term", "accuracy")


def interpolate(theta_s: ParamVector, theta_e: ParamVector, t: float) -> ParamVector:
    """``t * theta_e + (1 - t) * theta_s``; t is not restricted to [0, 1]."""
    check_layouts(theta_s.layout, theta_e.layout)
    if t == 0:
        return theta_s.copy()
    if t == 1:
        return theta_e.copy()
    s, e = theta_s.values, theta_e.values
    # where the endpoints agree the blend is exact, so equal endpoints give a flat line
    return ParamVector(np.where(s == e, s, t * e + (1.0 - t) * s), theta_s.layout)


def default_grid(lo: float = -0.2, hi: float = 1.2, step: float = 0.01) -> np.ndarray:
    """Evenly spaced grid including both ends, snapped to 10 decimals so
    that 0 and 1 land exactly on grid points."""
    n = int(round((hi - lo) / step)) + 1
    return np.round(lo + step * np.arange(n), 10)


@dataclass(frozen=True)
class EvalSpec:
    """How a profile point is evaluated: which data, which partition.

    ``batch_size=None`` evaluates the whole dataset as one batch.  Batch norm
    always runs in train mode (batch statistics) during profiling.
    """

    dataset_id: str = ""
    batch_size: int | None = None
    seed: int = 0
    weight_decay: float = 1e-4
    l2_scope: str = "weights"
    bn_mode: str = "train"


def evaluate(
    params: ParamVector,
    data: Dataset,
    weight_decay: float,
    batch_size: int | None = None,
    seed: int = 0,
    l2_scope: str = "weights",
) -> LossBreakdown:
    """Full-dataset loss over a fixed batch partition, batch-norm in train mode."""
    if batch_size is None or batch_size >= len(data):
        return loss(params, data.features, data.labels, weight_decay, "train", l2_scope=l2_scope)
    ce = acc = 0.0
    for idx in batches(data, batch_size, seed, 0):
        lb = loss(params, data.features[idx], data.labels[idx], 0.0, "train")
        ce += lb.cross_entropy * idx.size
        acc += lb.accuracy * idx.size
    ce /= len(data)
    reg = l2_term(params, weight_decay, l2_scope)
    return LossBreakdown(ce + reg, ce, reg, acc / len(data))


@dataclass
class LossProfile:
    t: np.ndarray
    total: np.ndarray
    cross_entropy: np.ndarray
    l2_term: np.ndarray
    accuracy: np.ndarray
    endpoints: tuple[str, str] = ("start", "end")
    eval_spec: EvalSpec = field(default_factory=EvalSpec)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        if self.t.size > 1 and np.any(np.diff(self.t) <= 0):
            raise ValueError("profile t values must be strictly increasing")

    @classmethod
    def from_breakdowns(cls, ts, lbs: Sequence[LossBreakdown], **kw) -> "LossProfile":
        return cls(
            np.asarray(ts, dtype=np.float64),
            np.array([b.total for b in lbs]),
            np.array([b.cross_entropy for b in lbs]),
            np.array([b.l2_term for b in lbs]),
            np.array([b.accuracy for b in lbs]),
            **kw,
        )

    def __len__(self) -> int:
        return self.t.size

    def at(self, t: float, atol: float = 1e-9) -> int:
        hits = np.flatnonzero(np.abs(self.t - t) <= atol)
        if hits.size == 0:
            raise ValueError(f"profile has no point at t={t}")
        return int(hits[0])

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for row in zip(self.t, self.total, self.cross_entropy, self.l2_term, self.accuracy):
            w.writerow([f"{v:.17g}" for v in row])
        text = buf.getvalue()
        if path is not None:
            from .checkpoint import atomic_write

            atomic_write(path, text.encode())
        return text

    @classmethod
    def from_csv(cls, text: str) -> "LossProfile":
        rows = list(csv.reader(io.StringIO(text)))
        header, body = rows[0], rows[1:]
        if tuple(header) != CSV_COLUMNS:
            raise ValueError(f"unexpected profile header {header}")
        cols = np.array(body, dtype=np.float64).reshape(-1, len(CSV_COLUMNS)).T
        return cls(*cols)


def _profile(point_at: Callable[[float], ParamVector], t_grid, data, spec: EvalSpec, endpoints, workers):
    ts = np.asarray(t_grid, dtype=np.float64)
    if ts.size == 0:
        raise ValueError("t_grid must be non-empty")

    def one(t):
        return evaluate(point_at(float(t)), data, spec.weight_decay, spec.batch_size, spec.seed, spec.l2_scope)

    if workers and workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            lbs = list(pool.map(one, ts))
    else:
        lbs = [one(t) for t in ts]
    return LossProfile.from_breakdowns(ts, lbs, endpoints=endpoints, eval_spec=spec)


def profile_line(
    theta_s: ParamVector,
    theta_e: ParamVector,
    t_grid=None,
    eval_data: Dataset | None = None,
    weight_decay: float = 1e-4,
    batch_size: int | None = None,
    seed: int = 0,
    endpoints: tuple[str, str] = ("start", "end"),
    workers: int | None = None,
    l2_scope: str = "weights",
) -> LossProfile:
    """Evaluate the loss decomposition along the segment from theta_s (t=0) to
    theta_e (t=1).  The default grid is [-0.2, 1.2] in steps of 0.01."""
    if eval_data is None:
        raise ValueError("eval_data is required")
    check_layouts(theta_s.layout, theta_e.layout)
    grid = default_grid() if t_grid is None else t_grid
    spec = EvalSpec(eval_data.id, batch_size, seed, weight_decay, l2_scope)
    return _profile(lambda t: interpolate(theta_s, theta_e, t), grid, eval_data, spec, endpoints, workers)


@dataclass(frozen=True)
class MonotonicityScore:
    num_increases: int
    max_increase: float
    violation_mass: float
    degenerate: bool = False


def _window(profile: LossProfile, t_range, atol=1e-9) -> np.ndarray:
    lo, hi = t_range
    if lo < profile.t[0] - atol or hi > profile.t[-1] + atol:
        raise ValueError(f"range {t_range} is outside the profile [{profile.t[0]}, {profile.t[-1]}]")
    sel = (profile.t >= lo - atol) & (profile.t <= hi + atol)
    if sel.sum() < 2:
        raise ValueError("need at least 2 profile points in range")
    return profile.total[sel]


def monotonicity_score(profile: LossProfile, t_range: tuple[float, float] = (0.0, 1.0)) -> MonotonicityScore:
    """Count and size the increases of the total loss over ``t_range``.

    ``violation_mass`` is the summed increase divided by the overall descent
    (first minus last); when there is no descent it is 0 and ``degenerate``
    is set.
    """
    y = _window(profile, t_range)
    diffs = np.diff(y)
    ups = diffs[diffs > 0]
    descent = y[0] - y[-1]
    total_up = float(ups.sum())
    if descent <= 0:
        return MonotonicityScore(int(ups.size), float(ups.max(initial=0.0)), 0.0, True)
    return MonotonicityScore(int(ups.size), float(ups.max(initial=0.0)), total_up / descent)


def barrier_height(profile: LossProfile) -> float:
    """Peak loss on [0, 1] above the higher of the two endpoint losses."""
    y = _window(profile, (0.0, 1.0))
    ends = max(profile.total[profile.at(0.0)], profile.total[profile.at(1.0)])
    return float(y.max() - ends)
