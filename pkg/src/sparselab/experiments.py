"""The reference desk-scale task and the directional replication runs built on it.

One seed of the reference experiment trains the pruned, lottery and scratch
solutions at one sparsity level, profiles the straight lines from the three
starting points to the pruned solution, measures the scratch-to-pruned
barrier, fits quadratic and cubic Bezier curves between those two solutions,
and runs the random-zeroing initialization sweep.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .config import ExperimentConfig, build_config
from .data import Dataset
from .landscape import LossProfile, barrier_height, default_grid, monotonicity_score, profile_line
from .net import init_params
from .params import ParamVector
from .pathfinder import optimize_path, profile_path
from .training import Solution, lottery_init, prune_train, scratch_init, sparse_init_sweep, train, with_seed

REFERENCE_SEEDS = (1, 2, 3, 4, 5)
REFERENCE_SPARSITY = 0.9
SCRATCH_SEED_OFFSET = 10_000
SWEEP_FRACTIONS = (0.0, 0.9, 0.999)


def reference_overrides() -> dict:
    """Config overrides for the reference task: batch-normalized
    [2, 256, 256, 2] MLP on a three-turn two-arm spiral, 6000 steps,
    weight decay 3e-3 (also used inside the path objective). Pruning ends
    before the first LR drop; the first layer stays dense and the output
    layer is pruned like the hidden one."""
    total = 6000
    return {
        "task": {"kind": "spirals", "n": 2000, "noise": 0.03, "seed": 0, "n_classes": 2,
                 "turns": 3.0, "test_fraction": 0.25},
        "arch": {"layer_sizes": [2, 256, 256, 2], "use_batchnorm": True},
        "train": {"total_steps": total, "batch_size": 128, "momentum": 0.9, "weight_decay": 3e-3,
                  "seed": 1, "log_every": 100,
                  "lr": {"base_lr": 0.1, "warmup_steps": 100, "drop_steps": [3600, 5100, 5700],
                         "drop_factor": 0.1}},
        "prune": {"start_step": 1000, "end_step": 3500, "frequency": 100,
                  "exclusions": {"skip_first": True, "final_cap": None}},
        "path": {"steps": 2000, "batch_size": 128, "base_lr": 0.01, "momentum": 0.95,
                 "weight_decay": 3e-3},
        "grids": {"sparsity_levels": [REFERENCE_SPARSITY], "zero_fractions": list(SWEEP_FRACTIONS)},
    }


def reference_config() -> ExperimentConfig:
    return build_config(reference_overrides())


@dataclass
class SparseRuns:
    seed: int
    level: float
    init: ParamVector
    pruned: Solution
    lottery_init: ParamVector
    lottery: Solution
    scratch_init: ParamVector
    scratch: Solution


def run_sparse_trio(cfg: ExperimentConfig, seed: int, level: float, train_data: Dataset, test_data: Dataset) -> SparseRuns:
    """Pruned, lottery and scratch solutions sharing one mask."""
    tc = with_seed(cfg.train, seed)
    init = init_params(cfg.arch, seed)
    pruned = prune_train(tc, cfg.schedule(level), init, train_data, test_data)
    lot_init, mask = lottery_init(pruned, init)
    lot = train(tc, lot_init, mask, train_data, test_data, "lottery")
    scr_init = scratch_init(cfg.arch, seed + SCRATCH_SEED_OFFSET, mask)
    scr = train(tc, scr_init, mask, train_data, test_data, "scratch")
    return SparseRuns(seed, level, init, pruned, lot_init, lot, scr_init, scr)


@dataclass
class SeedResult:
    seed: int
    accuracy: dict[str, float]
    start_profiles: dict[str, LossProfile]
    solution_line: LossProfile
    curves: dict[str, LossProfile]
    sweep: dict[float, float]
    runs: SparseRuns | None = None
    seconds: float = 0.0
    trio_seconds: float = 0.0

    def violation(self, name: str) -> float:
        return monotonicity_score(self.start_profiles[name], (0.0, 1.0)).violation_mass

    @property
    def barrier(self) -> float:
        return barrier_height(self.solution_line)

    @property
    def endpoint_gap(self) -> float:
        p = self.solution_line
        return abs(p.total[p.at(0.0)] - p.total[p.at(1.0)])

    def max_loss(self, name: str) -> float:
        prof = self.solution_line if name == "linear" else self.curves[name]
        sel = (prof.t >= -1e-9) & (prof.t <= 1 + 1e-9)
        return float(prof.total[sel].max())


def run_seed(
    cfg: ExperimentConfig,
    seed: int,
    level: float = REFERENCE_SPARSITY,
    grid_step: float = 0.01,
    zero_fractions=SWEEP_FRACTIONS,
    keep_runs: bool = False,
) -> SeedResult:
    t0 = time.perf_counter()
    train_data, test_data = cfg.dataset().train_test()
    runs = run_sparse_trio(cfg, seed, level, train_data, test_data)
    trio_seconds = time.perf_counter() - t0
    wd = cfg.train.weight_decay
    eval_kw = dict(eval_data=train_data, weight_decay=wd, batch_size=cfg.eval_batch_size, seed=cfg.eval_seed)

    line_grid = default_grid(-0.2, 1.2, grid_step)
    starts = {
        "dense_init": runs.init,
        "lottery_init": runs.lottery_init,
        "scratch_init": runs.scratch_init,
    }
    start_profiles = {
        name: profile_line(x, runs.pruned.params, line_grid, endpoints=(name, "pruned"), **eval_kw)
        for name, x in starts.items()
    }
    solution_line = profile_line(
        runs.scratch.params, runs.pruned.params, line_grid, endpoints=("scratch", "pruned"), **eval_kw
    )

    curve_grid = default_grid(0.0, 1.0, grid_step)
    pcfg = replace(cfg.path, seed=seed)
    curves = {}
    for name, order, constraint in (
        ("dense_quadratic", 2, None),
        ("sparse_quadratic", 2, runs.pruned.mask),
        ("sparse_cubic", 3, runs.pruned.mask),
    ):
        path, _ = optimize_path(runs.scratch, runs.pruned, order, constraint, pcfg, train_data)
        curves[name] = profile_path(path, curve_grid, endpoints=("scratch", "pruned"), **eval_kw)

    sweep = dict(sparse_init_sweep(with_seed(cfg.train, seed), cfg.arch, zero_fractions, train_data, test_data))
    acc = {
        "pruned": runs.pruned.final_accuracy,
        "lottery": runs.lottery.final_accuracy,
        "scratch": runs.scratch.final_accuracy,
    }
    return SeedResult(seed, acc, start_profiles, solution_line, curves, sweep,
                      runs if keep_runs else None, time.perf_counter() - t0, trio_seconds)


def median(values) -> float:
    return float(statistics.median(values))


def quadratic_residual(t: np.ndarray, y: np.ndarray) -> float:
    """Relative residual of a least-squares quadratic fit, ||y - fit|| / ||y||."""
    coef = np.polyfit(t, y, 2)
    resid = y - np.polyval(coef, t)
    scale = np.linalg.norm(y)
    return float(np.linalg.norm(resid) / scale) if scale > 0 else float(np.linalg.norm(resid))


@dataclass
class Replication:
    results: list[SeedResult] = field(default_factory=list)

    def med(self, fn) -> float:
        return median(fn(r) for r in self.results)

    def pruned_wins(self) -> tuple[bool, str]:
        p = self.med(lambda r: r.accuracy["pruned"])
        l = self.med(lambda r: r.accuracy["lottery"])
        s = self.med(lambda r: r.accuracy["scratch"])
        minutes = sum(r.trio_seconds for r in self.results) / 60
        ok = p > s and p > l and minutes < 15
        return ok, f"median test accuracy pruned {p:.4f}, lottery {l:.4f}, scratch {s:.4f}; training {minutes:.1f} min"

    def monotone_from_inits(self, tol: float = 0.01) -> tuple[bool, str]:
        meds = {n: self.med(lambda r, n=n: r.violation(n)) for n in ("dense_init", "lottery_init", "scratch_init")}
        ok = all(v < tol for v in meds.values())
        return ok, "median violation mass " + ", ".join(f"{k} {v:.4g}" for k, v in meds.items())

    def barrier_and_curves(self) -> tuple[bool, str]:
        barrier = self.med(lambda r: r.barrier)
        gap = self.med(lambda r: r.endpoint_gap)
        ratio = self.med(lambda r: r.barrier / r.endpoint_gap if r.endpoint_gap > 0 else np.inf)
        dq = self.med(lambda r: r.max_loss("dense_quadratic"))
        sq = self.med(lambda r: r.max_loss("sparse_quadratic"))
        lin = self.med(lambda r: r.max_loss("linear"))
        cubic = self.med(lambda r: barrier_height(r.curves["sparse_cubic"]))
        ok = barrier > 0 and ratio > 10 and dq < sq < lin and cubic > 0
        detail = (f"barrier {barrier:.4f}, endpoint gap {gap:.4f}, ratio {ratio:.1f}; max loss dense {dq:.4f} "
                  f"< sparse {sq:.4f} < linear {lin:.4f}; cubic sparse barrier {cubic:.4f}")
        return ok, detail

    def sparse_init_drop(self) -> tuple[bool, str]:
        base = self.med(lambda r: r.sweep[0.0])
        mid = self.med(lambda r: r.sweep[0.9])
        low = self.med(lambda r: r.sweep[0.999])
        ok = abs(mid - base) <= 0.02 and low <= base - 0.10
        return ok, f"median accuracy 0.0: {base:.4f}, 0.9: {mid:.4f}, 0.999: {low:.4f}"

    def l2_profiles(self, tol: float = 1e-9) -> tuple[bool, str]:
        worst = 0.0
        shrinks = True
        for r in self.results:
            for prof in [*r.start_profiles.values(), r.solution_line]:
                worst = max(worst, quadratic_residual(prof.t, prof.l2_term))
            dense = r.start_profiles["dense_init"]
            shrinks &= bool(dense.l2_term[dense.at(1.0)] < dense.l2_term[dense.at(0.0)])
        return worst < tol and shrinks, f"worst quadratic residual {worst:.3g}, pruned l2 below init l2 on every seed: {shrinks}"


def replicate(cfg: ExperimentConfig, seeds=REFERENCE_SEEDS, level: float = REFERENCE_SPARSITY) -> list[dict]:
    rep = Replication([run_seed(cfg, s, level) for s in seeds])
    rows = []
    for name, fn in (
        ("pruned_wins", rep.pruned_wins),
        ("monotone_from_inits", rep.monotone_from_inits),
        ("barrier_and_curves", rep.barrier_and_curves),
        ("sparse_init_drop", rep.sparse_init_drop),
        ("l2_profiles", rep.l2_profiles),
    ):
        ok, detail = fn()
        rows.append({"criterion": name, "passed": int(ok), "detail": detail})
    return rows
