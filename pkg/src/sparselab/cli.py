"""Command-line entry point: ``sparselab <command> ...``.

Exit codes: 0 success, 1 validation error (bad config, missing or
incompatible inputs), 2 runtime failure (divergence, I/O).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import experiments
from .checkpoint import Checkpoint, CheckpointError, atomic_write, history_csv, read_checkpoint, write_checkpoint
from .config import ConfigError, ExperimentConfig, build_config, default_config, load_config
from .landscape import LossProfile, barrier_height, monotonicity_score, profile_line
from .net import init_params
from .params import LayoutMismatch, check_layouts
from .pathfinder import BezierPath, optimize_path, profile_path, sweep_path
from .sparsity import mask_sparsity
from .training import (
    Solution,
    TrainingDiverged,
    lottery_init,
    prune_train,
    random_zero_init,
    scratch_init,
    sparse_init_sweep,
    train,
    with_seed,
)

log = logging.getLogger("sparselab")

METHODS = ("pruned", "lottery", "scratch", "sparse_init")


class UsageError(Exception):
    """Validation failure reported with exit code 1."""


def level_dir(out: Path, level: float) -> Path:
    return out / f"s{level:g}"


def _require(path: Path) -> Path:
    if not path.exists():
        raise UsageError(f"missing prerequisite: {path}")
    return path


def _load(path) -> Checkpoint:
    try:
        return read_checkpoint(_require(Path(path)))
    except CheckpointError as exc:
        raise UsageError(f"{path}: {exc}") from exc


def _provenance(cfg: ExperimentConfig, label: str, command: str, seed: int, step: int, **extra) -> dict:
    return {"label": label, "command": command, "config_hash": cfg.hash(), "seed": seed, "step": step, **extra}


def _save_solution(path: Path, sol: Solution, prov: dict) -> None:
    write_checkpoint(path, Checkpoint([sol.params], sol.mask, sol.bn_stats, prov))
    atomic_write(path.with_name(path.stem + "_history.csv"), history_csv(sol.history).encode())
    log.info("wrote %s (final accuracy %.4f)", path, sol.final_accuracy)


def _levels(cfg: ExperimentConfig, args) -> list[float]:
    return [args.sparsity] if args.sparsity is not None else cfg.sparsity_levels


# --- training commands -------------------------------------------------------

def cmd_train_dense(cfg: ExperimentConfig, args) -> None:
    train_data, test_data = cfg.dataset().train_test()
    tc = with_seed(cfg.train, args.seed)
    init = init_params(cfg.arch, args.seed)
    write_checkpoint(cfg.out_dir / "init.ckpt", Checkpoint([init], provenance=_provenance(cfg, "init", "train-dense", args.seed, 0)))
    sol = train(tc, init, None, train_data, test_data, "dense")
    _save_solution(cfg.out_dir / "dense.ckpt", sol, _provenance(cfg, "dense", "train-dense", args.seed, tc.total_steps))


def cmd_prune(cfg: ExperimentConfig, args) -> None:
    init = _load(cfg.out_dir / "init.ckpt").params
    check_layouts(init.layout, init_params(cfg.arch, 0).layout)
    train_data, test_data = cfg.dataset().train_test()
    tc = with_seed(cfg.train, args.seed)
    for level in _levels(cfg, args):
        sched = cfg.schedule(level)
        sol = prune_train(tc, sched, init, train_data, test_data)
        prov = _provenance(cfg, "pruned", "prune", args.seed, tc.total_steps, sparsity=level,
                           prunable_sparsity=mask_sparsity(sol.mask, "prunable_only"))
        _save_solution(level_dir(cfg.out_dir, level) / "pruned.ckpt", sol, prov)


def cmd_train_sparse(cfg: ExperimentConfig, args) -> None:
    train_data, test_data = cfg.dataset().train_test()
    tc = with_seed(cfg.train, args.seed)
    for level in _levels(cfg, args):
        d = level_dir(cfg.out_dir, level)
        pruned_ck = _load(d / "pruned.ckpt")
        pruned = Solution(pruned_ck.params, pruned_ck.mask, [], "pruned")
        if pruned.mask is None:
            raise UsageError(f"{d / 'pruned.ckpt'} carries no mask")
        if args.init == "scratch":
            start, mask = scratch_init(cfg.arch, args.seed + experiments.SCRATCH_SEED_OFFSET, pruned.mask), pruned.mask
        elif args.init == "lottery":
            start, mask = lottery_init(pruned, _load(cfg.out_dir / "init.ckpt").params)
        else:
            # same fraction of weights zeroed uniformly at random, trained densely
            start, mask = random_zero_init(_load(cfg.out_dir / "init.ckpt").params, level, args.seed), None
        init_label = f"{args.init}_init"
        write_checkpoint(d / f"{init_label}.ckpt",
                         Checkpoint([start], mask, provenance=_provenance(cfg, init_label, "train-sparse", args.seed, 0, sparsity=level)))
        sol = train(tc, start, mask, train_data, test_data, args.init)
        prov = _provenance(cfg, args.init, "train-sparse", args.seed, tc.total_steps, sparsity=level)
        _save_solution(d / f"{args.init}.ckpt", sol, prov)


def cmd_sparse_init_sweep(cfg: ExperimentConfig, args) -> None:
    train_data, test_data = cfg.dataset().train_test()
    rows = sparse_init_sweep(with_seed(cfg.train, args.seed), cfg.arch, cfg.zero_fractions, train_data, test_data)
    text = "zero_fraction,accuracy\n" + "".join(f"{f:.17g},{a:.17g}\n" for f, a in rows)
    atomic_write(cfg.out_dir / "sparse_init_sweep.csv", text.encode())


def cmd_pipeline(cfg: ExperimentConfig, args) -> None:
    """dense -> prune -> lottery -> scratch (-> sparse_init) for each level."""
    cmd_train_dense(cfg, args)
    cmd_prune(cfg, args)
    for init in ("lottery", "scratch", "sparse_init"):
        args.init = init
        cmd_train_sparse(cfg, args)


# --- landscape commands --------------------------------------------------------

def _grid(cfg: ExperimentConfig, spec: str | None):
    if spec is None:
        return cfg.t_grid()
    from .landscape import default_grid

    try:
        lo, hi, step = (float(x) for x in spec.split(":"))
    except ValueError:
        raise UsageError(f"--grid must look like LO:HI:STEP, got {spec!r}")
    if not (lo < hi and step > 0):
        raise UsageError("--grid needs LO < HI and STEP > 0")
    return default_grid(lo, hi, step)


def _pair(a_path, b_path) -> tuple[Checkpoint, Checkpoint]:
    a, b = _load(a_path), _load(b_path)
    try:
        check_layouts(a.params.layout, b.params.layout)
    except LayoutMismatch as exc:
        raise UsageError(f"checkpoints are not layout-compatible: {exc}") from exc
    return a, b


def summary_row(profile: LossProfile) -> dict:
    score = monotonicity_score(profile, (0.0, 1.0))
    try:
        barrier = barrier_height(profile)
    except ValueError:
        barrier = math.nan
    return {
        "start": profile.endpoints[0],
        "end": profile.endpoints[1],
        "num_increases": score.num_increases,
        "max_increase": score.max_increase,
        "violation_mass": score.violation_mass,
        "degenerate": int(score.degenerate),
        "barrier_height": barrier,
    }


def _csv_dicts(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(rows[0].keys())
    for r in rows:
        w.writerow([f"{v:.17g}" if isinstance(v, float) else v for v in r.values()])
    return buf.getvalue()


def _endpoint_label(ck: Checkpoint, path) -> str:
    level = ck.provenance.get("sparsity")
    base = ck.label or Path(path).stem
    return f"{base}@{level:g}" if level is not None else base


def cmd_interpolate(cfg: ExperimentConfig, args) -> None:
    a, b = _pair(args.checkpoint_a, args.checkpoint_b)
    train_data = cfg.dataset().subset("train")
    labels = (_endpoint_label(a, args.checkpoint_a), _endpoint_label(b, args.checkpoint_b))
    prof = profile_line(a.params, b.params, _grid(cfg, args.grid), train_data, cfg.train.weight_decay,
                        cfg.eval_batch_size, cfg.eval_seed, labels, cfg.workers, cfg.train.l2_scope)
    name = args.name or f"{Path(args.checkpoint_a).stem}__{Path(args.checkpoint_b).stem}"
    out = cfg.out_dir / "profiles"
    prof.to_csv(out / f"{name}.csv")
    atomic_write(out / f"{name}_summary.csv", _csv_dicts([summary_row(prof)]).encode())
    log.info("wrote %s", out / f"{name}.csv")


def cmd_find_path(cfg: ExperimentConfig, args) -> None:
    a, b = _pair(args.checkpoint_a, args.checkpoint_b)
    constraint = None
    if args.subspace == "sparse":
        if a.mask is None or b.mask is None or not a.mask.bitwise_equal(b.mask):
            raise UsageError("--subspace sparse needs both checkpoints to carry the same mask")
        constraint = a.mask
    train_data = cfg.dataset().subset("train")
    pcfg = cfg.path if args.seed is None else type(cfg.path)(**{**cfg.path.to_dict(), "seed": args.seed})
    name = args.name or f"{Path(args.checkpoint_a).stem}__{Path(args.checkpoint_b).stem}_o{args.order}_{args.subspace}"
    out = cfg.out_dir / "paths"
    trace = None
    if args.sweep:
        results = sweep_path(a.params, b.params, args.order, constraint, pcfg, train_data)
        rows = [{"base_lr": r.base_lr, "momentum": r.momentum, "max_loss": r.max_loss} for r in results]
        atomic_write(out / f"{name}_sweep.csv", _csv_dicts(rows).encode())
        best = results[0]
        if best.path is None:
            raise TrainingDiverged(-1, math.inf)
        path = best.path
        pcfg = type(pcfg)(**{**pcfg.to_dict(), "base_lr": best.base_lr, "momentum": best.momentum})
    else:
        path, trace = optimize_path(a.params, b.params, args.order, constraint, pcfg, train_data)
    labels = (_endpoint_label(a, args.checkpoint_a), _endpoint_label(b, args.checkpoint_b))
    prof = profile_path(path, _grid(cfg, args.grid or "0:1:0.01"), train_data, pcfg.weight_decay,
                        cfg.eval_batch_size, cfg.eval_seed, labels, cfg.workers, pcfg.l2_scope)
    prov = _provenance(cfg, "path", "find-path", pcfg.seed, pcfg.steps, order=args.order,
                       subspace=args.subspace, base_lr=pcfg.base_lr, momentum=pcfg.momentum)
    write_checkpoint(out / f"{name}.ckpt", Checkpoint(path.control_points, constraint, provenance=prov))
    prof.to_csv(out / f"{name}_profile.csv")
    atomic_write(out / f"{name}_summary.csv", _csv_dicts([summary_row(prof)]).encode())
    if trace is not None:
        atomic_write(out / f"{name}_trace.csv", trace.to_csv().encode())


# --- reporting -----------------------------------------------------------------

def _last_accuracy(history_path: Path) -> float:
    rows = list(csv.DictReader(history_path.open()))
    if not rows:
        raise UsageError(f"{history_path} has no rows")
    return float(rows[-1]["eval_accuracy"])


def _long_profiles(files: list[tuple[Path, dict]]) -> str:
    lines = ["source,start,end,t,total,cross_entropy,l2_term,accuracy"]
    for path, meta in files:
        prof = LossProfile.from_csv(path.read_text())
        for row in zip(prof.t, prof.total, prof.cross_entropy, prof.l2_term, prof.accuracy):
            lines.append(f"{path.stem},{meta['start']},{meta['end']}," + ",".join(f"{v:.17g}" for v in row))
    return "\n".join(lines) + "\n"


def cmd_report(cfg: ExperimentConfig, args) -> None:
    root = Path(args.experiment_dir)
    if not root.is_dir():
        raise UsageError(f"missing experiment directory: {root}")
    rows, missing = [], []
    for d in sorted(root.glob("s*"), key=lambda p: float(p.name[1:]) if p.name[1:].replace(".", "").isdigit() else math.inf):
        try:
            level = float(d.name[1:])
        except ValueError:
            continue
        for method in METHODS:
            hist = d / f"{method}_history.csv"
            if hist.exists():
                rows.append({"sparsity": level, "method": method, "test_accuracy": _last_accuracy(hist)})
            else:
                missing.append(f"{d.name}/{method}")
    if missing:
        raise UsageError("incomplete runs: " + ", ".join(missing))
    if not rows:
        raise UsageError(f"no completed runs under {root}")
    atomic_write(root / "summary.csv", _csv_dicts(rows).encode())

    init_lines, solution_paths = [], []
    for summary in sorted(root.glob("**/*_summary.csv")):
        meta = next(csv.DictReader(summary.open()))
        prof_path = summary.with_name(summary.name.replace("_summary.csv", ".csv"))
        if not prof_path.exists():
            prof_path = summary.with_name(summary.name.replace("_summary.csv", "_profile.csv"))
        if not prof_path.exists():
            continue
        is_init = meta["start"].split("@")[0].endswith("init") and meta["end"].startswith("pruned")
        target = init_lines if is_init and summary.parent.name == "profiles" else solution_paths
        target.append((prof_path, meta))
    atomic_write(root / "init_lines.csv", _long_profiles(init_lines).encode())
    atomic_write(root / "solution_paths.csv", _long_profiles(solution_paths).encode())
    sweep = root / "sparse_init_sweep.csv"
    atomic_write(root / "sweep_accuracy.csv", sweep.read_bytes() if sweep.exists() else b"zero_fraction,accuracy\n")


def cmd_config(cfg_unused, args) -> None:
    raw = experiments.reference_overrides() if args.preset == "reference" else default_config()
    text = json.dumps(build_config(raw).raw, indent=2, sort_keys=True) + "\n"
    if args.out_file:
        atomic_write(Path(args.out_file), text.encode())
    else:
        sys.stdout.write(text)


def cmd_replicate(cfg: ExperimentConfig, args) -> None:
    seeds = [int(s) for s in args.seeds.split(",")]
    rows = experiments.replicate(cfg, seeds, level=args.sparsity if args.sparsity is not None else 0.9)
    atomic_write(cfg.out_dir / "replication.csv", _csv_dicts(rows).encode())
    for r in rows:
        print(f"{r['criterion']}: {'PASS' if r['passed'] else 'FAIL'} ({r['detail']})")


# --- argument parsing -----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sparselab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed_default=True):
        sp.add_argument("--config", help="experiment JSON file (defaults built in)")
        sp.add_argument("--out", help="output directory (overrides config)")
        if seed_default:
            sp.add_argument("--seed", type=int, help="training seed (overrides train.seed)")

    sp = sub.add_parser("config", help="print a config template")
    sp.add_argument("--preset", choices=("default", "reference"), default="default")
    sp.add_argument("--out-file")
    sp.set_defaults(func=cmd_config, needs_config=False)

    for name, fn, hlp in (
        ("train-dense", cmd_train_dense, "dense training from a fresh init"),
        ("prune", cmd_prune, "dense training with gradual magnitude pruning"),
        ("sparse-init-sweep", cmd_sparse_init_sweep, "random zeroing of initial weights"),
        ("pipeline", cmd_pipeline, "dense, prune, lottery, scratch and sparse_init runs"),
    ):
        sp = sub.add_parser(name, help=hlp)
        common(sp)
        if name in ("prune", "pipeline"):
            sp.add_argument("--sparsity", type=float, help="single level (default: config levels)")
        sp.set_defaults(func=fn)

    sp = sub.add_parser("train-sparse", help="masked training from the pruned mask")
    common(sp)
    sp.add_argument("--init", choices=("lottery", "scratch", "sparse_init"), required=True)
    sp.add_argument("--sparsity", type=float)
    sp.set_defaults(func=cmd_train_sparse)

    sp = sub.add_parser("interpolate", help="loss profile along the segment A -> B")
    common(sp, seed_default=False)
    sp.add_argument("checkpoint_a")
    sp.add_argument("checkpoint_b")
    sp.add_argument("--grid", help="LO:HI:STEP (default from config, -0.2:1.2:0.01)")
    sp.add_argument("--name")
    sp.set_defaults(func=cmd_interpolate, seed=None)

    sp = sub.add_parser("find-path", help="optimize a Bezier curve between A and B")
    common(sp)
    sp.add_argument("checkpoint_a")
    sp.add_argument("checkpoint_b")
    sp.add_argument("--order", type=int, choices=(2, 3), default=2)
    sp.add_argument("--subspace", choices=("sparse", "dense"), default="dense")
    sp.add_argument("--sweep", action="store_true", help="4x4 lr/momentum grid, keep the best")
    sp.add_argument("--grid", help="LO:HI:STEP within [0, 1] (default 0:1:0.01)")
    sp.add_argument("--name")
    sp.set_defaults(func=cmd_find_path)

    sp = sub.add_parser("report", help="summarize a finished experiment directory")
    sp.add_argument("experiment_dir")
    sp.set_defaults(func=cmd_report, needs_config=False)

    sp = sub.add_parser("replicate", help="run the directional replication checks over seeds")
    common(sp, seed_default=False)
    sp.add_argument("--seeds", default="1,2,3,4,5")
    sp.add_argument("--sparsity", type=float)
    sp.set_defaults(func=cmd_replicate, seed=None)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = None
        if getattr(args, "needs_config", True):
            cfg = load_config(args.config) if args.config else build_config()
            if args.out:
                cfg = build_config({**cfg.raw, "out_dir": args.out})
            if getattr(args, "seed", None) is None and args.command not in ("interpolate", "replicate", "find-path"):
                args.seed = cfg.train.seed
        args.func(cfg, args)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except (UsageError, LayoutMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except TrainingDiverged as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
