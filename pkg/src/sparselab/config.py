"""Experiment configuration: a single JSON document per experiment.

Top-level keys (all optional, defaults shown by ``default_config()``)::

    task        {"kind": "spirals"|"blobs"|"moons"|"idx", "n", "noise", "seed",
                 "n_classes", "turns", "test_fraction", "images", "labels"}
    arch        {"layer_sizes": [...], "use_batchnorm": bool | [bool...]}
    train       TrainConfig fields; "lr" holds LrSchedule fields
    prune       {"start_step", "end_step", "frequency", "initial_sparsity",
                 "exponent", "monotone", "exclusions": {...}}
    path        PathOptConfig fields
    grids       {"t_lo", "t_hi", "t_step", "sparsity_levels", "zero_fractions"}
    eval        {"batch_size": int | null, "seed": int}
    out_dir     output directory

Environment overrides: ``SPARSELAB_OUT`` (out_dir) and ``SPARSELAB_THREADS``
(profile worker pool size).
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

from .data import Dataset, load_idx, make_synthetic
from .params import Architecture
from .pathfinder import PathOptConfig
from .sparsity import Exclusions, PruningSchedule
from .training import LrSchedule, TrainConfig

DEFAULT_SPARSITY_LEVELS = [0.8, 0.91, 0.96, 0.98]
DEFAULT_ZERO_FRACTIONS = [0.0, 0.5, 0.8, 0.9, 0.95, 0.98, 0.99, 0.995, 0.999]


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        super().__init__("invalid config:\n  " + "\n  ".join(errors))
        self.errors = errors


def default_config() -> dict:
    """Desk-scale defaults (3000 steps, batch 128, lr 0.1, weight decay 1e-4)."""
    total = 3000
    lr = LrSchedule.desk_default(total)
    return {
        "task": {"kind": "spirals", "n": 2000, "noise": 0.1, "seed": 0, "n_classes": 2,
                 "turns": 1.0, "test_fraction": 0.25},
        "arch": {"layer_sizes": [2, 64, 64, 2], "use_batchnorm": False},
        "train": TrainConfig(total_steps=total, lr=lr).to_dict(),
        "prune": {"start_step": 750, "end_step": 2500, "frequency": 100, "initial_sparsity": 0.0,
                  "exponent": 3, "monotone": True, "exclusions": Exclusions().to_dict()},
        "path": PathOptConfig().to_dict(),
        "grids": {"t_lo": -0.2, "t_hi": 1.2, "t_step": 0.01,
                  "sparsity_levels": list(DEFAULT_SPARSITY_LEVELS),
                  "zero_fractions": list(DEFAULT_ZERO_FRACTIONS)},
        "eval": {"batch_size": None, "seed": 0},
        "out_dir": "runs",
    }


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("caps",):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class ExperimentConfig:
    raw: dict
    arch: Architecture
    train: TrainConfig
    path: PathOptConfig
    out_dir: Path

    @property
    def task(self) -> dict:
        return self.raw["task"]

    @property
    def grids(self) -> dict:
        return self.raw["grids"]

    @property
    def sparsity_levels(self) -> list[float]:
        return list(self.grids["sparsity_levels"])

    @property
    def zero_fractions(self) -> list[float]:
        return list(self.grids["zero_fractions"])

    @property
    def eval_batch_size(self) -> int | None:
        return self.raw["eval"]["batch_size"]

    @property
    def eval_seed(self) -> int:
        return self.raw["eval"]["seed"]

    @property
    def workers(self) -> int | None:
        env = os.environ.get("SPARSELAB_THREADS")
        return int(env) if env else None

    def schedule(self, final_sparsity: float) -> PruningSchedule:
        return PruningSchedule.from_dict({**self.raw["prune"], "final_sparsity": final_sparsity})

    def t_grid(self):
        from .landscape import default_grid

        g = self.grids
        return default_grid(g["t_lo"], g["t_hi"], g["t_step"])

    def dataset(self) -> Dataset:
        t = self.task
        if t["kind"] == "idx":
            return load_idx(t["images"], t["labels"], t.get("test_fraction", 0.25), t.get("seed", 0))
        return make_synthetic(
            t["kind"], t["n"], t["noise"], t["seed"], t.get("n_classes"),
            t.get("test_fraction", 0.25), t.get("turns", 1.0),
        )

    def hash(self) -> str:
        return config_hash(self.raw)


def config_hash(raw: dict) -> str:
    """Hash of the canonical JSON form; key order and out_dir do not matter."""
    body = {k: v for k, v in raw.items() if k != "out_dir"}
    canon = json.dumps(body, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _check(errors: list[str], where: str, fn):
    try:
        return fn()
    except (ValueError, TypeError, KeyError) as exc:
        errors.append(f"{where}: {exc}")
        return None


def build_config(override: dict | None = None) -> ExperimentConfig:
    """Merge ``override`` over the defaults and validate every section.

    All violations are collected and raised together as a ConfigError.
    """
    raw = _merge(default_config(), override or {})
    if os.environ.get("SPARSELAB_OUT"):
        raw["out_dir"] = os.environ["SPARSELAB_OUT"]
    errors: list[str] = []
    known = set(default_config())
    for k in raw:
        if k not in known:
            errors.append(f"{k}: unknown top-level key")

    arch = _check(errors, "arch", lambda: Architecture.from_dict(raw["arch"]))
    train = _check(errors, "train", lambda: TrainConfig.from_dict(raw["train"]))
    path = _check(errors, "path", lambda: PathOptConfig(**raw["path"]))
    levels = raw["grids"].get("sparsity_levels", [])
    for s in levels:
        if not (isinstance(s, (int, float)) and 0.0 <= s < 1.0):
            errors.append(f"grids.sparsity_levels: {s!r} is not in [0, 1)")
    for f in raw["grids"].get("zero_fractions", []):
        if not (isinstance(f, (int, float)) and 0.0 <= f < 1.0):
            errors.append(f"grids.zero_fractions: {f!r} is not in [0, 1)")
    g = raw["grids"]
    if not g["t_step"] > 0 or not g["t_lo"] < g["t_hi"]:
        errors.append("grids: need t_lo < t_hi and t_step > 0")
    _check(errors, "prune", lambda: PruningSchedule.from_dict({**raw["prune"], "final_sparsity": max(levels or [0.0])}))
    if train is not None and raw["prune"]["end_step"] > train.total_steps:
        errors.append(f"prune.end_step: {raw['prune']['end_step']} exceeds train.total_steps {train.total_steps}")
    task = raw["task"]
    if task.get("kind") not in ("spirals", "blobs", "moons", "idx"):
        errors.append(f"task.kind: unknown kind {task.get('kind')!r}")
    elif task["kind"] == "idx":
        for key in ("images", "labels"):
            if not task.get(key):
                errors.append(f"task.{key}: required for idx tasks")
    else:
        if not isinstance(task.get("n"), int) or task["n"] < 10:
            errors.append("task.n: must be an integer >= 10")
        if not isinstance(task.get("noise"), (int, float)) or task["noise"] < 0:
            errors.append("task.noise: must be >= 0")
    if arch is not None and task.get("kind") != "idx":
        if arch.layer_sizes[0] != 2:
            errors.append(f"arch.layer_sizes: synthetic tasks have 2 input features, got {arch.layer_sizes[0]}")
        k = task.get("n_classes") or (2 if task.get("kind") != "blobs" else 3)
        if arch.n_classes != k:
            errors.append(f"arch.layer_sizes: output size {arch.n_classes} != task classes {k}")
    if errors:
        raise ConfigError(errors)
    return ExperimentConfig(raw, arch, train, path, Path(raw["out_dir"]))


def load_config(path) -> ExperimentConfig:
    try:
        override = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: not valid JSON ({exc})"]) from exc
    if not isinstance(override, dict):
        raise ConfigError([f"{path}: top level must be a JSON object"])
    return build_config(override)
