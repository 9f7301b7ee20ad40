"""Acceptance gate. Each test prints one PASS/FAIL line, then asserts.

Criteria 6-10 share one five-seed run of the reference task (several
minutes on one core); deselect them with ``-m "not slow"``.
"""

import json
import math
import time

import numpy as np
import pytest

from conftest import central_fd, max_rel_err, random_params
from sparselab.checkpoint import dumps, loads, read_checkpoint, write_checkpoint
from sparselab.cli import main
from sparselab.data import IDX_DTYPES, make_synthetic, parse_idx, serialize_idx
from sparselab.experiments import REFERENCE_SEEDS, Replication, reference_config, run_seed
from sparselab.net import grad, init_params, loss
from sparselab.params import Architecture, ParamVector
from sparselab.pathfinder import BezierPath, bernstein, bezier_point, path_grad
from sparselab.sparsity import Exclusions, PruningSchedule, magnitude_mask, target_sparsity
from sparselab.training import LrSchedule, TrainConfig, prune_train, train


@pytest.fixture
def verdict(capsys):
    def report(number: int, name: str, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} [{number:2d}] {name}: {detail}")
        assert ok, detail

    return report


@pytest.fixture(scope="module")
def moons():
    return make_synthetic("moons", 200, 0.1, seed=0)


# --- 1 ---------------------------------------------------------------------------------

def test_01_gradient_oracle(verdict, moons):
    t0 = time.perf_counter()
    x, y = moons.features[:40], moons.labels[:40]
    worst, sizes = 0.0, []
    for arch in (Architecture([2, 16, 16, 2], use_batchnorm=True), Architecture([2, 24, 12, 2])):
        theta = random_params(arch, 1, 0.5)
        sizes.append(theta.layout.size)
        assert theta.layout.size <= 1000

        def f(v, arch=arch):
            return loss(ParamVector(v, theta.layout), x, y, 1e-3).total

        worst = max(worst, max_rel_err(grad(theta, x, y, 1e-3).values, central_fd(f, theta.values.copy())))
    secs = time.perf_counter() - t0
    verdict(1, "gradient oracle", worst < 1e-4 and secs < 60,
            f"max relative error {worst:.2e} on {sizes} params in {secs:.1f}s")


# --- 2 ---------------------------------------------------------------------------------

def test_02_path_gradient_oracle(verdict, moons):
    arch = Architecture([2, 8, 6, 2], use_batchnorm=True)
    x, y = moons.features[:32], moons.labels[:32]
    worst_fd = 0.0
    for order in (2, 3):
        path = BezierPath([random_params(arch, 10 * order + i, 0.7) for i in range(order + 1)])
        t = 0.41
        grads = path_grad(path, t, x, y, 1e-3)
        for i in range(1, order):
            cp = path.control_points[i]

            def f(v, i=i, path=path, cp=cp):
                pts = list(path.control_points)
                pts[i] = ParamVector(v, cp.layout)
                return loss(bezier_point(BezierPath(pts), t), x, y, 1e-3).total

            worst_fd = max(worst_fd, max_rel_err(grads[i - 1].values, central_fd(f, cp.values.copy())))

    rng = np.random.default_rng(2)
    worst_scale = 0.0
    path = BezierPath([random_params(arch, i, 0.7) for i in range(4)])
    for t in rng.uniform(0, 1, 20):
        full = grad(bezier_point(path, t), x, y, 1e-3).values
        for i, g in enumerate(path_grad(path, t, x, y, 1e-3), start=1):
            worst_scale = max(worst_scale, max_rel_err(g.values, bernstein(3, i, t) * full, 1e-300))
    verdict(2, "path-gradient oracle", worst_fd < 1e-4 and worst_scale < 1e-12,
            f"finite-difference error {worst_fd:.2e}, Bernstein scaling error {worst_scale:.2e} at 20 t")


# --- 3 ---------------------------------------------------------------------------------

def test_03_bernstein_properties(verdict):
    rng = np.random.default_rng(3)
    ts = rng.uniform(0, 1, 1000)
    worst = max(abs(math.fsum(bernstein(n, i, t) for i in range(n + 1)) - 1.0) for n in (2, 3) for t in ts)
    exact = True
    arch = Architecture([2, 6, 2])
    for n in (2, 3):
        path = BezierPath([random_params(arch, 30 + i) for i in range(n + 1)])
        exact &= bezier_point(path, 0.0).bitwise_equal(path.control_points[0])
        exact &= bezier_point(path, 1.0).bitwise_equal(path.control_points[-1])
    verdict(3, "Bernstein properties", worst <= 1e-12 and exact,
            f"partition-of-unity error {worst:.1e} over 2000 evaluations, endpoints bitwise: {exact}")


# --- 4 ---------------------------------------------------------------------------------

def test_04_mask_conservation(verdict, moons):
    arch = Architecture([2, 32, 32, 2], use_batchnorm=True)
    init = init_params(arch, 4)
    mask = magnitude_mask(random_params(arch, 5), 0.9, Exclusions(skip_first=False, final_cap=None))
    dropped = ~mask.bits
    bad = []

    def check(step, theta, velocity, _mask):
        if np.any(theta[dropped] != 0.0) or np.any(velocity[dropped] != 0.0):
            bad.append(step)

    steps = []
    cfg = TrainConfig(total_steps=1000, batch_size=32, weight_decay=1e-4, seed=4,
                      lr=LrSchedule(base_lr=0.1, warmup_steps=50, drop_steps=(600,)))
    sol = train(cfg, init, mask, moons, callback=lambda s, *a: (steps.append(s), check(s, *a)))
    final_ok = bool(np.all(sol.params.values[dropped] == 0.0))
    ok = not bad and final_ok and len(steps) == 1000
    verdict(4, "mask conservation", ok,
            f"{len(steps)} steps, {int(dropped.sum())} masked coordinates, nonzero at {len(bad)} steps")


# --- 5 ---------------------------------------------------------------------------------

def _cubic(s_i, s_f, t0, n_dt, t):
    if t < t0:
        return 0.0
    if t >= t0 + n_dt:
        return s_f
    return s_f + (s_i - s_f) * (1 - (t - t0) / n_dt) ** 3


def test_05_schedule_exactness(verdict, moons):
    sched = PruningSchedule(start_step=37, end_step=1237, frequency=50, final_sparsity=0.93, initial_sparsity=0.05)
    rng = np.random.default_rng(5)
    sampled = rng.integers(0, 1500, 100)
    worst = max(abs(target_sparsity(sched, int(t)) - _cubic(0.05, 0.93, 37, 1200, int(t))) for t in sampled)
    ramp = [target_sparsity(sched, t) for t in range(1500)]
    monotone = all(b >= a for a, b in zip(ramp, ramp[1:]))

    arch = Architecture([2, 24, 24, 2], use_batchnorm=True)
    excl = Exclusions(skip_first=True, final_cap=0.8)
    level = 0.9
    cfg = TrainConfig(total_steps=300, batch_size=32, seed=5, lr=LrSchedule(base_lr=0.1, warmup_steps=10))
    sol = prune_train(cfg, PruningSchedule(20, 240, 20, level, exclusions=excl), init_params(arch, 5), moons)
    misses = []
    layout = sol.params.layout
    segs = layout.weight_segments()
    for k, seg in enumerate(segs):
        goal = 0.0 if k == 0 else (min(level, 0.8) if k == len(segs) - 1 else level)
        zeros = int((~sol.mask.bits[seg.offset:seg.offset + seg.size]).sum())
        misses.append(abs(zeros - goal * seg.size))
    ok = worst <= 1e-12 and monotone and max(misses) <= 1
    verdict(5, "schedule exactness", ok,
            f"max formula error {worst:.1e} at 100 steps, monotone: {monotone}, per-layer miss {max(misses):.2f} elements")


# --- 6-10: reference task -------------------------------------------------------------

@pytest.fixture(scope="module")
def replication():
    cfg = reference_config()
    return Replication([run_seed(cfg, s) for s in REFERENCE_SEEDS])


@pytest.mark.slow
def test_06_pruned_beats_lottery_and_scratch(verdict, replication):
    verdict(6, "pruned > lottery, scratch at 90%", *replication.pruned_wins())


@pytest.mark.slow
def test_07_linear_profiles_monotone(verdict, replication):
    verdict(7, "monotone linear profiles to the pruned solution", *replication.monotone_from_inits(0.01))


@pytest.mark.slow
def test_08_barrier_and_curves(verdict, replication):
    verdict(8, "scratch-pruned barrier and Bezier ordering", *replication.barrier_and_curves())


@pytest.mark.slow
def test_09_sparse_init_sweep(verdict, replication):
    verdict(9, "random-zero initialization sweep", *replication.sparse_init_drop())


@pytest.mark.slow
def test_10_l2_profiles(verdict, replication):
    verdict(10, "quadratic l2 profiles, pruned lighter than init", *replication.l2_profiles(1e-9))


# --- 11 --------------------------------------------------------------------------------

TINY = {
    "task": {"kind": "moons", "n": 120, "noise": 0.1, "seed": 0},
    "arch": {"layer_sizes": [2, 10, 2], "use_batchnorm": True},
    "train": {"total_steps": 30, "batch_size": 16, "log_every": 10,
              "lr": {"base_lr": 0.1, "warmup_steps": 3, "drop_steps": [20], "drop_factor": 0.1}},
    "prune": {"start_step": 4, "end_step": 20, "frequency": 4,
              "exclusions": {"skip_first": False, "final_cap": None}},
    "path": {"steps": 10, "batch_size": 16},
    "grids": {"sparsity_levels": [0.7], "zero_fractions": [0.0, 0.5]},
}

IDX_FIXTURES = [
    bytes([0, 0, 0x08, 0x01, 0, 0, 0, 3, 7, 2, 9]),
    bytes([0, 0, 0x08, 0x03, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2]) + bytes(range(10, 18)),
    bytes([0, 0, 0x0B, 0x01, 0, 0, 0, 2, 0x01, 0x02, 0xFF, 0xFE]),
    bytes([0, 0, 0x0D, 0x02, 0, 0, 0, 1, 0, 0, 0, 2, 0x3F, 0x80, 0, 0, 0xC0, 0, 0, 0]),
]


def test_11_round_trips(verdict, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["pipeline", "--config", str(cfg), "--out", str(out)]) == 0
        a, b = out / "s0.7" / "scratch.ckpt", out / "s0.7" / "pruned.ckpt"
        assert main(["interpolate", str(a), str(b), "--name", "line", "--config", str(cfg), "--out", str(out)]) == 0
        runs.append(out)
    csvs = sorted(p.relative_to(runs[0]) for p in runs[0].rglob("*.csv"))
    csv_same = bool(csvs) and all((runs[0] / p).read_bytes() == (runs[1] / p).read_bytes() for p in csvs)

    ckpt_same = True
    for p in runs[0].rglob("*.ckpt"):
        raw = p.read_bytes()
        ck = read_checkpoint(p)
        write_checkpoint(tmp_path / "copy.ckpt", ck)
        ckpt_same &= (tmp_path / "copy.ckpt").read_bytes() == raw and dumps(loads(raw)) == raw
    special = read_checkpoint(runs[0] / "dense.ckpt")
    special.vectors[0].values[:3] = [np.nan, -0.0, 5e-324]
    back = loads(dumps(special))
    ckpt_same &= back.params.values.tobytes() == special.params.values.tobytes()

    idx_same = all(serialize_idx(parse_idx(raw)[0], raw[2]) == raw for raw in IDX_FIXTURES)
    idx_same &= all(parse_idx(raw)[1].type_code in IDX_DTYPES for raw in IDX_FIXTURES)
    ok = csv_same and ckpt_same and idx_same
    verdict(11, "round-trips", ok,
            f"{len(csvs)} CSVs byte-identical across reruns: {csv_same}, checkpoints bitwise: {ckpt_same}, "
            f"IDX fixtures: {idx_same}")
