import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import central_fd, max_rel_err, random_params
from sparselab.data import make_synthetic
from sparselab.landscape import default_grid, profile_line
from sparselab.net import grad, loss
from sparselab.params import Architecture, ParamVector
from sparselab.pathfinder import (
    BezierPath,
    PathOptConfig,
    bernstein,
    bezier_point,
    optimize_path,
    path_grad,
    path_lr,
    profile_path,
    sweep_path,
)
from sparselab.sparsity import Exclusions, apply_mask, magnitude_mask
from sparselab.training import TrainingDiverged

ARCH = Architecture([2, 8, 2])


@pytest.fixture(scope="module")
def data():
    return make_synthetic("moons", 96, 0.1, seed=0)


def _path(order, seed=0, constraint=None, arch=ARCH):
    pts = [random_params(arch, seed + i, 0.8) for i in range(order + 1)]
    if constraint is not None:
        pts = [apply_mask(p, constraint) for p in pts]
    return BezierPath(pts, constraint)


# --- Bernstein ------------------------------------------------------------------

def test_bernstein_values():
    assert bernstein(2, 1, 0.5) == 0.5
    assert bernstein(3, 2, 0.25) == pytest.approx(3 * 0.75 * 0.25**2, rel=1e-15)
    assert bernstein(3, 2, 0.25) == pytest.approx(0.140625, rel=1e-15)
    with pytest.raises(ValueError):
        bernstein(2, 3, 0.5)


@settings(max_examples=200, deadline=None)
@given(n=st.integers(1, 6), t=st.floats(0, 1))
def test_bernstein_partition_of_unity(n, t):
    assert math.fsum(bernstein(n, i, t) for i in range(n + 1)) == pytest.approx(1.0, abs=1e-12)


# --- BezierPath / bezier_point ---------------------------------------------------

@pytest.mark.parametrize("order", [2, 3])
def test_bezier_endpoints_bitwise(order):
    path = _path(order)
    assert bezier_point(path, 0.0).bitwise_equal(path.control_points[0])
    assert bezier_point(path, 1.0).bitwise_equal(path.control_points[-1])


def test_quadratic_midpoint_coefficients():
    path = _path(2)
    p0, p1, p2 = (c.values for c in path.control_points)
    np.testing.assert_allclose(bezier_point(path, 0.5).values, 0.25 * p0 + 0.5 * p1 + 0.25 * p2, rtol=1e-15)


def test_order_and_constraint_validation():
    with pytest.raises(ValueError):
        _path(1)
    with pytest.raises(ValueError):
        _path(4)
    mask = magnitude_mask(random_params(ARCH, 9), 0.5, Exclusions(skip_first=False, final_cap=None))
    pts = [random_params(ARCH, i) for i in range(3)]
    with pytest.raises(ValueError, match="control point"):
        BezierPath(pts, mask)


@settings(max_examples=30, deadline=None)
@given(t=st.floats(0, 1), order=st.sampled_from([2, 3]))
def test_constrained_points_stay_masked(t, order):
    mask = magnitude_mask(random_params(ARCH, 9), 0.7, Exclusions(skip_first=False, final_cap=None))
    path = _path(order, constraint=mask)
    point = bezier_point(path, t)
    assert apply_mask(point, mask).bitwise_equal(point)


def test_straight_path_lies_on_segment():
    a, b = random_params(ARCH, 0), random_params(ARCH, 1)
    for order in (2, 3):
        path = BezierPath.straight(a, b, order)
        for t in (0.1, 0.5, 0.77):
            np.testing.assert_allclose(bezier_point(path, t).values, (1 - t) * a.values + t * b.values, atol=1e-14)


# --- path_grad --------------------------------------------------------------------

def test_path_grad_zero_at_t0(data):
    path = _path(3)
    for g in path_grad(path, 0.0, data.features, data.labels):
        assert np.all(g.values == 0.0)


def test_path_grad_scaling_quadratic(data):
    path = _path(2)
    g = path_grad(path, 0.3, data.features, data.labels, 1e-4)
    full = grad(bezier_point(path, 0.3), data.features, data.labels, 1e-4).values
    assert bernstein(2, 1, 0.3) == pytest.approx(0.42)
    np.testing.assert_allclose(g[0].values, 0.42 * full, rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("order", [2, 3])
@pytest.mark.parametrize("constrained", [False, True])
def test_path_grad_matches_finite_differences(data, order, constrained):
    arch = Architecture([2, 10, 8, 2], use_batchnorm=True)
    mask = None
    if constrained:
        mask = magnitude_mask(random_params(arch, 50), 0.6, Exclusions(skip_first=False, final_cap=None))
    path = _path(order, seed=3, constraint=mask, arch=arch)
    x, y = data.features[:24], data.labels[:24]
    t = 0.37
    grads = path_grad(path, t, x, y, 1e-3)
    for i, g in enumerate(grads, start=1):
        cp = path.control_points[i]

        def f(v, i=i):
            pts = list(path.control_points)
            pts[i] = ParamVector(v, cp.layout)
            return loss(bezier_point(BezierPath(pts), t), x, y, 1e-3).total

        fd = central_fd(f, cp.values.copy())
        if mask is not None:
            fd[~mask.bits] = 0.0
        assert max_rel_err(g.values, fd) < 1e-4


# --- optimize_path / profile_path ------------------------------------------------

def test_zero_steps_reproduces_linear_profile(data):
    a, b = random_params(ARCH, 0), random_params(ARCH, 1)
    path, trace = optimize_path(a, b, 2, None, PathOptConfig(steps=0), data)
    grid = default_grid(0, 1, 0.01)
    on_curve = profile_path(path, grid, data, 1e-4)
    on_line = profile_line(a, b, grid, data, 1e-4)
    np.testing.assert_allclose(on_curve.total, on_line.total, rtol=1e-12)
    assert len(trace.step) == 0


def test_profile_path_endpoints_equal_direct_losses(data):
    path = _path(3)
    prof = profile_path(path, eval_data=data, weight_decay=1e-4)
    assert len(prof) == 101
    assert prof.total[0] == pytest.approx(loss(path.control_points[0], data.features, data.labels, 1e-4).total, rel=1e-12)
    assert prof.total[-1] == pytest.approx(loss(path.control_points[-1], data.features, data.labels, 1e-4).total, rel=1e-12)
    with pytest.raises(ValueError):
        profile_path(path, [-0.1, 0.5], data)


def test_optimize_path_pins_endpoints_and_keeps_mask(data):
    arch = Architecture([2, 16, 2])
    mask = magnitude_mask(random_params(arch, 7), 0.5, Exclusions(skip_first=False, final_cap=None))
    a = apply_mask(random_params(arch, 0), mask)
    b = apply_mask(random_params(arch, 1), mask)
    a0, b0 = a.copy(), b.copy()
    path, trace = optimize_path(a, b, 3, mask, PathOptConfig(steps=50, batch_size=32, seed=2), data)
    assert path.control_points[0].bitwise_equal(a0)
    assert path.control_points[-1].bitwise_equal(b0)
    assert a.bitwise_equal(a0)
    for cp in path.control_points:
        assert apply_mask(cp, mask).bitwise_equal(cp)
    assert np.all((trace.t >= 0) & (trace.t <= 1))
    assert trace.to_csv().count("\n") == 51


def test_optimize_path_lowers_sampled_loss(data):
    arch = Architecture([2, 16, 2])
    a, b = random_params(arch, 0), random_params(arch, 1)
    _, trace = optimize_path(a, b, 2, None, PathOptConfig(steps=400, batch_size=32, base_lr=0.05, momentum=0.9), data)
    k = len(trace.loss) // 10
    assert trace.loss[-k:].mean() <= trace.loss[:k].mean()


def test_optimize_path_is_deterministic(data):
    a, b = random_params(ARCH, 0), random_params(ARCH, 1)
    cfg = PathOptConfig(steps=30, batch_size=16, seed=5)
    p1, t1 = optimize_path(a, b, 2, None, cfg, data)
    p2, t2 = optimize_path(a, b, 2, None, cfg, data)
    assert p1.control_points[1].bitwise_equal(p2.control_points[1])
    assert t1.to_csv() == t2.to_csv()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_optimize_path_divergence(data):
    a, b = random_params(ARCH, 0, 10.0), random_params(ARCH, 1, 10.0)
    with pytest.raises(TrainingDiverged):
        optimize_path(a, b, 2, None, PathOptConfig(steps=200, base_lr=1e8, momentum=0.99), data)


def test_sweep_sorted_by_max_loss(data):
    a, b = random_params(ARCH, 0), random_params(ARCH, 1)
    res = sweep_path(a, b, 2, None, PathOptConfig(steps=20, batch_size=32), data, lrs=(1.0, 0.01), momenta=(0.9, 0.99))
    assert len(res) == 4
    peaks = [r.max_loss for r in res]
    assert peaks == sorted(peaks)
    best = res[0]
    assert best.max_loss == pytest.approx(float(best.profile.total.max()))


def test_path_lr_schedule():
    cfg = PathOptConfig(steps=100, base_lr=0.5)
    assert [path_lr(cfg, s) for s in (0, 50)] == [0.5, 0.5]
    assert path_lr(cfg, 70) == pytest.approx(0.5 * (1 - 0.99 * 0.5), rel=1e-12)
    assert path_lr(cfg, 90) == pytest.approx(0.005, rel=1e-12)
    assert path_lr(cfg, 99) == 0.005
    rates = [path_lr(cfg, s) for s in range(100)]
    assert all(b <= a for a, b in zip(rates, rates[1:]))


def test_path_config_validation():
    with pytest.raises(ValueError):
        PathOptConfig(base_lr=0)
    with pytest.raises(ValueError):
        PathOptConfig(momentum=1.0)
    with pytest.raises(ValueError):
        PathOptConfig(batch_size=0)
