"""Random point generation and the self-normalized integral estimator."""

import numpy as np
import pytest

from dgmsolve.autodiff import InputError
from dgmsolve.sampling import (
    BatchSizes,
    Domain,
    importance_integral,
    importance_weights,
    row_weights,
    sample_batch,
)


def test_empty_sizes_give_empty_batch():
    dom = Domain(0.0, 1.0, [-1.0], [1.0])
    batch = sample_batch(dom, BatchSizes(0, 0, 0), np.random.default_rng(0))
    assert batch.t.size == 0 and batch.x.shape == (0, 1)
    assert batch.cond_x.shape == (0, 1) and batch.bnd_t.size == 0


def test_points_lie_in_their_regions():
    dom = Domain(0.0, 2.0, [-1.0, 3.0], [1.0, 7.0])
    batch = sample_batch(dom, BatchSizes(500, 200, 300), np.random.default_rng(1))
    assert np.all((batch.t >= 0.0) & (batch.t <= 2.0))
    assert np.all((batch.x >= dom.lo) & (batch.x <= dom.hi))
    assert batch.cond_t == 2.0
    assert np.all((batch.cond_x >= dom.lo) & (batch.cond_x <= dom.hi))
    # boundary points sit on a face
    on_face = np.zeros(200, dtype=bool)
    for j in range(2):
        on_face |= np.isclose(batch.bnd_x[:, j], dom.lo[j])
        on_face |= np.isclose(batch.bnd_x[:, j], dom.hi[j])
    assert np.all(on_face)


def test_initial_condition_time():
    dom = Domain(0.0, 1.5, [0.0], [1.0])
    batch = sample_batch(dom, BatchSizes(1, 0, 1), np.random.default_rng(2),
                         condition_time="initial")
    assert batch.cond_t == 0.0


def test_interior_mean_within_clt_bound():
    dom = Domain(0.0, 1.0, [-2.0, 1.0], [4.0, 5.0])
    n = 100_000
    batch = sample_batch(dom, BatchSizes(n, 0, 0), np.random.default_rng(3))
    mid = 0.5 * (dom.lo + dom.hi)
    span = dom.hi - dom.lo
    # uniform variance = span^2 / 12
    for j in range(2):
        se = span[j] / np.sqrt(12.0 * n)
        assert abs(batch.x[:, j].mean() - mid[j]) < 3.0 * se


def test_fixed_seed_reproduces_batch():
    dom = Domain(0.0, 1.0, [0.0], [1.0])
    b1 = sample_batch(dom, BatchSizes(64, 8, 16), np.random.default_rng(42))
    b2 = sample_batch(dom, BatchSizes(64, 8, 16), np.random.default_rng(42))
    assert np.array_equal(b1.t, b2.t) and np.array_equal(b1.x, b2.x)
    assert np.array_equal(b1.cond_x, b2.cond_x)
    assert np.array_equal(b1.bnd_x, b2.bnd_x)


def test_degenerate_box_rejected():
    with pytest.raises(InputError):
        Domain(0.0, 1.0, [1.0], [1.0])
    with pytest.raises(InputError):
        Domain(1.0, 1.0, [0.0], [1.0])


def test_stratified_batch_is_a_product():
    dom = Domain(0.0, 1.0, [0.0], [1.0])
    batch = sample_batch(dom, BatchSizes(0, 0, 4), np.random.default_rng(5),
                         stratified=(6, 11))
    assert batch.strat == (6, 11)
    assert batch.t.size == 66
    t_rows = batch.t.reshape(6, 11)
    assert np.all(t_rows == t_rows[:, :1])  # constant within a row
    x_rows = batch.x.reshape(6, 11)
    assert np.array_equal(x_rows[0], x_rows[3])  # shared space columns


# ---------------------------------------------------------------------------
# importance weights and the weighted-sum estimator
# ---------------------------------------------------------------------------


def test_constant_exponent_gives_uniform_weights():
    w = importance_weights(np.full(8, 3.7))
    assert np.allclose(w, 1.0 / 8.0, rtol=0, atol=1e-15)


def test_two_point_weights_hand_computed():
    w = importance_weights(np.array([0.0, np.log(3.0)]))
    assert np.allclose(w, [0.75, 0.25], rtol=0, atol=1e-14)


def test_weights_shift_invariant():
    rng = np.random.default_rng(7)
    u = rng.uniform(-3, 3, 100)
    w1 = importance_weights(u)
    w2 = importance_weights(u + 123.456)
    assert np.max(np.abs(w1 - w2)) < 1e-12
    assert abs(w1.sum() - 1.0) < 1e-12
    assert np.all(w1 >= 0.0)


def test_weights_reject_empty_or_nonfinite():
    with pytest.raises(InputError):
        importance_weights(np.array([]))
    with pytest.raises(InputError):
        importance_weights(np.array([1.0, np.nan]))


def test_integral_of_constant_is_exact():
    w = importance_weights(np.random.default_rng(0).uniform(size=50))
    assert importance_integral(np.full(50, 2.5), w) == pytest.approx(2.5, abs=1e-14)


def test_integral_of_indicator_is_one():
    w = importance_weights(np.random.default_rng(1).uniform(size=50))
    assert importance_integral(np.ones(50), w) == pytest.approx(1.0, abs=1e-14)


def test_integral_length_mismatch():
    w = importance_weights(np.zeros(4))
    with pytest.raises(InputError):
        importance_integral(np.zeros(5), w)


def test_gaussian_mean_estimate_within_three_standard_errors():
    # quadratic exponent: weights target a Gaussian with mean a, std s
    a, s = 0.7, 1.1
    lo, hi = -6.0, 6.0
    grid = np.linspace(lo, hi, 10_001)
    dens = np.exp(-0.5 * ((grid - a) / s) ** 2)
    dens /= np.trapezoid(dens, grid)
    exact = np.trapezoid(grid * dens, grid)

    rng = np.random.default_rng(11)
    x = rng.uniform(lo, hi, 10_000)
    w = importance_weights(0.5 * ((x - a) / s) ** 2)
    est = importance_integral(x, w)
    se = np.sqrt(np.sum(w**2 * (x - est) ** 2))
    assert abs(est - exact) < 3.0 * se


def test_estimator_deviation_shrinks_with_batch_size():
    a, s = -0.4, 0.9
    lo, hi = -6.0, 6.0
    grid = np.linspace(lo, hi, 10_001)
    dens = np.exp(-0.5 * ((grid - a) / s) ** 2)
    dens /= np.trapezoid(dens, grid)
    g = np.sin  # smooth integrand
    exact = np.trapezoid(g(grid) * dens, grid)

    rng = np.random.default_rng(13)
    mean_abs_dev = []
    for n in (100, 1_000, 10_000):
        devs = []
        for _ in range(40):
            x = rng.uniform(lo, hi, n)
            w = importance_weights(0.5 * ((x - a) / s) ** 2)
            devs.append(abs(importance_integral(g(x), w) - exact))
        mean_abs_dev.append(np.mean(devs))
    assert mean_abs_dev[0] > mean_abs_dev[1] > mean_abs_dev[2]


def test_row_weights_match_per_row_computation():
    rng = np.random.default_rng(17)
    u = rng.uniform(-2, 2, (5, 40))
    w = row_weights(u)
    for i in range(5):
        assert np.allclose(w[i], importance_weights(u[i]), rtol=0, atol=1e-14)
    assert np.allclose(w.sum(axis=1), 1.0, rtol=0, atol=1e-12)
