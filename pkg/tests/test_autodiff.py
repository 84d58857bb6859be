"""Derivative engine: exactness on polynomials, finite-difference Hessians,
parameter gradients against central differences."""

import numpy as np
import pytest

from dgmsolve import autodiff as ad
from dgmsolve.autodiff import FdConfig, InputError, NumericError
from dgmsolve.network import DgmFunction, NetConfig, forward_eval, init_params


def as_float(v):
    return float(np.asarray(ad.value_of(v)).reshape(-1)[0])


# ---------------------------------------------------------------------------
# input derivatives on closed-form functions
# ---------------------------------------------------------------------------


def test_grad_input_polynomial_exact():
    res = ad.grad_input(lambda t, x: t * x[0] ** 2, None, 3.0, [2.0])
    assert as_float(res.value) == 12.0
    assert as_float(res.dt) == 4.0
    assert as_float(res.dx[0]) == 12.0


def test_grad_input_constant_function():
    res = ad.grad_input(lambda t, x: t * 0 + 7.5, None, 0.3, [1.0, -2.0])
    assert as_float(res.value) == 7.5
    assert as_float(res.dt) == 0.0
    assert as_float(res.dx[0]) == 0.0
    assert as_float(res.dx[1]) == 0.0


def test_second_input_t_x_squared():
    out = ad.second_input(lambda t, x: t * x[0] ** 2, None, 3.0, [2.0])
    assert as_float(out.dxx[0][0]) == 6.0       # 2t
    assert as_float(out.dtx[0]) == 4.0          # 2x


def test_second_input_bilinear():
    out = ad.second_input(lambda t, x: x[0] * x[1], None, 0.0, [1.3, -0.7])
    dxx = np.array([[as_float(out.dxx[i][j]) for j in range(2)] for i in range(2)])
    assert np.array_equal(dxx, np.array([[0.0, 1.0], [1.0, 0.0]]))


def test_second_input_quadratic_form_matches_matrix(rng):
    d = 4
    a = rng.standard_normal((d, d))
    a = 0.5 * (a + a.T)

    def f(t, x):
        out = t * 0.0
        for i in range(d):
            for j in range(d):
                out = out + 0.5 * a[i, j] * x[i] * x[j]
        return out

    point = rng.standard_normal(d)
    out = ad.second_input(f, None, 0.2, point)
    dxx = np.array([[as_float(out.dxx[i][j]) for j in range(d)] for i in range(d)])
    assert np.max(np.abs(dxx - a)) < 1e-12


@pytest.mark.parametrize(
    "f,point,expect",
    [
        # (value, dt, dx) at (t, x) = (1.5, 0.8); all degree <= 3
        (lambda t, x: t**3, (1.5, 0.8), (3.375, 6.75, 0.0)),
        (lambda t, x: t**2 * x[0], (1.5, 0.8), (1.8, 2.4, 2.25)),
        (lambda t, x: x[0] ** 3, (1.5, 0.8), (0.512, 0.0, 1.92)),
        (lambda t, x: 2.0 * x[0] * t - x[0] + 1.0, (1.5, 0.8), (2.6, 1.6, 2.0)),
    ],
)
def test_cubic_polynomials_exact_to_rounding(f, point, expect):
    t0, x0 = point
    res = ad.grad_input(f, None, t0, [x0])
    got = (as_float(res.value), as_float(res.dt), as_float(res.dx[0]))
    assert np.max(np.abs(np.array(got) - np.array(expect))) < 1e-12


# ---------------------------------------------------------------------------
# finite-difference Hessian
# ---------------------------------------------------------------------------


def quadratic_fn(a):
    d = a.shape[0]

    def f(t, x):
        out = t * 0.0
        for i in range(d):
            for j in range(d):
                out = out + 0.5 * a[i, j] * x[i] * x[j]
        return out

    return f


def test_fd_hessian_exact_on_quadratics(rng):
    a = rng.standard_normal((3, 3))
    a = 0.5 * (a + a.T)
    f = quadratic_fn(a)
    for h in (1e-1, 1e-2, 1e-3):
        hess = ad.fd_hessian(f, None, 0.0, rng.standard_normal(3), FdConfig(h))
        assert np.max(np.abs(hess - a)) < 1e-9


def test_fd_hessian_second_order_convergence():
    from dgmsolve.autodiff import jcos, jsin

    def f(t, x):
        return jsin(x[0]) * jcos(x[1])

    x0 = np.array([1.0, 1.0])
    exact = np.array(
        [
            [-np.sin(1.0) * np.cos(1.0), -np.cos(1.0) * np.sin(1.0)],
            [-np.cos(1.0) * np.sin(1.0), -np.sin(1.0) * np.cos(1.0)],
        ]
    )
    errs = []
    for h in (1e-2, 5e-3, 2.5e-3):
        hess = ad.fd_hessian(f, None, 0.0, x0, FdConfig(h))
        errs.append(np.max(np.abs(hess - exact)))
    orders = [np.log2(errs[i] / errs[i + 1]) for i in range(2)]
    for order in orders:
        assert 1.5 <= order <= 2.5


def test_fd_hessian_ignores_absent_coordinate():
    from dgmsolve.autodiff import jsin

    def f(t, x):
        return jsin(x[0])

    hess = ad.fd_hessian(f, None, 0.0, np.array([0.7, 2.0]), FdConfig(1e-3))
    assert abs(hess[0, 1]) < 1e-10
    assert abs(hess[1, 0]) < 1e-10
    assert abs(hess[1, 1]) < 1e-10


def test_fd_hessian_exactly_symmetric(rng):
    cfg = NetConfig(width=6, depth=2, seed=11)
    net = init_params(cfg, input_dim=4)
    f = DgmFunction(net)
    hess = ad.fd_hessian(f, None, 0.3, rng.uniform(-1, 1, 3), FdConfig(1e-3))
    assert np.array_equal(hess, hess.T)


def test_fd_hessian_rejects_bad_step():
    with pytest.raises(InputError):
        ad.fd_hessian(lambda t, x: x[0] * x[0], None, 0.0, [1.0], FdConfig(0.0))


def test_fd_hessian_nonfinite_stencil_raises():
    from dgmsolve.autodiff import jlog

    def f(t, x):
        return jlog(x[0])

    with pytest.raises(NumericError):
        # stencil crosses zero: log picks up a NaN
        ad.fd_hessian(f, None, 0.0, np.array([5e-4]), FdConfig(1e-3))


# ---------------------------------------------------------------------------
# parameter gradients
# ---------------------------------------------------------------------------


def test_grad_params_sum_of_squares():
    tape = ad.Tape()
    arrays = {"w": np.array([1.0, -2.0, 3.0]), "b": np.array(0.5)}
    leaves = tape.wrap(arrays)
    loss = ad.total(ad.square(leaves["w"])) + ad.square(leaves["b"])
    grads = ad.grad_params(loss, arrays)
    assert np.array_equal(grads["w"], 2.0 * arrays["w"])
    assert np.array_equal(grads["b"], 2.0 * np.array(0.5))


def test_grad_params_disconnected_parameter_is_zero():
    tape = ad.Tape()
    arrays = {"w": np.ones(3), "unused": np.ones((2, 2))}
    leaves = tape.wrap(arrays)
    loss = ad.total(ad.square(leaves["w"]))
    grads = ad.grad_params(loss, arrays)
    assert np.array_equal(grads["unused"], np.zeros((2, 2)))


def test_grad_params_matches_central_differences(rng):
    cfg = NetConfig(width=10, depth=2, seed=5)
    net = init_params(cfg, input_dim=2)
    t = rng.uniform(0, 1, 40)
    x = rng.uniform(-1, 1, (40, 1))

    def loss_of(arrays):
        ev = forward_eval(arrays, net, t, x, order=2, pairs={(1, 1)})
        return ad.mean(
            ad.square(ev.dx[0]) + ad.square(ev.value) + ad.square(ev.dxx())
        )

    tape = ad.Tape()
    leaves = tape.wrap(net.arrays)
    grads = ad.grad_params(loss_of(leaves), net)

    names = sorted(net.arrays)
    for _ in range(20):
        name = names[rng.integers(len(names))]
        arr = net.arrays[name]
        idx = tuple(rng.integers(0, s) for s in arr.shape)
        eps = 1e-6
        plus = {k: v.copy() for k, v in net.arrays.items()}
        minus = {k: v.copy() for k, v in net.arrays.items()}
        plus[name][idx] += eps
        minus[name][idx] -= eps
        fd = (ad.value_of(loss_of(plus)) - ad.value_of(loss_of(minus))) / (2 * eps)
        got = grads[name][idx]
        assert abs(got - fd) / max(abs(fd), 1e-10) < 1e-5


def test_grad_params_detached_network_gets_zero(rng):
    # loss built from one network's outputs only: the other's gradient is zero
    cfg = NetConfig(width=6, depth=1, seed=2)
    net_a = init_params(cfg, input_dim=2)
    net_b = init_params(NetConfig(width=6, depth=1, seed=3), input_dim=2)
    tape = ad.Tape()
    leaves_a = tape.wrap(net_a.arrays, prefix="a::")
    tape.wrap(net_b.arrays, prefix="b::")
    t = rng.uniform(0, 1, 8)
    x = rng.uniform(-1, 1, (8, 1))
    ev = forward_eval(leaves_a, net_a, t, x, order=0)
    loss = ad.mean(ad.square(ev.value))
    grads = ad.backward(loss)
    assert any(k.startswith("a::") for k in grads)
    assert not any(k.startswith("b::") for k in grads)


def test_grad_params_nonfinite_loss_raises():
    tape = ad.Tape()
    arrays = {"w": np.array([1.0])}
    leaves = tape.wrap(arrays)
    loss = ad.log(leaves["w"] - 2.0)  # log of a negative number
    with pytest.raises(NumericError):
        ad.grad_params(ad.total(loss), arrays)


# ---------------------------------------------------------------------------
# error handling and purity
# ---------------------------------------------------------------------------


def test_dimension_mismatch_raises():
    cfg = NetConfig(width=4, depth=1, seed=0)
    net = init_params(cfg, input_dim=2)
    with pytest.raises(InputError):
        forward_eval(net.arrays, net, np.zeros(3), np.zeros((3, 2)), order=0)


def test_grad_input_nonfinite_value_raises():
    cfg = NetConfig(width=4, depth=1, seed=0)
    net = init_params(cfg, input_dim=2)
    net.arrays["out.w"][0] = np.inf
    with pytest.raises(NumericError):
        ad.grad_input(DgmFunction(net), None, 0.5, [0.1])


def test_evaluations_are_pure(rng):
    cfg = NetConfig(width=8, depth=2, seed=9)
    net = init_params(cfg, input_dim=2)
    f = DgmFunction(net)
    a1 = ad.grad_input(f, None, 0.4, [0.2])
    b1 = ad.grad_input(f, None, 0.9, [-0.6])
    a2 = ad.grad_input(f, None, 0.4, [0.2])
    assert as_float(a1.value) == as_float(a2.value)
    assert as_float(a1.dx[0]) == as_float(a2.dx[0])
    assert as_float(b1.value) != as_float(a1.value)
