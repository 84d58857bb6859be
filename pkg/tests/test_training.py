"""Optimizer, single steps, loops, determinism, and the alternating
value/control scheme."""

import numpy as np
import pytest
from conftest import complex_step_derivatives

from dgmsolve import autodiff as ad
from dgmsolve import problems as pb
from dgmsolve import training as tr
from dgmsolve.autodiff import InputError, NumericError
from dgmsolve.network import NetConfig, forward_values
from dgmsolve.oracles import merton_solution
from dgmsolve.sampling import BatchSizes, sample_batch
from dgmsolve.training import (
    AdamState,
    FixedControl,
    TrainerConfig,
    adam_init,
    adam_update,
    dgm_pia_step,
    dgm_step,
    history_to_csv,
    train_dgm,
    train_dgm_pia,
)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


def test_adam_zero_gradient_zero_direction():
    arrays = {"w": np.ones((3, 2))}
    adam = adam_init(arrays)
    adam, direction = adam_update(adam, {"w": np.zeros((3, 2))})
    assert np.array_equal(direction["w"], np.zeros((3, 2)))
    assert adam.t == 1


def test_adam_constant_gradient_direction_magnitude_tends_to_one():
    arrays = {"w": np.zeros(4)}
    adam = adam_init(arrays)
    g = np.array([0.5, -2.0, 1e-3, 7.0])
    direction = None
    for _ in range(400):
        adam, direction = adam_update(adam, {"w": g})
    assert np.max(np.abs(np.abs(direction["w"]) - 1.0)) < 1e-3
    assert np.array_equal(np.sign(direction["w"]), np.sign(g))


def test_adam_timestep_increments():
    adam = adam_init({"w": np.zeros(2)})
    for k in range(1, 5):
        adam, _ = adam_update(adam, {"w": np.ones(2)})
        assert adam.t == k


def test_adam_shape_mismatch_rejected():
    adam = adam_init({"w": np.zeros(2)})
    with pytest.raises(InputError):
        adam_update(adam, {"w": np.zeros(3)})


# ---------------------------------------------------------------------------
# single residual-mode steps
# ---------------------------------------------------------------------------


def bs_problem():
    return pb.black_scholes_european(pb.BsParams())


def small_batch(problem, seed=0, interior=32, condition=16):
    dom = problem.funcs[0].domain
    return sample_batch(dom, BatchSizes(interior, 0, condition),
                        np.random.default_rng(seed),
                        condition_time=problem.funcs[0].condition_time)


def test_dgm_step_zero_learning_rate_keeps_parameters():
    problem = bs_problem()
    nets = tr.init_nets(problem, NetConfig(width=6, depth=1, seed=1))
    net = nets["value"]
    adam = adam_init(tr._joint_arrays(nets))
    batch = small_batch(problem)
    new, _, report = dgm_step(net, problem, batch, adam, lr=0.0)
    for k in net.arrays:
        assert np.array_equal(new.arrays[k], net.arrays[k])
    assert report.total > 0.0 and np.isfinite(report.total)


def test_dgm_step_zero_residual_problem_keeps_parameters():
    # residual identically zero and a condition satisfied by construction
    problem = bs_problem()
    nets = tr.init_nets(problem, NetConfig(width=6, depth=1, seed=2))
    net = nets["value"]

    frozen = net.copy()
    spec = pb.ProblemSpec(
        name="identity",
        mode="dgm",
        funcs=(pb.FuncSpec(
            "value", problem.funcs[0].domain, "terminal",
            lambda x: forward_values(
                frozen, np.full(len(x), problem.funcs[0].domain.t1), x),
            order=1,
        ),),
        residuals={"value": lambda ctx: ctx.ev["value"].value * 0.0},
    )
    adam = adam_init(tr._joint_arrays(nets))
    batch = small_batch(spec, seed=3)
    new, _, report = dgm_step(net, spec, batch, adam, lr=1e-3)
    assert report.total < 1e-25
    for k in net.arrays:
        assert np.array_equal(new.arrays[k], net.arrays[k])


def test_dgm_step_loss_matches_independent_recomputation():
    problem = bs_problem()
    p = problem.params
    nets = tr.init_nets(problem, NetConfig(width=8, depth=2, seed=4))
    net = nets["value"]
    batch = small_batch(problem, seed=5, interior=64, condition=24)
    adam = adam_init(tr._joint_arrays(nets))
    _, _, report = dgm_step(net, problem, batch, adam, lr=1e-3)

    value, dt, dx, dxx = complex_step_derivatives(net, batch.t, batch.x)
    x = batch.x[:, 0]
    res = dt + p.r * x * dx[:, 0] + 0.5 * p.sigma**2 * x**2 * dxx[:, 0] - p.r * value
    l1 = np.mean(res**2)
    term = forward_values(net, np.full(len(batch.cond_x), 1.0), batch.cond_x)
    l3 = np.mean((term - np.maximum(batch.cond_x[:, 0] - p.strike, 0.0)) ** 2)
    assert np.isfinite(report.total)
    assert abs(report.L1 - l1) / l1 < 1e-6
    assert abs(report.L3 - l3) / l3 < 1e-10
    assert abs(report.total - (l1 + l3)) / (l1 + l3) < 1e-6


def test_loss_decomposition_sums_exactly():
    problem = pb.american_put(pb.BsParams())
    nets = tr.init_nets(problem, NetConfig(width=6, depth=1, seed=6))
    adam = adam_init(tr._joint_arrays(nets))
    batch = small_batch(problem, seed=7)
    _, _, report = dgm_step(nets["value"], problem, batch, adam, lr=1e-3)
    assert report.Lpos > 0.0
    parts = report.L1 + report.L2 + report.L3 + report.Lpos
    assert abs(report.total - parts) < 1e-12 * max(1.0, abs(report.total))


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------


def test_train_zero_iterations_returns_initial_params():
    problem = bs_problem()
    cfg = NetConfig(width=5, depth=1, seed=11)
    trainer = TrainerConfig(iterations=0, n_interior=8, n_condition=4, seed=1)
    net, history = train_dgm(problem, cfg, trainer)
    fresh = tr.init_nets(problem, cfg)["value"]
    assert history == []
    for k in net.arrays:
        assert np.array_equal(net.arrays[k], fresh.arrays[k])


def test_history_cadence_halves_with_doubled_log_every():
    problem = bs_problem()
    cfg = NetConfig(width=5, depth=1, seed=11)
    t1 = TrainerConfig(iterations=40, n_interior=8, n_condition=4, log_every=1, seed=1)
    t2 = TrainerConfig(iterations=40, n_interior=8, n_condition=4, log_every=2, seed=1)
    _, h1 = train_dgm(problem, cfg, t1)
    _, h2 = train_dgm(problem, cfg, t2)
    assert len(h1) == 40 and len(h2) == 20


def test_training_is_deterministic():
    problem = bs_problem()
    cfg = NetConfig(width=6, depth=2, seed=3)
    trainer = TrainerConfig(iterations=25, n_interior=16, n_condition=8,
                            log_every=1, seed=9)
    _, h1 = train_dgm(problem, cfg, trainer)
    _, h2 = train_dgm(problem, cfg, trainer)
    assert history_to_csv(h1) == history_to_csv(h2)


def test_displacement_stopping_rule():
    problem = bs_problem()
    cfg = NetConfig(width=5, depth=1, seed=2)
    trainer = TrainerConfig(iterations=500, n_interior=8, n_condition=4,
                            log_every=1, seed=4, stop_tol=1e9, stop_window=10)
    _, hist = train_dgm(problem, cfg, trainer)
    assert len(hist) == 10  # stops right after the window fills


def test_numeric_failure_carries_iteration_index():
    problem = bs_problem()
    cfg = NetConfig(width=5, depth=1, seed=2)
    trainer = TrainerConfig(iterations=200, n_interior=8, n_condition=4,
                            lr_schedule=((0.0, 1e9),), seed=4, log_every=50)
    with pytest.raises(NumericError, match="iteration"):
        train_dgm(problem, cfg, trainer)


# ---------------------------------------------------------------------------
# alternating value/control scheme
# ---------------------------------------------------------------------------


def test_pia_step_zero_learning_rates_keep_both_parameter_sets():
    problem = pb.merton_primal(pb.MertonParams())
    nets = tr.init_nets(problem, {
        "value": NetConfig(width=6, depth=1, seed=1),
        "control": NetConfig(width=6, depth=1, seed=2),
    })
    adam_v = adam_init(tr._joint_arrays({"value": nets["value"]}))
    adam_c = adam_init(tr._joint_arrays({"control": nets["control"]}))
    batch = small_batch(problem, seed=3)
    value, control, _, _, report = dgm_pia_step(
        nets["value"], nets["control"], problem, batch, adam_v, adam_c, 0.0, 0.0)
    for k in nets["value"].arrays:
        assert np.array_equal(value.arrays[k], nets["value"].arrays[k])
    for k in nets["control"].arrays:
        assert np.array_equal(control.arrays[k], nets["control"].arrays[k])
    assert np.isfinite(report.LH) and np.isfinite(report.Lu)


def test_pia_reduces_to_fixed_control_descent():
    """With the control frozen at the optimal feedback rule, the alternating
    scheme's value-loss trajectory must match plain descent on the
    corresponding fixed-control linear equation."""
    p = pb.MertonParams()
    problem = pb.merton_primal(p)
    sol = merton_solution(p)
    fixed = FixedControl(lambda t, x: sol.control(t, x[:, 0]))

    cfg = NetConfig(width=8, depth=2, seed=5)
    trainer = TrainerConfig(iterations=30, n_interior=32, n_condition=16,
                            log_every=1, seed=6)
    value_pia, _, hist_pia = train_dgm_pia(
        problem, {"value": cfg, "control": fixed}, trainer)

    linear = pb.fixed_control_problem(problem, fixed)
    value_dgm, hist_dgm = train_dgm(linear, cfg, trainer)

    for a, b in zip(hist_pia, hist_dgm):
        assert abs(a.LH - b.total) <= 1e-10 * max(1.0, abs(b.total))
        assert abs(a.L1 - b.L1) <= 1e-10 * max(1.0, abs(b.L1))
    for k in value_pia.arrays:
        assert np.allclose(value_pia.arrays[k], value_dgm.arrays[k],
                           rtol=0, atol=1e-12)


def test_control_step_improves_sampled_hamiltonian():
    """Against the closed-form value function, one control update must
    decrease the negated Hamiltonian objective on a held-out batch."""
    p = pb.MertonParams()
    problem = pb.merton_primal(p)
    sol = merton_solution(p)
    control = tr.init_nets(problem, {
        "value": NetConfig(width=6, depth=1, seed=0),
        "control": NetConfig(width=8, depth=2, seed=1),
    })["control"]
    adam = adam_init(tr._joint_arrays({"control": control}))

    def analytic_ctx(batch):
        from conftest import AnalyticEval, make_ctx

        x = batch.x[:, 0]
        ev = AnalyticEval(
            value=sol.value(batch.t, x),
            dt=sol.extras["value_t"](batch.t, x),
            dx=[sol.extras["value_x"](batch.t, x)],
            dxx_val=sol.extras["value_xx"](batch.t, x),
        )
        return ev, make_ctx(batch.t, batch.x, {"value": ev})

    rng_train = np.random.default_rng(2)
    heldout = small_batch(problem, seed=99, interior=512)
    ev_h, ctx_h = analytic_ctx(heldout)

    def heldout_objective(ctrl):
        a = forward_values(ctrl, heldout.t, heldout.x)
        return float(ad.value_of(tr.pia_control_objective(problem, ev_h, ctx_h, a)))

    before = heldout_objective(control)
    for seed in range(3, 23):
        batch = small_batch(problem, seed=seed, interior=256)
        ev, ctx = analytic_ctx(batch)
        control, adam, _ = tr.control_step(problem, ev, ctx, control, adam, 1e-2)
    after = heldout_objective(control)
    assert after < before


def test_pia_history_records_holdout_hamiltonian():
    problem = pb.optimal_execution_primal(pb.ExecParams())
    trainer = TrainerConfig(iterations=12, n_interior=16, n_condition=8,
                            log_every=4, seed=3)
    _, _, hist = train_dgm_pia(problem, NetConfig(width=5, depth=1, seed=7), trainer)
    assert all("holdout_hamiltonian" in h.diagnostics for h in hist)
    assert "improvement_fraction" in hist[-1].diagnostics
