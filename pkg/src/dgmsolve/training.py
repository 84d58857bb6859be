"""Stochastic-gradient training loops for the mesh-free solvers.

Three loops share the same machinery:

* ``train_dgm``        — squared-residual descent for one equation or a
                         coupled system with a shared domain;
* ``train_dgm_pia``    — alternating value/control descent for equations
                         kept in primal form (the control is a second
                         network maximizing the sampled Hamiltonian);
* ``train_mfg``        — round-robin value/mass descent for the coupled
                         trade-crowding system, with the aggregate rate
                         re-estimated each iteration.

Mini-batch losses are means over sampled points so batch size and learning
rate decouple; a fresh batch is drawn every iteration.  All randomness runs
through explicit generators, making single-threaded runs bit-reproducible.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import InputError, NumericError
from .network import Eval, NetConfig, NetworkParams, forward_eval, init_params, with_normalization
from .problems import ProblemSpec, ResidualCtx
from .sampling import BatchSizes, SampleBatch, sample_batch

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# configuration, reports, optimizer state
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainerConfig:
    """Loop sizes, learning-rate schedule and stopping rule.

    ``lr_schedule`` is piecewise-constant: ``((0.0, 1e-3), (0.5, 1e-4))``
    uses 1e-3 for the first half of the iterations and 1e-4 after.  The
    displacement stop triggers when the trailing-window mean of the
    parameter step norm falls below ``stop_tol`` (0 disables it).
    """

    iterations: int = 1000
    n_interior: int = 512
    n_boundary: int = 0
    n_condition: int = 128
    n_time: int = 20
    n_space: int = 50
    lr_schedule: tuple = ((0.0, 1e-3), (0.5, 1e-4))
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    stop_tol: float = 0.0
    stop_window: int = 50
    log_every: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.stop_tol < 0.0:
            raise InputError("stop tolerance must be >= 0")
        if any(lr <= 0.0 for _, lr in self.lr_schedule):
            raise InputError("learning rates must be positive")

    def learning_rate(self, iteration: int) -> float:
        frac = iteration / max(self.iterations, 1)
        lr = self.lr_schedule[0][1]
        for start, value in self.lr_schedule:
            if frac >= start:
                lr = value
        return lr


@dataclass
class LossReport:
    """Per-component losses for one step; inactive components stay zero."""

    iteration: int = 0
    L1: float = 0.0
    L2: float = 0.0
    L3: float = 0.0
    Lpos: float = 0.0
    LH: float = 0.0
    Lu: float = 0.0
    total: float = 0.0
    diagnostics: dict = field(default_factory=dict)


LOSS_COLUMNS = ("iter", "L1", "L2", "L3", "Lpos", "LH", "Lu", "total")


def history_to_csv(history: list[LossReport]) -> str:
    lines = [",".join(LOSS_COLUMNS)]
    for rep in history:
        vals = [str(rep.iteration)] + [
            format(getattr(rep, k), ".17g")
            for k in ("L1", "L2", "L3", "Lpos", "LH", "Lu", "total")
        ]
        lines.append(",".join(vals))
    return "\n".join(lines) + "\n"


@dataclass
class AdamState:
    """First/second-moment accumulators shaped like the parameters."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(arrays: dict[str, np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(v) for k, v in arrays.items()},
        v={k: np.zeros_like(v) for k, v in arrays.items()},
        t=0, beta1=beta1, beta2=beta2, eps=eps,
    )


def adam_update(adam: AdamState, grad: dict[str, np.ndarray], lr: float | None = None):
    """One bias-corrected moment update; returns the new state and the
    descent direction (to be scaled by the learning rate)."""
    t = adam.t + 1
    m, v, direction = {}, {}, {}
    for key, g in grad.items():
        if key not in adam.m or adam.m[key].shape != np.shape(g):
            raise InputError(f"gradient shape mismatch for '{key}'")
        m[key] = adam.beta1 * adam.m[key] + (1.0 - adam.beta1) * g
        v[key] = adam.beta2 * adam.v[key] + (1.0 - adam.beta2) * g * g
        mhat = m[key] / (1.0 - adam.beta1**t)
        vhat = v[key] / (1.0 - adam.beta2**t)
        direction[key] = mhat / (np.sqrt(vhat) + adam.eps)
    new = AdamState(m=m, v=v, t=t, beta1=adam.beta1, beta2=adam.beta2, eps=adam.eps)
    return new, direction


# ---------------------------------------------------------------------------
# parameter plumbing (single network or one per unknown function)
# ---------------------------------------------------------------------------


def _as_net_dict(problem: ProblemSpec, params) -> dict[str, NetworkParams]:
    if isinstance(params, NetworkParams):
        if len(problem.funcs) != 1:
            raise InputError(f"problem '{problem.name}' has several unknowns")
        return {problem.funcs[0].name: params}
    return dict(params)


def _maybe_single(problem: ProblemSpec, nets: dict[str, NetworkParams]):
    if len(problem.funcs) == 1:
        return nets[problem.funcs[0].name]
    return nets


def _joint_arrays(nets: dict[str, NetworkParams]) -> dict[str, np.ndarray]:
    return {f"{fname}::{k}": arr for fname, net in nets.items()
            for k, arr in net.arrays.items()}


def _apply_step(nets, direction, lr) -> dict[str, NetworkParams]:
    out = {}
    for fname, net in nets.items():
        new = net.copy()
        for k in new.arrays:
            new.arrays[k] = new.arrays[k] - lr * direction[f"{fname}::{k}"]
        out[fname] = new
    return out


def _step_norm(direction, lr) -> float:
    sq = sum(float(np.sum(np.square(d))) for d in direction.values())
    return lr * np.sqrt(sq)


def init_nets(problem: ProblemSpec, net_cfg) -> dict[str, NetworkParams]:
    """One parameter set per unknown, input-normalized to its domain."""
    cfgs: dict[str, NetConfig] = {}
    if isinstance(net_cfg, NetConfig):
        for i, f in enumerate(problem.funcs):
            cfgs[f.name] = replace(net_cfg, seed=net_cfg.seed + i)
    else:
        cfgs = dict(net_cfg)
    nets = {}
    for f in problem.funcs:
        if f.name not in cfgs:
            raise InputError(f"missing network config for '{f.name}'")
        cfg = cfgs[f.name]
        if isinstance(cfg, FixedControl):
            nets[f.name] = cfg
            continue
        net = init_params(cfg, input_dim=f.domain.dim + 1)
        lo, hi = f.domain.bounds()
        nets[f.name] = with_normalization(net, lo, hi)
    return nets


class FixedControl:
    """Stand-in for the control network: a hard-coded feedback rule."""

    def __init__(self, fn: Callable):
        self.fn = fn

    def __call__(self, t, x):
        return np.asarray(self.fn(t, x), dtype=float)


# ---------------------------------------------------------------------------
# loss assembly
# ---------------------------------------------------------------------------


def _interior_evals(problem, nets, arrays, batch: SampleBatch) -> ResidualCtx:
    """Function evaluations (and finite-difference Hessians) at the interior
    points, recorded on whatever the parameter arrays live on."""
    ctx = ResidualCtx(t=batch.t, x=batch.x, ev={})
    for f in problem.funcs:
        if f.order == 0:
            continue
        pairs = set(f.pairs) if f.pairs is not None else None
        ev = forward_eval(arrays[f.name], nets[f.name], batch.t, batch.x,
                          order=f.order, pairs=pairs)
        ctx.ev[f.name] = ev
        if f.hessian == "fd":
            if problem.fd_step is None or problem.fd_step <= 0.0:
                raise InputError("finite-difference Hessian needs fd_step > 0")
            ctx.hess[f.name] = _fd_hessian_nodes(
                arrays[f.name], nets[f.name], batch, problem.fd_step
            )
    if problem.integral is not None:
        ctx.integral = _integral_term(problem, ctx, batch)
    return ctx


def _fd_hessian_nodes(arrs, net, batch, h):
    """Symmetrized central-difference Hessian entries as graph nodes."""
    d = batch.x.shape[1]
    cols = []
    for j in range(d):
        step = np.zeros(d)
        step[j] = h
        evp = forward_eval(arrs, net, batch.t, batch.x + step, order=1, with_time=False)
        evm = forward_eval(arrs, net, batch.t, batch.x - step, order=1, with_time=False)
        cols.append([(evp.dx[k] - evm.dx[k]) * (0.5 / h) for k in range(d)])
    hess = [[None] * d for _ in range(d)]
    for j in range(d):
        for k in range(j, d):
            entry = (cols[j][k] + cols[k][j]) * 0.5
            hess[j][k] = entry
            hess[k][j] = entry
    return hess


def _integral_term(problem, ctx, batch: SampleBatch):
    """Importance-sampled density-weighted average, one value per time row,
    broadcast back over the row's points."""
    if batch.strat is None:
        raise InputError("integral-coupled problems need a stratified batch")
    n_t, n_x = batch.strat
    ev = ctx.ev[problem.integral.func]
    quantity = {"dt": ev.dt, "value": ev.value}[problem.integral.quantity]
    vals = ad.reshape(ev.value, (n_t, n_x))
    shift = ad.detach(vals).min(axis=1, keepdims=True)
    expw = ad.exp((vals * -1.0) + shift)  # stable: largest exponent is 0
    w = expw / ad.rowsum(expw)
    rows = ad.rowsum(w * ad.reshape(quantity, (n_t, n_x)))
    full = rows + np.zeros((1, n_x))
    return ad.reshape(full, (n_t * n_x,))


def _condition_loss(problem, nets, arrays, batch: SampleBatch):
    """Mean squared mismatch of each function's terminal/initial condition."""
    terms = []
    for f in problem.funcs:
        if f.name == "control":
            continue
        cond_t = f.domain.t1 if f.condition_time == "terminal" else f.domain.t0
        ev = forward_eval(arrays[f.name], nets[f.name],
                          np.full(len(batch.cond_x), cond_t), batch.cond_x, order=0)
        target = f.condition(batch.cond_x)
        terms.append(ad.mean(ad.square(ev.value - target)))
    if not terms:
        return 0.0
    out = terms[0]
    for term in terms[1:]:
        out = out + term
    return out


def compute_dgm_loss(problem: ProblemSpec, nets, batch: SampleBatch, arrays=None):
    """Full mini-batch loss for residual-mode problems.

    With ``arrays`` omitted the networks' own (plain) arrays are used and
    the result is a float; wrap the arrays on a tape to obtain a
    differentiable loss node.  Returns ``(loss, report)``.
    """
    nets = _as_net_dict(problem, nets)
    if arrays is None:
        arrays = {f: nets[f].arrays for f in nets}
    ctx = _interior_evals(problem, nets, arrays, batch)
    l1 = None
    for fname, res_fn in problem.residuals.items():
        term = ad.mean(ad.square(res_fn(ctx)))
        l1 = term if l1 is None else l1 + term
    l3 = _condition_loss(problem, nets, arrays, batch)
    total = l1 + l3
    lpos = None
    if problem.penalty is not None:
        lpos = ad.mean(problem.penalty(ctx))
        total = total + lpos
    report = LossReport(
        L1=float(ad.value_of(l1)),
        L3=float(ad.value_of(l3)),
        Lpos=0.0 if lpos is None else float(ad.value_of(lpos)),
        total=float(ad.value_of(total)),
        diagnostics=dict(ctx.aux),
    )
    return total, report


def _check_finite(report: LossReport):
    for comp in ("L1", "L2", "L3", "Lpos", "LH"):
        if not np.isfinite(getattr(report, comp)):
            raise NumericError(f"loss component {comp} is not finite")
    if not np.isfinite(report.Lu):
        raise NumericError("loss component Lu is not finite")


# ---------------------------------------------------------------------------
# residual-mode training (single equations and shared-domain systems)
# ---------------------------------------------------------------------------


def dgm_step(params, problem: ProblemSpec, batch: SampleBatch, adam: AdamState,
             lr: float):
    """One loss evaluation and one optimizer update.

    Returns the updated parameters, optimizer state and the loss report.
    """
    nets = _as_net_dict(problem, params)
    tape = ad.Tape()
    arrays = {f: tape.wrap(nets[f].arrays, prefix=f + "::") for f in nets}
    loss, report = compute_dgm_loss(problem, nets, batch, arrays=arrays)
    _check_finite(report)
    grads = ad.backward(loss)
    joint = _joint_arrays(nets)
    full = {k: grads.get(k, np.zeros_like(v)) for k, v in joint.items()}
    adam_new, direction = adam_update(adam, full)
    nets_new = _apply_step(nets, direction, lr)
    report.diagnostics["step_norm"] = _step_norm(direction, lr)
    return _maybe_single(problem, nets_new), adam_new, report


def _batch_sizes(problem: ProblemSpec, trainer: TrainerConfig):
    sizes = BatchSizes(interior=trainer.n_interior, boundary=trainer.n_boundary,
                       condition=trainer.n_condition)
    stratified = (trainer.n_time, trainer.n_space) if problem.integral is not None else None
    return sizes, stratified


def _should_stop(norms: list[float], trainer: TrainerConfig) -> bool:
    w = trainer.stop_window
    if trainer.stop_tol <= 0.0 or len(norms) < w:
        return False
    return float(np.mean(norms[-w:])) < trainer.stop_tol


def _resolve_nets(problem: ProblemSpec, net_cfg) -> dict[str, NetworkParams]:
    """Accept a config, a config dict, ready parameters or a parameter dict."""
    if isinstance(net_cfg, NetworkParams):
        return _as_net_dict(problem, net_cfg)
    if isinstance(net_cfg, NetConfig):
        return init_nets(problem, net_cfg)
    if isinstance(net_cfg, dict):
        if all(isinstance(v, (NetConfig, FixedControl)) for v in net_cfg.values()):
            return init_nets(problem, net_cfg)
        return dict(net_cfg)
    raise InputError("net_cfg must be a NetConfig, NetworkParams or dict of them")


def train_dgm(problem: ProblemSpec, net_cfg, trainer: TrainerConfig):
    """Sample / evaluate / descend until the iteration budget or the
    parameter-displacement tolerance is hit.  Returns final parameters and
    the recorded loss history."""
    if problem.mode == "mfg":
        raise InputError("use train_mfg for the coupled value/mass system")
    if problem.mode == "pia":
        raise InputError("use train_dgm_pia for primal-form problems")
    nets = _resolve_nets(problem, net_cfg)
    rng = np.random.default_rng(trainer.seed)
    adam = adam_init(_joint_arrays(nets), trainer.adam_beta1, trainer.adam_beta2,
                     trainer.adam_eps)
    dom = problem.funcs[0].domain
    cond_time = problem.funcs[0].condition_time
    sizes, stratified = _batch_sizes(problem, trainer)
    history: list[LossReport] = []
    norms: list[float] = []
    nets_io = _maybe_single(problem, nets)
    for it in range(trainer.iterations):
        batch = sample_batch(dom, sizes, rng, condition_time=cond_time,
                             stratified=stratified)
        try:
            nets_io, adam, report = dgm_step(nets_io, problem, batch, adam,
                                             trainer.learning_rate(it))
        except NumericError as err:
            raise NumericError(f"iteration {it}: {err}") from err
        report.iteration = it + 1
        norms.append(report.diagnostics.get("step_norm", 0.0))
        if (it + 1) % trainer.log_every == 0:
            history.append(report)
        if _should_stop(norms, trainer):
            log.info("%s: displacement tolerance reached at iteration %d",
                     problem.name, it + 1)
            break
    return nets_io, history


# ---------------------------------------------------------------------------
# alternating value/control training (primal-form equations)
# ---------------------------------------------------------------------------


def _control_values(control, batch_t, batch_x):
    if isinstance(control, FixedControl):
        return control(batch_t, batch_x)
    from .network import forward_values

    return forward_values(control, batch_t, batch_x)


def pia_value_loss(problem: ProblemSpec, nets, arrays, batch: SampleBatch,
                   control_vals: np.ndarray):
    """Value-equation loss with the control frozen at sampled values."""
    f = problem.func("value")
    pairs = set(f.pairs) if f.pairs is not None else None
    ev = forward_eval(arrays["value"], nets["value"], batch.t, batch.x,
                      order=f.order, pairs=pairs)
    ctx = ResidualCtx(t=batch.t, x=batch.x, ev={"value": ev})
    res = ev.dt + problem.control.generator(ctx, ev, control_vals) \
        + problem.control.reward(ctx, control_vals)
    l1 = ad.mean(ad.square(res))
    cond_t = f.domain.t1 if f.condition_time == "terminal" else f.domain.t0
    evt = forward_eval(arrays["value"], nets["value"],
                       np.full(len(batch.cond_x), cond_t), batch.cond_x, order=0)
    l3 = ad.mean(ad.square(evt.value - f.condition(batch.cond_x)))
    return l1 + l3, float(ad.value_of(l1)), float(ad.value_of(l3))


def pia_control_objective(problem: ProblemSpec, value_ev: Eval, ctx: ResidualCtx,
                          control_vals):
    """Negated sampled Hamiltonian: minimizing it maximizes the average of
    generator-plus-reward over the batch."""
    ham = problem.control.generator(ctx, value_ev, control_vals) \
        + problem.control.reward(ctx, control_vals)
    return ad.mean(ham) * -1.0


def control_step(problem: ProblemSpec, value_ev: Eval, ctx: ResidualCtx,
                 control_net: NetworkParams, adam: AdamState, lr: float):
    """One descent step on the control network against fixed value evals."""
    tape = ad.Tape()
    arrays = tape.wrap(control_net.arrays, prefix="control::")
    a = forward_eval(arrays, control_net, ctx.t, ctx.x, order=0).value
    lu = pia_control_objective(problem, value_ev, ctx, a)
    lu_val = float(ad.value_of(lu))
    if not np.isfinite(lu_val):
        raise NumericError("loss component Lu is not finite")
    grads = ad.backward(lu)
    full = {f"control::{k}": grads.get(f"control::{k}", np.zeros_like(v))
            for k, v in control_net.arrays.items()}
    adam_new, direction = adam_update(adam, full)
    nets_new = _apply_step({"control": control_net}, direction, lr)
    return nets_new["control"], adam_new, lu_val


def dgm_pia_step(params_value: NetworkParams, params_control,
                 problem: ProblemSpec, batch: SampleBatch,
                 adam_value: AdamState, adam_control: AdamState | None,
                 lr_value: float, lr_control: float):
    """One alternating update: value step first, then control step.

    The control is held fixed (sampled values) during the value update; the
    freshly updated value function is then held fixed during the control
    update.  A hard-coded :class:`FixedControl` skips the control update and
    reduces the scheme to descent on the fixed-control linear equation.
    """
    if problem.control is None:
        raise InputError(f"problem '{problem.name}' has no control coupling")
    a_vals = _control_values(params_control, batch.t, batch.x)

    nets = {"value": params_value}
    tape = ad.Tape()
    arrays = {"value": tape.wrap(params_value.arrays, prefix="value::")}
    loss, l1, l3 = pia_value_loss(problem, nets, arrays, batch, a_vals)
    report = LossReport(L1=l1, L3=l3, LH=l1 + l3, total=l1 + l3)
    _check_finite(report)
    grads = ad.backward(loss)
    full = {f"value::{k}": grads.get(f"value::{k}", np.zeros_like(v))
            for k, v in params_value.arrays.items()}
    adam_value_new, direction = adam_update(adam_value, full)
    value_new = _apply_step({"value": params_value}, direction, lr_value)["value"]
    report.diagnostics["step_norm"] = _step_norm(direction, lr_value)

    control_new, adam_control_new = params_control, adam_control
    if not isinstance(params_control, FixedControl):
        fspec = problem.func("value")
        pairs = set(fspec.pairs) if fspec.pairs is not None else None
        ev_plain = forward_eval(value_new.arrays, value_new, batch.t, batch.x,
                                order=fspec.order, pairs=pairs)
        ctx = ResidualCtx(t=batch.t, x=batch.x, ev={"value": ev_plain})
        control_new, adam_control_new, lu = control_step(
            problem, ev_plain, ctx, params_control, adam_control, lr_control
        )
        report.Lu = lu
    return value_new, control_new, adam_value_new, adam_control_new, report


def train_dgm_pia(problem: ProblemSpec, net_cfg, trainer: TrainerConfig,
                  control_lr_scale: float = 1.0):
    """Alternating descent on value and control networks.

    Returns ``(value_params, control_params, history)``.  A per-iteration
    held-out average of the sampled Hamiltonian is recorded in each report's
    diagnostics; its non-decreasing fraction after warm-up is logged at the
    end as an empirical policy-improvement check.
    """
    if problem.mode != "pia":
        raise InputError("train_dgm_pia expects a primal-form problem")
    cfgs = net_cfg
    if isinstance(net_cfg, NetConfig):
        cfgs = {"value": net_cfg,
                "control": replace(net_cfg, seed=net_cfg.seed + 1)}
    nets = init_nets(problem, cfgs)
    value, control = nets["value"], nets["control"]
    rng = np.random.default_rng(trainer.seed)
    holdout_rng = np.random.default_rng(trainer.seed + 9973)
    adam_v = adam_init(_joint_arrays({"value": value}),
                       trainer.adam_beta1, trainer.adam_beta2, trainer.adam_eps)
    adam_c = None
    if not isinstance(control, FixedControl):
        adam_c = adam_init(_joint_arrays({"control": control}),
                           trainer.adam_beta1, trainer.adam_beta2, trainer.adam_eps)
    dom = problem.func("value").domain
    sizes = BatchSizes(interior=trainer.n_interior, boundary=trainer.n_boundary,
                       condition=trainer.n_condition)
    holdout = sample_batch(dom, sizes, holdout_rng)
    history: list[LossReport] = []
    norms: list[float] = []
    hams: list[float] = []
    for it in range(trainer.iterations):
        batch = sample_batch(dom, sizes, rng)
        lr = trainer.learning_rate(it)
        try:
            value, control, adam_v, adam_c, report = dgm_pia_step(
                value, control, problem, batch, adam_v, adam_c, lr,
                lr * control_lr_scale)
        except NumericError as err:
            raise NumericError(f"iteration {it}: {err}") from err
        report.iteration = it + 1
        ham = _holdout_hamiltonian(problem, value, control, holdout)
        hams.append(ham)
        report.diagnostics["holdout_hamiltonian"] = ham
        norms.append(report.diagnostics.get("step_norm", 0.0))
        if (it + 1) % trainer.log_every == 0:
            history.append(report)
        if _should_stop(norms, trainer):
            log.info("%s: displacement tolerance reached at iteration %d",
                     problem.name, it + 1)
            break
    frac = improvement_fraction(hams)
    log.info("%s: held-out Hamiltonian non-decreasing in %.1f%% of steps "
             "after warm-up", problem.name, 100.0 * frac)
    if history:
        history[-1].diagnostics["improvement_fraction"] = frac
    return value, control, history


def improvement_fraction(hams: list[float], warmup: float = 0.2) -> float:
    """Fraction of consecutive held-out Hamiltonian averages that do not
    decrease, ignoring the first ``warmup`` share of the run."""
    if len(hams) < 2:
        return 1.0
    start = int(len(hams) * warmup)
    seq = hams[start:]
    if len(seq) < 2:
        return 1.0
    diffs = np.diff(seq)
    return float(np.mean(diffs >= -1e-12))


def _holdout_hamiltonian(problem, value, control, batch) -> float:
    f = problem.func("value")
    pairs = set(f.pairs) if f.pairs is not None else None
    ev = forward_eval(value.arrays, value, batch.t, batch.x,
                      order=f.order, pairs=pairs)
    ctx = ResidualCtx(t=batch.t, x=batch.x, ev={"value": ev})
    a = _control_values(control, batch.t, batch.x)
    ham = problem.control.generator(ctx, ev, a) + problem.control.reward(ctx, a)
    return float(np.mean(ad.value_of(ham)))


# ---------------------------------------------------------------------------
# coupled value/mass training (mean field game)
# ---------------------------------------------------------------------------


def estimate_aggregate_rate(problem: ProblemSpec, net_h: NetworkParams,
                            net_u: NetworkParams, t_rows: np.ndarray,
                            x_cols: np.ndarray) -> np.ndarray:
    """Importance-sampled aggregate trading rate per time row.

    Weights come from the mass exponent u; the integrand is the feedback
    rate derived from the value gradient.
    """
    from .sampling import row_weights

    p = problem.params
    n_t, n_x = t_rows.size, x_cols.shape[0]
    t_flat = np.repeat(t_rows, n_x)
    x_flat = np.tile(x_cols, (n_t, 1))
    u_vals = forward_eval(net_u.arrays, net_u, t_flat, x_flat, order=0).value
    w = row_weights(u_vals.reshape(n_t, n_x))
    ev_h = forward_eval(net_h.arrays, net_h, t_flat, x_flat, order=1)
    nu = ad.value_of(ev_h.dx[0]).reshape(n_t, n_x) / (2.0 * p.kappa)
    return np.sum(w * nu, axis=1)


def train_mfg(problem: ProblemSpec, net_cfg, trainer: TrainerConfig):
    """Round-robin training of the value and mass-exponent networks.

    Each iteration: estimate the aggregate rate on the stratified batch
    (frozen within the step), one descent step on the value equation, one
    on the mass-transport equation, then re-estimate next iteration.
    Returns ``(net_h, net_u, history)``.
    """
    if problem.mode != "mfg":
        raise InputError("train_mfg expects the coupled value/mass problem")
    cfgs = net_cfg
    if isinstance(net_cfg, NetConfig):
        cfgs = {"h": net_cfg, "u": replace(net_cfg, seed=net_cfg.seed + 1)}
    nets = init_nets(problem, cfgs)
    net_h, net_u = nets["h"], nets["u"]
    p = problem.params
    rng = np.random.default_rng(trainer.seed)
    adam_h = adam_init(_joint_arrays({"h": net_h}), trainer.adam_beta1,
                       trainer.adam_beta2, trainer.adam_eps)
    adam_u = adam_init(_joint_arrays({"u": net_u}), trainer.adam_beta1,
                       trainer.adam_beta2, trainer.adam_eps)
    dom_h = problem.func("h").domain
    dom_u = problem.func("u").domain
    sizes = BatchSizes(interior=0, boundary=0, condition=trainer.n_condition)
    history: list[LossReport] = []
    norms: list[float] = []
    for it in range(trainer.iterations):
        lr = trainer.learning_rate(it)
        t_rows = rng.uniform(0.0, p.maturity, size=trainer.n_time)
        batch_h = sample_batch(dom_h, sizes, rng, condition_time="terminal",
                               stratified=(trainer.n_time, trainer.n_space),
                               t_values=t_rows)
        batch_u = sample_batch(dom_u, sizes, rng, condition_time="initial",
                               stratified=(trainer.n_time, trainer.n_space),
                               t_values=t_rows)
        mu_rows = estimate_aggregate_rate(problem, net_h, net_u, t_rows,
                                          batch_u.x[: trainer.n_space])

        # value step: aggregate rate enters as a constant source
        tape = ad.Tape()
        arrays_h = tape.wrap(net_h.arrays, prefix="h::")
        ev_h = forward_eval(arrays_h, net_h, batch_h.t, batch_h.x, order=1)
        ctx_h = ResidualCtx(t=batch_h.t, x=batch_h.x, ev={"h": ev_h},
                            aux={"mu": np.repeat(mu_rows, trainer.n_space)})
        l1_h = ad.mean(ad.square(problem.residuals["h"](ctx_h)))
        evt = forward_eval(arrays_h, net_h, np.full(len(batch_h.cond_x), dom_h.t1),
                           batch_h.cond_x, order=0)
        l3_h = ad.mean(ad.square(evt.value - problem.func("h").condition(batch_h.cond_x)))
        loss_h = l1_h + l3_h
        if not np.isfinite(ad.value_of(loss_h)):
            raise NumericError(f"iteration {it}: value loss is not finite")
        grads = ad.backward(loss_h)
        full = {f"h::{k}": grads.get(f"h::{k}", np.zeros_like(v))
                for k, v in net_h.arrays.items()}
        adam_h, direction = adam_update(adam_h, full)
        step_h = _step_norm(direction, lr)
        net_h = _apply_step({"h": net_h}, direction, lr)["h"]

        # mass step: transport driven by the updated value gradient
        ev_h_plain = forward_eval(net_h.arrays, net_h, batch_u.t, batch_u.x,
                                  order=2, pairs={(1, 1)})
        tape = ad.Tape()
        arrays_u = tape.wrap(net_u.arrays, prefix="u::")
        ev_u = forward_eval(arrays_u, net_u, batch_u.t, batch_u.x, order=1)
        ctx_u = ResidualCtx(
            t=batch_u.t, x=batch_u.x, ev={"u": ev_u},
            aux={
                "h_dq": ad.value_of(ev_h_plain.dx[0]),
                "h_dqq": ad.value_of(ev_h_plain.dxx()),
            },
        )
        ctx_u.integral = _integral_term(problem, ctx_u, batch_u)
        l1_u = ad.mean(ad.square(problem.residuals["u"](ctx_u)))
        ev0 = forward_eval(arrays_u, net_u, np.full(len(batch_u.cond_x), dom_u.t0),
                           batch_u.cond_x, order=0)
        l3_u = ad.mean(ad.square(ev0.value - problem.func("u").condition(batch_u.cond_x)))
        loss_u = l1_u + l3_u
        if not np.isfinite(ad.value_of(loss_u)):
            raise NumericError(f"iteration {it}: mass loss is not finite")
        grads = ad.backward(loss_u)
        full = {f"u::{k}": grads.get(f"u::{k}", np.zeros_like(v))
                for k, v in net_u.arrays.items()}
        adam_u, direction = adam_update(adam_u, full)
        step_u = _step_norm(direction, lr)
        net_u = _apply_step({"u": net_u}, direction, lr)["u"]

        report = LossReport(
            iteration=it + 1,
            L1=float(ad.value_of(l1_h)) + float(ad.value_of(l1_u)),
            L3=float(ad.value_of(l3_h)) + float(ad.value_of(l3_u)),
            total=float(ad.value_of(loss_h)) + float(ad.value_of(loss_u)),
            diagnostics={"step_norm": step_h + step_u,
                         "mu_mean": float(np.mean(mu_rows))},
        )
        norms.append(report.diagnostics["step_norm"])
        if (it + 1) % trainer.log_every == 0:
            history.append(report)
        if _should_stop(norms, trainer):
            break
    return net_h, net_u, history
