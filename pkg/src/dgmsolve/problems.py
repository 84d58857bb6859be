"""Benchmark equations as residual functionals over network evaluations.

A :class:`ProblemSpec` bundles, for each unknown function: its domain and
terminal/initial condition, the interior residual(s) consuming the function
values and derivatives at a point, an optional pointwise inequality penalty,
an optional control coupling (infinitesimal generator and running reward,
for problems trained with a separate feedback-control network) and an
optional density-weighted integral term estimated by importance sampling.

Residual callables are written against plain arithmetic, so they accept
either tape nodes (training) or plain numpy arrays (closed-form reference
checks) without modification.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import InputError, NumericError
from .sampling import Domain

SQRT_2PI = np.sqrt(2.0 * np.pi)


# ---------------------------------------------------------------------------
# problem parameter sets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BsParams:
    """European/American single-asset model constants."""

    r: float = 0.05
    sigma: float = 0.25
    strike: float = 50.0
    maturity: float = 1.0
    x_max: float | None = None  # price-box upper edge, defaults to 4 * strike

    def __post_init__(self):
        if self.sigma <= 0.0 or self.strike <= 0.0 or self.maturity <= 0.0:
            raise InputError("need sigma > 0, strike > 0, maturity > 0")

    @property
    def box_hi(self) -> float:
        return 4.0 * self.strike if self.x_max is None else self.x_max


@dataclass(frozen=True)
class OuParams:
    """Mean-reverting diffusion with a random Gaussian start."""

    kappa: float = 0.5
    theta: float = 0.0
    sigma: float = 2.0
    m: float = 0.0
    v: float = 1.0
    maturity: float = 1.0
    half_width: float | None = None  # box half-width around m, defaults to 6 * scale

    def __post_init__(self):
        if self.sigma <= 0.0 or self.v <= 0.0 or self.kappa <= 0.0:
            raise InputError("need sigma > 0, v > 0, kappa > 0")
        if self.maturity <= 0.0:
            raise InputError("need maturity > 0")

    @property
    def box(self) -> tuple[float, float]:
        lam = max(self.v, self.sigma / np.sqrt(2.0 * self.kappa))
        h = 6.0 * lam if self.half_width is None else self.half_width
        return self.m - h, self.m + h


@dataclass(frozen=True)
class MertonParams:
    """Optimal investment with exponential utility."""

    mu: float = 0.05
    r: float = 0.02
    sigma: float = 0.25
    gamma: float = 1.0
    maturity: float = 1.0
    x_lo: float = -2.0
    x_hi: float = 6.0

    def __post_init__(self):
        if self.sigma <= 0.0 or self.gamma <= 0.0 or self.maturity <= 0.0:
            raise InputError("need sigma > 0, gamma > 0, maturity > 0")

    @property
    def lam(self) -> float:
        return (self.mu - self.r) / self.sigma


@dataclass(frozen=True)
class ExecParams:
    """Inventory liquidation with temporary and permanent impact."""

    kappa: float = 0.01
    b: float = 0.001
    phi: float = 0.1
    alpha: float = 0.1
    maturity: float = 1.0
    q_lo: float = -10.0
    q_hi: float = 10.0

    def __post_init__(self):
        if self.kappa <= 0.0 or self.maturity <= 0.0:
            raise InputError("need kappa > 0, maturity > 0")


@dataclass(frozen=True)
class SysRiskParams:
    """Interbank lending game; q_pref is the borrowing preference weight."""

    n_players: int = 3
    a: float = 1.0
    q_pref: float = 1.0
    eps: float = 10.0
    c: float = 1.0
    rho: float = 0.5
    sigma: float = 0.2
    maturity: float = 1.0
    x_lo: float = -3.0
    x_hi: float = 8.0
    fd_step: float = 5.5e-3  # central-difference step for the value Hessians

    def __post_init__(self):
        if self.n_players < 2:
            raise InputError("need at least two players")
        if self.sigma <= 0.0 or self.maturity <= 0.0:
            raise InputError("need sigma > 0, maturity > 0")
        if self.eps <= self.q_pref**2:
            raise InputError("need eps > q_pref^2 for a well-posed game")


@dataclass(frozen=True)
class MfgParams:
    """Trade-crowding game: identical preferences, Gaussian initial mass."""

    a_terminal: float = 1.0
    phi: float = 1.0
    alpha_perm: float = 1.0
    kappa: float = 1.0
    e0: float = 5.0
    var0: float = 0.25
    maturity: float = 1.0
    q_lo: float = -10.0
    q_hi: float = 10.0
    u_lo: float = 0.0
    u_hi: float = 10.0

    def __post_init__(self):
        if self.kappa <= 0.0 or self.var0 <= 0.0 or self.maturity <= 0.0:
            raise InputError("need kappa > 0, var0 > 0, maturity > 0")


# ---------------------------------------------------------------------------
# problem specification containers
# ---------------------------------------------------------------------------


@dataclass
class ResidualCtx:
    """Everything a residual functional may consume at a batch of points."""

    t: np.ndarray
    x: np.ndarray
    ev: dict
    hess: dict = field(default_factory=dict)  # fd Hessians keyed by function
    integral: object = None  # density-weighted average term, aligned with t/x
    aux: dict = field(default_factory=dict)


@dataclass(frozen=True)
class FuncSpec:
    """One unknown function: name, domain, condition, derivative needs."""

    name: str
    domain: Domain
    condition_time: str  # "terminal" or "initial"
    condition: Callable[[np.ndarray], np.ndarray]
    order: int = 1
    pairs: frozenset | None = None  # direction pairs when order == 2
    hessian: str = "exact"  # "fd" = central differences of gradients


@dataclass(frozen=True)
class ControlSpec:
    """Generator and running reward of the controlled process.

    ``generator(ctx, ev, a)`` applies the generator with control value ``a``
    to the function evaluation ``ev``; ``reward(ctx, a)`` is the running
    reward.  Both are polymorphic in nodes/arrays.
    """

    generator: Callable
    reward: Callable


@dataclass(frozen=True)
class IntegralSpec:
    """Density-weighted integral coupling: weights from exp(-func values)."""

    func: str
    quantity: str = "dt"


@dataclass(frozen=True)
class ProblemSpec:
    name: str
    mode: str  # "dgm", "pia" or "mfg"
    funcs: tuple[FuncSpec, ...]
    residuals: dict[str, Callable] = field(default_factory=dict)
    penalty: Callable | None = None
    control: ControlSpec | None = None
    integral: IntegralSpec | None = None
    fd_step: float | None = None
    params: object = None

    def func(self, name: str) -> FuncSpec:
        for f in self.funcs:
            if f.name == name:
                return f
        raise InputError(f"unknown function '{name}' in problem '{self.name}'")

    @property
    def max_order(self) -> int:
        return max(f.order for f in self.funcs)


# ---------------------------------------------------------------------------
# option pricing
# ---------------------------------------------------------------------------


def black_scholes_european(p: BsParams) -> ProblemSpec:
    """Backward pricing equation with terminal call payoff."""
    dom = Domain(0.0, p.maturity, [0.0], [p.box_hi])

    def residual(ctx: ResidualCtx):
        g = ctx.ev["value"]
        x = ctx.x[:, 0]
        return (
            g.dt
            + (p.r * x) * g.dx[0]
            + (0.5 * p.sigma**2 * x * x) * g.dxx()
            - p.r * g.value
        )

    return ProblemSpec(
        name="bs_european",
        mode="dgm",
        funcs=(
            FuncSpec(
                "value", dom, "terminal",
                lambda x: np.maximum(x[:, 0] - p.strike, 0.0),
                order=2, pairs=frozenset({(1, 1)}),
            ),
        ),
        residuals={"value": residual},
        params=p,
    )


def american_put(p: BsParams) -> ProblemSpec:
    """Free-boundary pricing: residual active only where the value exceeds
    the put payoff, plus a squared penalty on payoff-dominance violations."""
    dom = Domain(0.0, p.maturity, [0.0], [p.box_hi])

    def payoff(x):
        return np.maximum(p.strike - x[:, 0], 0.0)

    def residual(ctx: ResidualCtx):
        g = ctx.ev["value"]
        x = ctx.x[:, 0]
        pde = (
            g.dt
            + (p.r * x) * g.dx[0]
            + (0.5 * p.sigma**2 * x * x) * g.dxx()
            - p.r * g.value
        )
        # continuation-region indicator, held constant within the step
        mask = (ad.detach(g.value) > payoff(ctx.x)).astype(float)
        return mask * pde

    def penalty(ctx: ResidualCtx):
        g = ctx.ev["value"]
        gap = ad.maximum0(payoff(ctx.x) - g.value)
        return ad.square(gap)

    return ProblemSpec(
        name="american_put",
        mode="dgm",
        funcs=(
            FuncSpec("value", dom, "terminal", payoff,
                     order=2, pairs=frozenset({(1, 1)})),
        ),
        residuals={"value": residual},
        penalty=penalty,
        params=p,
    )


# ---------------------------------------------------------------------------
# density evolution
# ---------------------------------------------------------------------------


def gaussian_pdf(x, mean, var):
    return np.exp(-0.5 * (x - mean) ** 2 / var) / (SQRT_2PI * np.sqrt(var))


def fokker_planck_direct(p: OuParams) -> ProblemSpec:
    """Density equation solved directly, with a positivity penalty.

    The baseline approach: nothing enforces positivity or unit mass beyond
    the penalty, which is the point of comparing it with the exponential
    reparameterization below.
    """
    lo, hi = p.box
    dom = Domain(0.0, p.maturity, [lo], [hi])

    def residual(ctx: ResidualCtx):
        f = ctx.ev["value"]
        x = ctx.x[:, 0]
        return (
            f.dt
            - p.kappa * f.value
            + (p.kappa * (p.theta - x)) * f.dx[0]
            - (0.5 * p.sigma**2) * f.dxx()
        )

    def penalty(ctx: ResidualCtx):
        return ad.maximum0(-ctx.ev["value"].value)

    return ProblemSpec(
        name="fp_direct",
        mode="dgm",
        funcs=(
            FuncSpec(
                "value", dom, "initial",
                lambda x: gaussian_pdf(x[:, 0], p.m, p.v**2),
                order=2, pairs=frozenset({(1, 1)}),
            ),
        ),
        residuals={"value": residual},
        penalty=penalty,
        params=p,
    )


def fokker_planck_reparam(p: OuParams) -> ProblemSpec:
    """Equation for the exponent u with p = exp(-u) / int exp(-u).

    The density-weighted average of the time derivative enters as an
    integral term; training estimates it by importance sampling over the
    stratified interior batch.  The recovered density is positive and
    normalized by construction (see :func:`density_from_u`).
    """
    lo, hi = p.box
    dom = Domain(0.0, p.maturity, [lo], [hi])

    def residual(ctx: ResidualCtx):
        u = ctx.ev["value"]
        x = ctx.x[:, 0]
        if ctx.integral is None:
            raise InputError("reparameterized residual needs the integral term")
        return (
            u.dt
            + p.kappa
            + (p.kappa * (p.theta - x)) * u.dx[0]
            + (0.5 * p.sigma**2) * (ad.square(u.dx[0]) - u.dxx())
            - ctx.integral
        )

    return ProblemSpec(
        name="fp_reparam",
        mode="dgm",
        funcs=(
            FuncSpec(
                "value", dom, "initial",
                lambda x: 0.5 * ((x[:, 0] - p.m) / p.v) ** 2,
                order=2, pairs=frozenset({(1, 1)}),
            ),
        ),
        residuals={"value": residual},
        integral=IntegralSpec(func="value", quantity="dt"),
        params=p,
    )


def density_from_u(params_u, t: float, grid: np.ndarray) -> np.ndarray:
    """Normalized density exp(-u(t, .)) on a sorted evaluation grid.

    Output is non-negative and its trapezoid integral over the grid is one
    by construction.
    """
    from .network import NetworkParams, forward_values

    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size < 2:
        raise InputError("evaluation grid must be 1-d with at least 2 nodes")
    if np.any(np.diff(grid) <= 0.0):
        raise InputError("evaluation grid must be strictly increasing")
    if isinstance(params_u, NetworkParams):
        u = forward_values(params_u, np.full(grid.size, t), grid[:, None])
    else:
        u = np.asarray(params_u(t, grid), dtype=float)
    if not np.all(np.isfinite(u)):
        raise NumericError("non-finite exponent values on the grid")
    w = np.exp(-(u - u.min()))
    mass = np.trapezoid(w, grid)
    return w / mass


# ---------------------------------------------------------------------------
# stochastic control
# ---------------------------------------------------------------------------


def merton_primal(p: MertonParams) -> ProblemSpec:
    """Investment problem kept in primal form: the pointwise supremum over
    the invested amount is handled by a feedback-control network.

    The asset-price state is dropped: with a terminal utility independent of
    the price, all price derivatives vanish and the equation closes in
    (t, wealth) alone.
    """
    dom = Domain(0.0, p.maturity, [p.x_lo], [p.x_hi])
    excess = p.mu - p.r

    def generator(ctx, ev, a):
        x = ctx.x[:, 0]
        return (a * excess + p.r * x) * ev.dx[0] + (0.5 * p.sigma**2) * ad.square(a) * ev.dxx()

    def reward(ctx, a):
        return 0.0

    return ProblemSpec(
        name="merton_pia",
        mode="pia",
        funcs=(
            FuncSpec(
                "value", dom, "terminal",
                lambda x: -np.exp(-p.gamma * x[:, 0]),
                order=2, pairs=frozenset({(1, 1)}),
            ),
            FuncSpec("control", dom, "terminal", lambda x: np.zeros(len(x)), order=0),
        ),
        control=ControlSpec(generator=generator, reward=reward),
        params=p,
    )


MERTON_HESSIAN_FLOOR = 1e-4


def merton_simplified(p: MertonParams) -> ProblemSpec:
    """Investment problem with the supremum solved out analytically.

    The nonlinear ratio term divides by the wealth curvature; its magnitude
    is clamped below at ``MERTON_HESSIAN_FLOOR`` (sign-preserving) and the
    clamp activation rate is reported in the step diagnostics.
    """
    dom = Domain(0.0, p.maturity, [p.x_lo], [p.x_hi])

    def residual(ctx: ResidualCtx):
        h = ctx.ev["value"]
        x = ctx.x[:, 0]
        dxx = h.dxx()
        clamped = ad.clamp_magnitude(dxx, MERTON_HESSIAN_FLOOR)
        raw = ad.detach(dxx)
        ctx.aux["hessian_clamped_fraction"] = float(
            np.mean(np.abs(raw) < MERTON_HESSIAN_FLOOR)
        )
        ratio = ad.square(h.dx[0]) / clamped
        return h.dt + (p.r * x) * h.dx[0] - (0.5 * p.lam**2) * ratio

    return ProblemSpec(
        name="merton_dgm",
        mode="dgm",
        funcs=(
            FuncSpec(
                "value", dom, "terminal",
                lambda x: -np.exp(-p.gamma * x[:, 0]),
                order=2, pairs=frozenset({(1, 1)}),
            ),
        ),
        residuals={"value": residual},
        params=p,
    )


def optimal_execution_primal(p: ExecParams) -> ProblemSpec:
    """Liquidation problem in primal form with a trading-rate network.

    The running reward carries the inventory penalty and the cash flow of
    trading at the impacted price; the generator transports inventory at
    the (liquidation) rate.
    """
    dom = Domain(0.0, p.maturity, [p.q_lo], [p.q_hi])

    def generator(ctx, ev, a):
        return -a * ev.dx[0]

    def reward(ctx, a):
        q = ctx.x[:, 0]
        return -p.phi * ad.square(q) + a * (-p.b * q - p.kappa * a)

    return ProblemSpec(
        name="exec_pia",
        mode="pia",
        funcs=(
            FuncSpec(
                "value", dom, "terminal",
                lambda x: -p.alpha * x[:, 0] ** 2,
                order=1,
            ),
            FuncSpec("control", dom, "terminal", lambda x: np.zeros(len(x)), order=0),
        ),
        control=ControlSpec(generator=generator, reward=reward),
        params=p,
    )


def optimal_execution_simplified(p: ExecParams) -> ProblemSpec:
    """Liquidation problem with the supremum solved out analytically."""
    dom = Domain(0.0, p.maturity, [p.q_lo], [p.q_hi])

    def residual(ctx: ResidualCtx):
        h = ctx.ev["value"]
        q = ctx.x[:, 0]
        return (
            h.dt
            - p.phi * ad.square(q)
            + ad.square(p.b * q + h.dx[0]) / (4.0 * p.kappa)
        )

    return ProblemSpec(
        name="exec_dgm",
        mode="dgm",
        funcs=(
            FuncSpec(
                "value", dom, "terminal",
                lambda x: -p.alpha * x[:, 0] ** 2,
                order=1,
            ),
        ),
        residuals={"value": residual},
        params=p,
    )


def fixed_control_problem(pia: ProblemSpec, control_fn: Callable) -> ProblemSpec:
    """Linear equation obtained by freezing the feedback control.

    ``control_fn(t, x)`` supplies the control value; the residual is the
    generator applied with that control plus the running reward, which is
    exactly the value-equation residual of the alternating scheme with the
    control held fixed.
    """
    if pia.control is None:
        raise InputError("fixed_control_problem needs a control-coupled problem")
    value = pia.func("value")

    def residual(ctx: ResidualCtx):
        ev = ctx.ev["value"]
        a = control_fn(ctx.t, ctx.x)
        return ev.dt + pia.control.generator(ctx, ev, a) + pia.control.reward(ctx, a)

    return ProblemSpec(
        name=pia.name + "_fixed_control",
        mode="dgm",
        funcs=(value,),
        residuals={"value": residual},
        params=pia.params,
    )


# ---------------------------------------------------------------------------
# interbank game (system of value functions)
# ---------------------------------------------------------------------------


def systemic_risk_system(p: SysRiskParams) -> ProblemSpec:
    """Coupled value equations of the N-player reserve game.

    Each player's equation carries the equilibrium drifts of all players,
    a common-noise diffusion matrix and quadratic running costs.  Second
    derivatives use central differences of the gradients (see
    ``FuncSpec.hessian``); the closed-loop drift couples equation i to
    every player's own-state derivative.
    """
    n = p.n_players
    dom = Domain(0.0, p.maturity, [p.x_lo] * n, [p.x_hi] * n)
    diff = np.full((n, n), p.rho**2) + np.eye(n) * (1.0 - p.rho**2)
    diff *= 0.5 * p.sigma**2
    run_coeff = 0.5 * (p.eps - p.q_pref**2)

    def terminal_for(i):
        def g(x):
            xbar = x.mean(axis=1)
            return 0.5 * p.c * (xbar - x[:, i]) ** 2

        return g

    def residual_for(i):
        def res(ctx: ResidualCtx):
            xbar = ctx.x.mean(axis=1)
            vi = ctx.ev[f"V{i + 1}"]
            hess = ctx.hess[f"V{i + 1}"]
            out = vi.dt
            for j in range(n):
                vj = ctx.ev[f"V{j + 1}"]
                drift = (p.a + p.q_pref) * (xbar - ctx.x[:, j]) - vj.dx[j]
                out = out + drift * vi.dx[j]
            for j in range(n):
                for k in range(n):
                    out = out + diff[j, k] * hess[j][k]
            ei = xbar - ctx.x[:, i]
            out = out + run_coeff * (ei * ei) + 0.5 * ad.square(vi.dx[i])
            return out

        return res

    funcs = tuple(
        FuncSpec(f"V{i + 1}", dom, "terminal", terminal_for(i), order=1, hessian="fd")
        for i in range(n)
    )
    residuals = {f"V{i + 1}": residual_for(i) for i in range(n)}
    return ProblemSpec(
        name="sysrisk",
        mode="dgm",
        funcs=funcs,
        residuals=residuals,
        fd_step=p.fd_step,
        params=p,
    )


# ---------------------------------------------------------------------------
# trade-crowding mean field game
# ---------------------------------------------------------------------------


def mfg_system(p: MfgParams) -> ProblemSpec:
    """Coupled value/mass system for the crowded liquidation game.

    The value equation for h(t, q) sees the aggregate trading rate mu_t as
    a constant source within each step; the mass is carried as the exponent
    u of a normalized density, whose transport equation is driven by the
    trading rate nu = (d_q h) / (2 kappa).  Both density-weighted averages
    (mu_t and the gauge term of the u-equation) are estimated by importance
    sampling on the stratified batch.
    """
    dom_h = Domain(0.0, p.maturity, [p.q_lo], [p.q_hi])
    dom_u = Domain(0.0, p.maturity, [p.u_lo], [p.u_hi])

    def residual_h(ctx: ResidualCtx):
        h = ctx.ev["h"]
        q = ctx.x[:, 0]
        mu = ctx.aux["mu"]
        return (
            h.dt
            - p.phi * ad.square(q)
            + ad.square(h.dx[0]) / (4.0 * p.kappa)
            + p.alpha_perm * mu * q
        )

    def residual_u(ctx: ResidualCtx):
        u = ctx.ev["u"]
        if ctx.integral is None:
            raise InputError("mass-transport residual needs the integral term")
        h_dq = ctx.aux["h_dq"]
        h_dqq = ctx.aux["h_dqq"]
        return (
            u.dt
            + (h_dq * u.dx[0] - h_dqq) / (2.0 * p.kappa)
            - ctx.integral
        )

    return ProblemSpec(
        name="mfg",
        mode="mfg",
        funcs=(
            FuncSpec(
                "h", dom_h, "terminal",
                lambda x: -p.a_terminal * x[:, 0] ** 2,
                order=1,
            ),
            FuncSpec(
                "u", dom_u, "initial",
                lambda x: 0.5 * (x[:, 0] - p.e0) ** 2 / p.var0,
                order=1,
            ),
        ),
        residuals={"h": residual_h, "u": residual_u},
        integral=IntegralSpec(func="u", quantity="dt"),
        params=p,
    )


PROBLEM_BUILDERS = {
    "bs_european": (BsParams, black_scholes_european),
    "american_put": (BsParams, american_put),
    "fp_direct": (OuParams, fokker_planck_direct),
    "fp_reparam": (OuParams, fokker_planck_reparam),
    "merton_dgm": (MertonParams, merton_simplified),
    "merton_pia": (MertonParams, merton_primal),
    "exec_dgm": (ExecParams, optimal_execution_simplified),
    "exec_pia": (ExecParams, optimal_execution_primal),
    "sysrisk": (SysRiskParams, systemic_risk_system),
    "mfg": (MfgParams, mfg_system),
}


def build_problem(name: str, market: dict | None = None) -> ProblemSpec:
    """Construct a benchmark problem by name with market-parameter overrides."""
    if name not in PROBLEM_BUILDERS:
        raise InputError(f"unknown problem '{name}'")
    cls, builder = PROBLEM_BUILDERS[name]
    market = dict(market or {})
    known = set(cls.__dataclass_fields__)
    unknown = set(market) - known
    if unknown:
        raise InputError(f"unknown market parameters for {name}: {sorted(unknown)}")
    return builder(cls(**market))
