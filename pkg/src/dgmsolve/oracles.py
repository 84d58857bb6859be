"""Closed-form and reference numerical solutions for the benchmarks.

These are the independent yardsticks: every trained surface is judged
against a function from this module, and every implemented residual is
checked by substituting the corresponding solution (with hand-derived
derivatives) into it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import solve_banded
from scipy.special import ndtr

from .autodiff import InputError, NumericError
from .problems import (
    BsParams,
    ExecParams,
    MertonParams,
    MfgParams,
    OuParams,
    SysRiskParams,
    gaussian_pdf,
)


@dataclass
class AnalyticSolution:
    """Closed-form value/control/density functions plus named extras.

    ``extras`` holds derivative functions and model constants used by the
    residual-substitution checks.
    """

    value: object
    control: object = None
    density: object = None
    extras: dict = field(default_factory=dict)


def norm_pdf(x):
    return np.exp(-0.5 * np.square(x)) / np.sqrt(2.0 * np.pi)


# ---------------------------------------------------------------------------
# European options
# ---------------------------------------------------------------------------


def _d_plus_minus(p: BsParams, t, x):
    tau = p.maturity - np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float)
    tau = np.maximum(tau, 1e-300)
    sq = p.sigma * np.sqrt(tau)
    dp = (np.log(x / p.strike) + (p.r + 0.5 * p.sigma**2) * tau) / sq
    return dp, dp - sq, tau


def bs_call(p: BsParams) -> Callable:
    """European call price; returns the payoff at expiry."""

    def price(t, x):
        t = np.asarray(t, dtype=float)
        x = np.asarray(x, dtype=float)
        if np.any(x < 0.0):
            raise InputError("price requires x >= 0")
        payoff = np.maximum(x - p.strike, 0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            dp, dm, tau = _d_plus_minus(p, t, np.maximum(x, 1e-300))
            val = x * ndtr(dp) - p.strike * np.exp(-p.r * tau) * ndtr(dm)
        at_expiry = tau <= 1e-12
        zero = x <= 0.0
        return np.where(at_expiry, payoff, np.where(zero, 0.0, val))

    return price


def bs_call_derivatives(p: BsParams):
    """(delta, gamma, theta) of the call for residual substitution."""

    def delta(t, x):
        dp, _, _ = _d_plus_minus(p, t, x)
        return ndtr(dp)

    def gamma(t, x):
        dp, _, tau = _d_plus_minus(p, t, x)
        return norm_pdf(dp) / (np.asarray(x) * p.sigma * np.sqrt(tau))

    def theta(t, x):
        dp, dm, tau = _d_plus_minus(p, t, x)
        return (
            -np.asarray(x) * norm_pdf(dp) * p.sigma / (2.0 * np.sqrt(tau))
            - p.r * p.strike * np.exp(-p.r * tau) * ndtr(dm)
        )

    return delta, gamma, theta


def bs_put(p: BsParams) -> Callable:
    """European put price (put-call parity form)."""

    def price(t, x):
        t = np.asarray(t, dtype=float)
        x = np.asarray(x, dtype=float)
        payoff = np.maximum(p.strike - x, 0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            dp, dm, tau = _d_plus_minus(p, t, np.maximum(x, 1e-300))
            val = p.strike * np.exp(-p.r * tau) * ndtr(-dm) - x * ndtr(-dp)
        at_expiry = tau <= 1e-12
        zero = x <= 0.0
        return np.where(at_expiry, payoff,
                        np.where(zero, p.strike * np.exp(-p.r * tau), val))

    return price


# ---------------------------------------------------------------------------
# mean-reverting density
# ---------------------------------------------------------------------------


def ou_moments(p: OuParams, t):
    """Mean and variance of the marginal at time t."""
    t = np.asarray(t, dtype=float)
    decay = np.exp(-p.kappa * t)
    mean = p.m * decay + p.theta * (1.0 - decay)
    var = (p.sigma**2 / (2.0 * p.kappa)) * (1.0 - decay**2) + p.v**2 * decay**2
    return mean, var


def ou_density(p: OuParams) -> Callable:
    """Gaussian marginal density of the mean-reverting process."""

    def density(t, x):
        mean, var = ou_moments(p, t)
        return gaussian_pdf(np.asarray(x, dtype=float), mean, var)

    return density


def ou_exponent_solution(p: OuParams) -> AnalyticSolution:
    """Gauge-fixed exponent u with exp(-u) proportional to the density.

    The gauge u = (x - M_t)^2 / (2 V_t^2) + ln V_t makes the density-weighted
    average of the time derivative vanish identically.
    """

    def moments(t):
        mean, var = ou_moments(p, t)
        return mean, var

    def u(t, x):
        mean, var = moments(t)
        return 0.5 * (np.asarray(x) - mean) ** 2 / var + 0.5 * np.log(var)

    def u_t(t, x):
        mean, var = moments(t)
        vol = np.sqrt(var)
        y = np.asarray(x) - mean
        m_dot = p.kappa * (p.theta - mean)
        v_dot = (p.sigma**2 - 2.0 * p.kappa * var) / (2.0 * vol)
        return -y * m_dot / var - y**2 * v_dot / vol**3 + v_dot / vol

    def u_x(t, x):
        mean, var = moments(t)
        return (np.asarray(x) - mean) / var

    def u_xx(t, x):
        _, var = moments(t)
        return np.ones_like(np.asarray(x, dtype=float)) / var

    return AnalyticSolution(value=u, density=ou_density(p),
                            extras={"u_t": u_t, "u_x": u_x, "u_xx": u_xx})


def ou_density_derivatives(p: OuParams):
    """(p_t, p_x, p_xx) of the Gaussian marginal."""
    dens = ou_density(p)

    def parts(t, x):
        mean, var = ou_moments(p, t)
        vol = np.sqrt(var)
        y = np.asarray(x) - mean
        m_dot = p.kappa * (p.theta - mean)
        v_dot = (p.sigma**2 - 2.0 * p.kappa * var) / (2.0 * vol)
        val = dens(t, x)
        p_t = val * (y * m_dot / var + y**2 * v_dot / vol**3 - v_dot / vol)
        p_x = -val * y / var
        p_xx = val * (y**2 / var**2 - 1.0 / var)
        return p_t, p_x, p_xx

    return parts


# ---------------------------------------------------------------------------
# optimal investment
# ---------------------------------------------------------------------------


def merton_solution(p: MertonParams) -> AnalyticSolution:
    """Exponential-utility value function and feedback investment rule."""
    lam = p.lam

    def scale(t):
        return p.gamma * np.exp(p.r * (p.maturity - np.asarray(t, dtype=float)))

    def value(t, x):
        tau = p.maturity - np.asarray(t, dtype=float)
        return -np.exp(-np.asarray(x) * scale(t) - 0.5 * lam**2 * tau)

    def control(t, x=None):
        t = np.asarray(t, dtype=float)
        out = (lam / (p.gamma * p.sigma)) * np.exp(-p.r * (p.maturity - t))
        if x is not None:
            out = np.broadcast_to(out, np.broadcast(t, np.asarray(x)).shape).copy()
        return out

    def value_t(t, x):
        a = scale(t)
        e = -value(t, x)
        return -e * (p.r * a * np.asarray(x) + 0.5 * lam**2)

    def value_x(t, x):
        return scale(t) * (-value(t, x))

    def value_xx(t, x):
        return -np.square(scale(t)) * (-value(t, x))

    return AnalyticSolution(value=value, control=control,
                            extras={"value_t": value_t, "value_x": value_x,
                                    "value_xx": value_xx})


# ---------------------------------------------------------------------------
# optimal execution
# ---------------------------------------------------------------------------


def exec_solution(p: ExecParams) -> AnalyticSolution:
    """Closed-form inventory value h(t, q) and liquidation rate.

    Requires the terminal penalty to avoid the resonant case where the
    constant in the rate formula is undefined.
    """
    kf = np.sqrt(p.kappa * p.phi)
    denom = p.alpha - 0.5 * p.b - kf
    if abs(denom) < 1e-14:
        raise InputError("singular rate constant: alpha == b/2 + sqrt(kappa*phi)")
    zeta = (p.alpha - 0.5 * p.b + kf) / denom
    gam = np.sqrt(p.phi / p.kappa)

    def g(t):
        s = np.exp(2.0 * gam * (p.maturity - np.asarray(t, dtype=float)))
        return kf * (1.0 + zeta * s) / (1.0 - zeta * s)

    def g_prime(t):
        return p.phi - np.square(g(t)) / p.kappa

    def value(t, q):
        return (g(t) - 0.5 * p.b) * np.square(np.asarray(q, dtype=float))

    def value_t(t, q):
        return g_prime(t) * np.square(np.asarray(q, dtype=float))

    def value_q(t, q):
        return (2.0 * g(t) - p.b) * np.asarray(q, dtype=float)

    def control(t, q):
        tau = p.maturity - np.asarray(t, dtype=float)
        num = zeta * np.exp(gam * tau) + np.exp(-gam * tau)
        den = zeta * np.exp(gam * tau) - np.exp(-gam * tau)
        return gam * num / den * np.asarray(q, dtype=float)

    return AnalyticSolution(
        value=value, control=control,
        extras={"g": g, "g_prime": g_prime, "value_t": value_t,
                "value_q": value_q, "zeta": float(zeta), "gamma_rate": float(gam)},
    )


def execution_inventory_path(p: ExecParams, q0: float, times: np.ndarray) -> np.ndarray:
    """Inventory path under the optimal rate, by integrating the coefficient
    equation numerically (valid even at the singular terminal penalty)."""
    from scipy.integrate import solve_ivp

    times = np.asarray(times, dtype=float)
    terminal = 0.5 * p.b - p.alpha

    def rhs(t, y):
        return p.phi - y[0] ** 2 / p.kappa

    grid = np.linspace(0.0, p.maturity, 2001)
    sol = solve_ivp(rhs, (p.maturity, 0.0), [terminal], t_eval=grid[::-1],
                    rtol=1e-10, atol=1e-12, dense_output=False)
    g_vals = sol.y[0][::-1]
    # q' = (g/kappa) q  =>  q(t) = q0 exp( int_0^t g/kappa )
    integ = np.concatenate([[0.0], np.cumsum(
        0.5 * (g_vals[1:] + g_vals[:-1]) * np.diff(grid))]) / p.kappa
    return q0 * np.exp(np.interp(times, grid, integ))


# ---------------------------------------------------------------------------
# interbank game
# ---------------------------------------------------------------------------


def adaptive_simpson(f: Callable, a: float, b: float, tol: float = 1e-8,
                     max_depth: int = 40) -> float:
    """Adaptive Simpson quadrature with Richardson acceptance test."""
    if b <= a:
        return 0.0

    def simpson(x0, x2, f0, f1, f2):
        return (x2 - x0) / 6.0 * (f0 + 4.0 * f1 + f2)

    def recurse(x0, x2, f0, f1, f2, whole, eps, depth):
        xm = 0.5 * (x0 + x2)
        xl, xr = 0.5 * (x0 + xm), 0.5 * (xm + x2)
        fl, fr = f(xl), f(xr)
        left = simpson(x0, xm, f0, fl, f1)
        right = simpson(xm, x2, f1, fr, f2)
        if depth >= max_depth or abs(left + right - whole) <= 15.0 * eps:
            return left + right + (left + right - whole) / 15.0
        return (
            recurse(x0, xm, f0, fl, f1, left, 0.5 * eps, depth + 1)
            + recurse(xm, x2, f1, fr, f2, right, 0.5 * eps, depth + 1)
        )

    fa, fb = f(a), f(b)
    fm = f(0.5 * (a + b))
    whole = simpson(a, b, fa, fm, fb)
    return recurse(a, b, fa, fm, fb, whole, tol, 0)


def sysrisk_solution(p: SysRiskParams) -> AnalyticSolution:
    """Quadratic value functions of the reserve game.

    The time coefficient solves the scalar Riccati equation implied by the
    coupled system; the additive term integrates it by adaptive quadrature.
    """
    n = p.n_players
    bcoef = p.a + p.q_pref
    big_b = 1.0 - 1.0 / n**2
    cost = p.eps - p.q_pref**2
    big_r = bcoef**2 + big_b * cost
    if big_r <= 0.0:
        raise NumericError("discriminant of the time coefficient is not positive")
    root = np.sqrt(big_r)
    d_plus, d_minus = -bcoef + root, -bcoef - root

    def eta(t):
        s = np.exp((d_plus - d_minus) * (p.maturity - np.asarray(t, dtype=float)))
        num = -cost * (s - 1.0) - p.c * (d_plus * s - d_minus)
        den = (d_minus * s - d_plus) - p.c * big_b * (s - 1.0)
        return num / den

    # reject parameter sets whose denominator degenerates inside [0, T]
    s_grid = np.exp((d_plus - d_minus) * (p.maturity - np.linspace(0.0, p.maturity, 2049)))
    den_grid = (d_minus * s_grid - d_plus) - p.c * big_b * (s_grid - 1.0)
    if np.min(np.abs(den_grid)) < 1e-10:
        raise NumericError("time coefficient denominator vanishes inside [0, T]")

    def eta_prime(t):
        e = eta(t)
        return 2.0 * bcoef * e + big_b * e * e - cost

    mu_coeff = 0.5 * p.sigma**2 * (1.0 - p.rho**2) * (1.0 - 1.0 / n)

    def mu(t):
        t_arr = np.asarray(t, dtype=float)
        flat = np.atleast_1d(t_arr).astype(float)
        out = np.array([
            mu_coeff * adaptive_simpson(lambda s: float(eta(s)), float(ti), p.maturity)
            for ti in flat
        ])
        return out.reshape(t_arr.shape) if t_arr.shape else float(out[0])

    def mu_prime(t):
        return -mu_coeff * eta(t)

    def value_for(i):
        def value(t, x):
            x = np.atleast_2d(np.asarray(x, dtype=float))
            e_i = x.mean(axis=1) - x[:, i]
            return 0.5 * eta(t) * e_i**2 + mu(t)

        return value

    def control_for(i):
        def control(t, x):
            x = np.atleast_2d(np.asarray(x, dtype=float))
            e_i = x.mean(axis=1) - x[:, i]
            return (p.q_pref + (1.0 - 1.0 / n) * eta(t)) * e_i

        return control

    return AnalyticSolution(
        value=tuple(value_for(i) for i in range(n)),
        control=tuple(control_for(i) for i in range(n)),
        extras={
            "eta": eta, "eta_prime": eta_prime, "mu": mu, "mu_prime": mu_prime,
            "R": float(big_r), "delta_plus": float(d_plus),
            "delta_minus": float(d_minus),
        },
    )


# ---------------------------------------------------------------------------
# finite-difference American put
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FdGrid:
    """Uniform price/time grid for the implicit scheme."""

    x_max: float = 200.0
    n_x: int = 400  # number of price intervals
    n_t: int = 800  # number of time steps

    def __post_init__(self):
        if self.x_max <= 0.0 or self.n_x < 4 or self.n_t < 1:
            raise InputError("degenerate finite-difference grid")


def american_put_fd(p: BsParams, grid: FdGrid = FdGrid()):
    """Implicit scheme with an early-exercise projection each time step.

    Returns ``(times, prices_x, surface, boundary)`` where ``surface`` has
    shape (n_t + 1, n_x + 1) ordered forward in time and ``boundary[k]`` is
    the lowest price where the value exceeds the payoff by more than 1e-6
    (NaN where exercise is never optimal on the grid).
    """
    nx, nt = grid.n_x, grid.n_t
    x = np.linspace(0.0, grid.x_max, nx + 1)
    dx = x[1] - x[0]
    dt = p.maturity / nt
    payoff = np.maximum(p.strike - x, 0.0)

    xi = x[1:-1]
    a = 0.5 * p.sigma**2 * xi**2 / dx**2 - 0.5 * p.r * xi / dx
    c = 0.5 * p.sigma**2 * xi**2 / dx**2 + 0.5 * p.r * xi / dx
    b = -p.sigma**2 * xi**2 / dx**2 - p.r

    # banded (I - dt L) for the interior unknowns
    ab = np.zeros((3, nx - 1))
    ab[0, 1:] = -dt * c[:-1]
    ab[1, :] = 1.0 - dt * b
    ab[2, :-1] = -dt * a[1:]

    surface = np.empty((nt + 1, nx + 1))
    surface[-1] = payoff
    v = payoff.copy()
    for k in range(nt - 1, -1, -1):
        rhs = v[1:-1].copy()
        rhs[0] += dt * a[0] * p.strike  # exercised value at the origin
        v_new = np.empty_like(v)
        v_new[0] = p.strike
        v_new[-1] = 0.0
        v_new[1:-1] = solve_banded((1, 1), ab, rhs)
        v_new = np.maximum(v_new, payoff)
        if not np.all(np.isfinite(v_new)) or np.max(v_new) > 10.0 * p.strike:
            raise NumericError("implicit scheme produced an unstable solution")
        v = v_new
        surface[k] = v

    times = np.linspace(0.0, p.maturity, nt + 1)
    boundary = exercise_boundary_from_surface(surface, payoff, x)
    return times, x, surface, boundary


def exercise_boundary_from_surface(surface, payoff, x, tol: float = 1e-6):
    """Lowest price where the value exceeds the payoff by more than tol."""
    boundary = np.full(surface.shape[0], np.nan)
    for k in range(surface.shape[0]):
        above = np.nonzero(surface[k] - payoff > tol)[0]
        if above.size:
            boundary[k] = x[above[0]]
    return boundary


# ---------------------------------------------------------------------------
# trade-crowding game: fixed-point finite-difference reference
# ---------------------------------------------------------------------------


@dataclass
class MfgReference:
    times: np.ndarray
    q: np.ndarray
    h: np.ndarray          # (n_t, n_q) value surface
    mass: np.ndarray       # (n_t, n_q) density
    mu: np.ndarray         # aggregate trading rate per time node
    e_t: np.ndarray        # mean inventory per time node
    sweeps: int = 0


def _dq_central(h_row: np.ndarray, dq: float) -> np.ndarray:
    out = np.empty_like(h_row)
    out[1:-1] = (h_row[2:] - h_row[:-2]) / (2.0 * dq)
    out[0] = (-3.0 * h_row[0] + 4.0 * h_row[1] - h_row[2]) / (2.0 * dq)
    out[-1] = (3.0 * h_row[-1] - 4.0 * h_row[-2] + h_row[-3]) / (2.0 * dq)
    return out


def mfg_reference(p: MfgParams, n_q: int = 801, n_t: int = 601,
                  tol: float = 1e-6, max_sweeps: int = 500,
                  damping: float = 0.7) -> MfgReference:
    """Independent fixed-point solver for the coupled value/mass system.

    Iterates: backward value solve on the grid given the aggregate rate,
    forward conservative transport of the mass, re-estimate of the rate,
    until the rate trajectory is stationary in sup norm.
    """
    q = np.linspace(p.q_lo, p.q_hi, n_q)
    dq = q[1] - q[0]
    times = np.linspace(0.0, p.maturity, n_t)
    dt = times[1] - times[0]
    mu = np.zeros(n_t)
    m0 = gaussian_pdf(q, p.e0, p.var0)
    m0 = m0 / np.trapezoid(m0, q)

    h = np.empty((n_t, n_q))
    nu = np.empty((n_t, n_q))
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        # backward value solve (4th-order time stepping, central space)
        def rhs(k_time, h_row, mu_val):
            dh = _dq_central(h_row, dq)
            return p.phi * q**2 - dh**2 / (4.0 * p.kappa) - p.alpha_perm * mu_val * q

        h[-1] = -p.a_terminal * q**2
        for k in range(n_t - 1, 0, -1):
            mu_mid = 0.5 * (mu[k] + mu[k - 1])
            k1 = rhs(k, h[k], mu[k])
            k2 = rhs(k, h[k] - 0.5 * dt * k1, mu_mid)
            k3 = rhs(k, h[k] - 0.5 * dt * k2, mu_mid)
            k4 = rhs(k, h[k] - dt * k3, mu[k - 1])
            h[k - 1] = h[k] - dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if not np.all(np.isfinite(h[k - 1])):
                raise NumericError("value sweep diverged")
        for k in range(n_t):
            nu[k] = _dq_central(h[k], dq) / (2.0 * p.kappa)

        # forward conservative transport of the mass (donor-cell upwind)
        mass = np.empty((n_t, n_q))
        mass[0] = m0
        m = m0.copy()
        for k in range(n_t - 1):
            v_face = 0.5 * (nu[k][:-1] + nu[k][1:])
            cfl = np.max(np.abs(v_face)) * dt / dq
            if cfl > 1.0:
                raise NumericError(f"transport CFL {cfl:.2f} > 1; refine the grid")
            flux = np.where(v_face > 0.0, v_face * m[:-1], v_face * m[1:])
            m = m.copy()
            m[1:-1] -= dt / dq * (flux[1:] - flux[:-1])
            m[0] -= dt / dq * flux[0]
            m[-1] += dt / dq * flux[-1]
            m = np.maximum(m, 0.0)
            mass[k + 1] = m

        mu_new = np.array([np.trapezoid(nu[k] * mass[k], q) for k in range(n_t)])
        change = float(np.max(np.abs(mu_new - mu)))
        mu = damping * mu_new + (1.0 - damping) * mu
        if change < tol:
            break
    else:
        raise NumericError(f"aggregate rate not stationary after {max_sweeps} sweeps")

    masses = np.trapezoid(mass, q, axis=1)
    e_t = np.trapezoid(mass * q, q, axis=1) / masses
    return MfgReference(times=times, q=q, h=h, mass=mass, mu=mu, e_t=e_t,
                        sweeps=sweeps)
