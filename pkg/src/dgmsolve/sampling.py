"""Mesh-free point sampling and the self-normalized integral estimator.

Interior, condition-time and spatial-boundary points are drawn uniformly on
their regions.  For equations carrying a density-weighted integral term the
sampler provides a stratified mode: a product of N_t time draws with N_x
space draws, so that all points sharing a time row can feed one
self-normalized estimate of the integral at that time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import InputError


@dataclass(frozen=True)
class Domain:
    """Time interval [t0, t1] times a coordinate box [lo, hi]^d."""

    t0: float
    t1: float
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        if self.t1 <= self.t0:
            raise InputError(f"empty time interval [{self.t0}, {self.t1}]")
        if lo.shape != hi.shape or lo.ndim != 1:
            raise InputError("box bounds must be matching 1-d arrays")
        if np.any(hi <= lo):
            raise InputError("degenerate box: need lo < hi componentwise")

    @property
    def dim(self) -> int:
        return self.lo.size

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Bounds of the full (t, x) input, time first."""
        return (
            np.concatenate([[self.t0], self.lo]),
            np.concatenate([[self.t1], self.hi]),
        )


@dataclass(frozen=True)
class BatchSizes:
    interior: int = 0
    boundary: int = 0
    condition: int = 0

    def __post_init__(self):
        if min(self.interior, self.boundary, self.condition) < 0:
            raise InputError("batch sizes must be non-negative")


@dataclass
class SampleBatch:
    """One iteration's random points, grouped by region.

    ``strat`` is ``None`` for plain interior sampling, or ``(n_t, n_x)``
    when the interior is the product of n_t time rows with n_x space
    columns (points stored row-major, time varying slowest).
    """

    t: np.ndarray
    x: np.ndarray
    cond_t: float
    cond_x: np.ndarray
    bnd_t: np.ndarray
    bnd_x: np.ndarray
    strat: tuple[int, int] | None = None

    @property
    def n_interior(self) -> int:
        return self.t.size


def sample_batch(
    dom: Domain,
    sizes: BatchSizes,
    rng: np.random.Generator,
    condition_time: str = "terminal",
    stratified: tuple[int, int] | None = None,
    t_values: np.ndarray | None = None,
) -> SampleBatch:
    """Draw one batch of interior / boundary / condition-time points.

    Interior points are uniform on [t0, t1] x box, condition points uniform
    on the box at t1 (terminal) or t0 (initial), boundary points uniform on
    the faces of the box with uniform times.  ``stratified=(n_t, n_x)``
    replaces the interior draw by a product arrangement; ``t_values`` may
    supply the time rows (shared across coupled equations).
    """
    if condition_time not in ("terminal", "initial"):
        raise InputError(f"unknown condition_time '{condition_time}'")
    d = dom.dim
    span = dom.hi - dom.lo

    if stratified is not None:
        n_t, n_x = stratified
        if t_values is None:
            t_rows = rng.uniform(dom.t0, dom.t1, size=n_t)
        else:
            t_rows = np.asarray(t_values, dtype=float)
            n_t = t_rows.size
        x_cols = dom.lo + span * rng.uniform(size=(n_x, d))
        t = np.repeat(t_rows, n_x)
        x = np.tile(x_cols, (n_t, 1))
        strat = (n_t, n_x)
    else:
        n1 = sizes.interior
        t = rng.uniform(dom.t0, dom.t1, size=n1)
        x = dom.lo + span * rng.uniform(size=(n1, d))
        strat = None

    n3 = sizes.condition
    cond_x = dom.lo + span * rng.uniform(size=(n3, d))
    cond_t = dom.t1 if condition_time == "terminal" else dom.t0

    n2 = sizes.boundary
    bnd_t = rng.uniform(dom.t0, dom.t1, size=n2)
    bnd_x = dom.lo + span * rng.uniform(size=(n2, d))
    if n2 > 0:
        face_dim = rng.integers(0, d, size=n2)
        face_side = rng.integers(0, 2, size=n2)
        rows = np.arange(n2)
        bnd_x[rows, face_dim] = np.where(
            face_side == 1, dom.hi[face_dim], dom.lo[face_dim]
        )

    return SampleBatch(t=t, x=x, cond_t=cond_t, cond_x=cond_x,
                       bnd_t=bnd_t, bnd_x=bnd_x, strat=strat)


def importance_weights(u_values: np.ndarray) -> np.ndarray:
    """Self-normalized weights proportional to exp(-u), computed stably.

    The maximum of ``-u`` is subtracted before exponentiating, so adding any
    constant to ``u`` leaves the weights unchanged.
    """
    u = np.asarray(u_values, dtype=float)
    if u.size == 0:
        raise InputError("importance weights need at least one value")
    if not np.all(np.isfinite(u)):
        raise InputError("importance weights need finite exponents")
    z = -u
    z = z - z.max()
    w = np.exp(z)
    return w / w.sum()


def importance_integral(values: np.ndarray, weights: np.ndarray) -> float:
    """Estimate of the density-weighted integral of ``values``.

    With weights from :func:`importance_weights` on uniform draws this is a
    consistent estimator of the expectation of the integrand under the
    density proportional to exp(-u).
    """
    g = np.asarray(values, dtype=float)
    w = np.asarray(weights, dtype=float)
    if g.shape != w.shape:
        raise InputError(f"length mismatch: values {g.shape} vs weights {w.shape}")
    return float(g @ w)


def row_weights(u_rows: np.ndarray) -> np.ndarray:
    """Importance weights per time row of a stratified (n_t, n_x) array."""
    u = np.asarray(u_rows, dtype=float)
    z = -u
    z = z - z.max(axis=-1, keepdims=True)
    w = np.exp(z)
    return w / w.sum(axis=-1, keepdims=True)
