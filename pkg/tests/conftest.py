"""Shared helpers: straight-line network re-implementation, complex-step
derivative evaluator, and analytic evaluation containers for residual
substitution checks."""

from __future__ import annotations

import numpy as np
import pytest

from dgmsolve.problems import ResidualCtx


class AnalyticEval:
    """Plain-array stand-in for a network evaluation at a batch of points."""

    def __init__(self, value, dt=None, dx=None, dxx_val=None, dtx_val=None):
        self.value = np.asarray(value, dtype=float)
        self.dt = None if dt is None else np.asarray(dt, dtype=float)
        self.dx = [np.asarray(d, dtype=float) for d in (dx or [])]
        self._dxx = dxx_val
        self._dtx = dtx_val

    def dxx(self, i=0, j=None):
        if np.ndim(self._dxx) == 0 or np.ndim(self._dxx) == 1:
            return np.asarray(self._dxx, dtype=float)
        j = i if j is None else j
        return np.asarray(self._dxx[min(i, j)][max(i, j)], dtype=float)

    def dtx(self, j=0):
        return np.asarray(self._dtx, dtype=float)


def make_ctx(t, x, evals, **kw) -> ResidualCtx:
    return ResidualCtx(t=np.asarray(t, dtype=float),
                       x=np.atleast_2d(np.asarray(x, dtype=float)), ev=evals, **kw)


def straightline_forward(params, t, x):
    """Independent re-implementation of the gated forward pass.

    Plain numpy, no jets, no fused operations; used to pin down the layer
    equations the production path must reproduce.
    """
    a = params.arrays
    act = {"tanh": np.tanh, "sigmoid": lambda v: 1.0 / (1.0 + np.exp(-v))}[
        params.activation
    ]
    t = np.broadcast_to(np.asarray(t, dtype=float), (np.atleast_2d(x).shape[0],))
    raw = np.concatenate([t[:, None], np.atleast_2d(x)], axis=1)
    half = 0.5 * (params.norm_hi - params.norm_lo)
    mid = 0.5 * (params.norm_hi + params.norm_lo)
    z = (raw - mid) / half
    s = act(z @ a["input.w"].T + a["input.b"])
    for layer in range(1, params.depth + 1):
        pre = lambda gate, state: (
            z @ a[f"layer{layer}.u_{gate}"].T
            + state @ a[f"layer{layer}.w_{gate}"].T
            + a[f"layer{layer}.b_{gate}"]
        )
        zg = act(pre("z", s))
        gg = act(pre("g", s))
        rg = act(pre("r", s))
        hg = act(pre("h", s * rg))
        s = (1.0 - gg) * hg + zg * s
    return s @ a["out.w"] + a["out.b"]


def complex_step_derivatives(params, t, x, h=1e-20, hx=1e-5):
    """Value, first derivatives (complex step, machine precision) and the
    second x-derivative (central difference of complex-step gradients).

    A complex-capable copy of the straight-line forward; independent of the
    production jet rules.
    """
    a = params.arrays

    def fwd(tv, xv):
        act = np.tanh
        tv = np.broadcast_to(np.asarray(tv), (np.atleast_2d(xv).shape[0],))
        raw = np.concatenate([tv[:, None], np.atleast_2d(xv)], axis=1)
        half = 0.5 * (params.norm_hi - params.norm_lo)
        mid = 0.5 * (params.norm_hi + params.norm_lo)
        z = (raw - mid) / half
        s = act(z @ a["input.w"].T + a["input.b"])
        for layer in range(1, params.depth + 1):
            pre = lambda gate, state: (
                z @ a[f"layer{layer}.u_{gate}"].T
                + state @ a[f"layer{layer}.w_{gate}"].T
                + a[f"layer{layer}.b_{gate}"]
            )
            zg = act(pre("z", s))
            gg = act(pre("g", s))
            rg = act(pre("r", s))
            hg = act(pre("h", s * rg))
            s = (1.0 - gg) * hg + zg * s
        return s @ a["out.w"] + a["out.b"]

    t = np.asarray(t, dtype=float)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    value = fwd(t, x).real
    dt = fwd(t + 1j * h, x).imag / h

    def grad_x(xv):
        return fwd(t, xv + 1j * h).imag / h

    dx = grad_x(x)
    dxx = (grad_x(x + hx) - grad_x(x - hx)) / (2.0 * hx)
    return value, dt, dx, dxx


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240831)
