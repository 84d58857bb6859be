"""Gated mesh-free PDE network: input layer, L gated blocks, linear readout.

Each hidden block mixes the original (normalized) input with the running
state through four gates,

    S^1     = sigma(W1 x + b1)
    Z^l     = sigma(Uz x + Wz S^l + bz)
    G^l     = sigma(Ug x + Wg S^l + bg)
    R^l     = sigma(Ur x + Wr S^l + br)
    H^l     = sigma(Uh x + Wh (S^l . R^l) + bh)
    S^{l+1} = (1 - G^l) . H^l + Z^l . S^l
    f       = w . S^{L+1} + b

with "." the Hadamard product and x the concatenated (t, state) vector.
The input is affinely normalized to [-1, 1]^{d+1} using stored domain
bounds; derivatives are chain-ruled through that map so all reported
derivatives refer to the original coordinates.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import InputError, Jet, jdotvec, jet_univariate, restrict_pairs

GATES = ("z", "g", "r", "h")


# ---------------------------------------------------------------------------
# activations: value plus first and second derivative rules
# ---------------------------------------------------------------------------


def _act_tanh():
    return (
        ad.tanh,
        lambda v, o: ad.one_minus_square(o),
        lambda v, o, s1: ad.scaled_prod(-2.0, o, s1),
    )


def _act_sigmoid():
    def f0(v):
        return ad.div(1.0, ad.add(1.0, ad.exp(ad.mul(v, -1.0))))

    return (
        f0,
        lambda v, o: ad.mul(o, ad.sub(1.0, o)),
        lambda v, o, s1: ad.mul(s1, ad.sub(1.0, ad.mul(o, 2.0))),
    )


ACTIVATIONS = {"tanh": _act_tanh, "sigmoid": _act_sigmoid}


# ---------------------------------------------------------------------------
# configuration and parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NetConfig:
    """Architecture and initialization choices for one network."""

    width: int = 50
    depth: int = 3
    activation: str = "tanh"
    seed: int = 0
    init: str = "xavier_uniform"


@dataclass
class NetworkParams:
    """All weights of one network plus the input-normalization bounds."""

    width: int
    depth: int
    input_dim: int
    activation: str
    seed: int
    arrays: dict[str, np.ndarray]
    norm_lo: np.ndarray = field(default_factory=lambda: np.array([-1.0]))
    norm_hi: np.ndarray = field(default_factory=lambda: np.array([1.0]))

    def copy(self) -> "NetworkParams":
        return replace(
            self,
            arrays={k: v.copy() for k, v in self.arrays.items()},
            norm_lo=self.norm_lo.copy(),
            norm_hi=self.norm_hi.copy(),
        )

    @property
    def space_dim(self) -> int:
        return self.input_dim - 1

    def n_params(self) -> int:
        return sum(v.size for v in self.arrays.values())


def param_count(width: int, depth: int, input_dim: int) -> int:
    """Closed-form parameter count for the architecture."""
    m, d1 = width, input_dim
    return d1 * m + m + depth * (4 * m * d1 + 4 * m * m + 4 * m) + m + 1


def init_params(cfg: NetConfig, input_dim: int) -> NetworkParams:
    """Fresh parameters; reproducible for a given seed.

    Weights use a uniform law scaled by fan-in and fan-out (variance
    2 / (fan_in + fan_out)); biases start at zero.
    """
    if input_dim < 1:
        raise InputError(f"input_dim must be >= 1, got {input_dim}")
    if cfg.width < 1 or cfg.depth < 1:
        raise InputError("width and depth must be >= 1")
    if cfg.activation not in ACTIVATIONS:
        raise InputError(f"unknown activation '{cfg.activation}'")
    if cfg.init != "xavier_uniform":
        raise InputError(f"unknown init scheme '{cfg.init}'")
    rng = np.random.default_rng(cfg.seed)
    m = cfg.width

    def uni(shape, fan_in, fan_out):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=shape)

    arrays: dict[str, np.ndarray] = {
        "input.w": uni((m, input_dim), input_dim, m),
        "input.b": np.zeros(m),
    }
    for layer in range(1, cfg.depth + 1):
        for gate in GATES:
            arrays[f"layer{layer}.u_{gate}"] = uni((m, input_dim), input_dim, m)
            arrays[f"layer{layer}.w_{gate}"] = uni((m, m), m, m)
            arrays[f"layer{layer}.b_{gate}"] = np.zeros(m)
    arrays["out.w"] = uni((m,), m, 1)
    arrays["out.b"] = np.zeros(())

    norm_lo = np.full(input_dim, -1.0)
    norm_hi = np.full(input_dim, 1.0)
    return NetworkParams(m, cfg.depth, input_dim, cfg.activation, cfg.seed,
                         arrays, norm_lo, norm_hi)


def with_normalization(params: NetworkParams, lo, hi) -> NetworkParams:
    """Return a copy whose inputs are mapped from [lo, hi] onto [-1, 1]."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if lo.shape != (params.input_dim,) or hi.shape != (params.input_dim,):
        raise InputError("normalization bounds must match the input dimension")
    if np.any(hi <= lo):
        raise InputError("normalization bounds must satisfy lo < hi")
    out = params.copy()
    out.norm_lo, out.norm_hi = lo, hi
    return out


# ---------------------------------------------------------------------------
# forward evaluation
# ---------------------------------------------------------------------------


@dataclass
class Eval:
    """Network value and input derivatives at a batch of points.

    Entries are tape nodes when the parameters were wrapped on a tape and
    plain arrays otherwise.  ``dx`` is indexed by state coordinate; second
    derivatives live in ``dd`` keyed by direction pairs with 0 = time.
    """

    value: object
    dt: object = None
    dx: list = field(default_factory=list)
    dd: dict = field(default_factory=dict)

    def dxx(self, i: int = 0, j: int | None = None):
        j = i if j is None else j
        i, j = min(i, j), max(i, j)
        return self.dd.get((i + 1, j + 1), 0.0)

    def dtx(self, j: int = 0):
        return self.dd.get((0, j + 1), 0.0)


def _normalized_input_jet(params: NetworkParams, t, x, order: int, with_time: bool) -> Jet:
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != params.input_dim - 1:
        raise InputError(
            f"state batch must have shape (B, {params.input_dim - 1}), got {x.shape}"
        )
    t = np.broadcast_to(np.asarray(t, dtype=float), (x.shape[0],))
    raw = np.concatenate([t[:, None], x], axis=1)
    half = 0.5 * (params.norm_hi - params.norm_lo)
    mid = 0.5 * (params.norm_hi + params.norm_lo)
    z = (raw - mid) / half
    n = params.input_dim
    d = []
    for k in range(n):
        if k == 0 and not with_time:
            d.append(None)
            continue
        row = np.zeros((1, n))
        row[0, k] = 1.0 / half[k]
        d.append(row)
    return Jet(z, d, {} if order >= 2 else None)


def _jet_affine3(z: Jet, u, s: Jet | None, w, b) -> Jet:
    """Gate pre-activation jet: one fused node per derivative channel."""
    val = ad.affine3(z.val, u, s.val if s is not None else None,
                     w if s is not None else None, b)
    d = []
    for k in range(z.ndirs):
        zk = z.d[k]
        sk = s.d[k] if s is not None else None
        if zk is None and sk is None:
            d.append(None)
        else:
            d.append(ad.affine3(zk, u if zk is not None else None,
                                sk, w if sk is not None else None))
    dd = None
    s_dd = s.dd if s is not None else None
    if z.dd is not None or s_dd is not None:
        dd = {}
        for pair, sv in (s_dd or {}).items():
            dd[pair] = ad.affine3(None, None, sv, w)
        for pair, zv in (z.dd or {}).items():
            term = ad.affine3(zv, u, None, None)
            dd[pair] = term if pair not in dd else ad.add(dd[pair], term)
    return Jet(val, d, dd)


def forward_eval(arrays, params: NetworkParams, t, x, order: int = 0,
                 with_time: bool = True, pairs=None) -> Eval:
    """Evaluate the network and its input derivatives on a batch.

    ``arrays`` maps parameter names to tape nodes or plain arrays (pass
    ``params.arrays`` for an untaped evaluation).  ``order`` 0 returns only
    values, 1 adds first derivatives, 2 adds the second derivatives listed
    in ``pairs`` (direction-pair tuples; None = all except (time, time)).
    """
    f0, f1, f2 = ACTIVATIONS[params.activation]()
    n = params.input_dim
    if order >= 2 and pairs is None:
        pairs = {(i, j) for i in range(n) for j in range(i, n)} - {(0, 0)}
    with restrict_pairs(pairs if order >= 2 else None):
        if order == 0:
            zraw = _normalized_input_jet(params, t, x, 1, with_time)
            z = Jet(zraw.val, [None] * n, None)
        else:
            z = _normalized_input_jet(params, t, x, order, with_time)

        def act(j):
            return jet_univariate(j, f0, f1, f2 if j.dd is not None else None)

        s = act(_jet_affine3(z, arrays["input.w"], None, None,
                             arrays["input.b"]))
        for layer in range(1, params.depth + 1):
            a = arrays
            zg = act(_jet_affine3(z, a[f"layer{layer}.u_z"], s,
                                  a[f"layer{layer}.w_z"], a[f"layer{layer}.b_z"]))
            gg = act(_jet_affine3(z, a[f"layer{layer}.u_g"], s,
                                  a[f"layer{layer}.w_g"], a[f"layer{layer}.b_g"]))
            rg = act(_jet_affine3(z, a[f"layer{layer}.u_r"], s,
                                  a[f"layer{layer}.w_r"], a[f"layer{layer}.b_r"]))
            hg = act(_jet_affine3(z, a[f"layer{layer}.u_h"], s * rg,
                                  a[f"layer{layer}.w_h"], a[f"layer{layer}.b_h"]))
            s = (1.0 - gg) * hg + zg * s
        out = jdotvec(s, arrays["out.w"]) + arrays["out.b"]

    dx = [out.d[k] for k in range(1, n)] if order >= 1 else []
    return Eval(
        value=out.val,
        dt=out.d[0] if order >= 1 else None,
        dx=dx,
        dd=dict(out.dd) if out.dd else {},
    )


def forward_values(params: NetworkParams, t, x, arrays=None):
    """Batch of plain network values (no derivatives, no tape)."""
    ev = forward_eval(arrays if arrays is not None else params.arrays,
                      params, t, np.atleast_2d(x), order=0)
    return ad.value_of(ev.value)


def forward(params: NetworkParams, t: float, x) -> float:
    """Scalar network value at one point."""
    x = np.asarray(x, dtype=float).reshape(1, -1)
    return float(forward_values(params, np.asarray([t]), x)[0])


def forward_batch(params: NetworkParams, batch) -> np.ndarray:
    """Network values at the interior points of a sample batch, in order."""
    if batch.t.size == 0:
        return np.zeros(0)
    return forward_values(params, batch.t, batch.x)


class DgmFunction:
    """Adapter exposing a network to the generic derivative operations."""

    def __init__(self, params: NetworkParams):
        self.params = params

    def jet_eval(self, params, t, x, order: int) -> Eval:
        net = self.params if params is None else params
        if isinstance(net, NetworkParams):
            tape = ad.Tape()
            arrays = tape.wrap(net.arrays)
        else:
            arrays, net = net, self.params
        return forward_eval(arrays, net, t, np.atleast_2d(x), order=order)


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------


def save_checkpoint(params: NetworkParams, path) -> None:
    """Flat key -> array container with a JSON header.

    Keys are the parameter names (``input.w``, ``layer2.w_g``, ..., ``out.b``)
    plus ``norm.lo``/``norm.hi``; the ``__meta__`` entry records width, depth,
    state dimension, activation and seed.
    """
    meta = {
        "width": params.width,
        "depth": params.depth,
        "d": params.space_dim,
        "activation": params.activation,
        "seed": params.seed,
    }
    payload = dict(params.arrays)
    payload["norm.lo"] = params.norm_lo
    payload["norm.hi"] = params.norm_hi
    buf = io.BytesIO()
    np.savez(buf, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
             **payload)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> NetworkParams:
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        arrays = {
            k: data[k].astype(float)
            for k in data.files
            if k not in ("__meta__", "norm.lo", "norm.hi")
        }
        lo, hi = data["norm.lo"].astype(float), data["norm.hi"].astype(float)
    return NetworkParams(
        width=int(meta["width"]),
        depth=int(meta["depth"]),
        input_dim=int(meta["d"]) + 1,
        activation=str(meta["activation"]),
        seed=int(meta["seed"]),
        arrays=arrays,
        norm_lo=lo,
        norm_hi=hi,
    )
