"""Experiment runner: train a configured problem, evaluate the trained
surfaces against the reference solutions, and summarize a run directory.

Commands (exit codes: 0 ok, 2 usage/config error, 3 numeric failure):

    dgmsolve train    -c cfg.json -o dir
    dgmsolve evaluate -c cfg.json -k dir/value.ckpt -o dir
    dgmsolve report   dir

The config is a single JSON document with sections ``problem``, ``market``,
``net`` (plus ``control_net``/``density_net`` where applicable), ``trainer``
and ``evaluation``.  Unknown keys anywhere are rejected.  ``train`` echoes
the fully resolved configuration (defaults materialized) to ``run.json``,
which can itself be re-run to reproduce the outputs byte for byte.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .autodiff import InputError, NumericError
from .network import NetConfig, NetworkParams, load_checkpoint, save_checkpoint
from .oracles import (
    FdGrid,
    american_put_fd,
    bs_call,
    bs_put,
    exec_solution,
    exercise_boundary_from_surface,
    merton_solution,
    mfg_reference,
    ou_density,
    sysrisk_solution,
)
from .problems import PROBLEM_BUILDERS, build_problem, density_from_u
from .training import (
    LOSS_COLUMNS,
    TrainerConfig,
    history_to_csv,
    train_dgm,
    train_dgm_pia,
    train_mfg,
)

PIA_PROBLEMS = {"merton_pia", "exec_pia"}


class ConfigError(ValueError):
    """Configuration file is malformed; reported with a field path."""


# ---------------------------------------------------------------------------
# configuration handling
# ---------------------------------------------------------------------------

NET_DEFAULTS = {"width": 50, "depth": 3, "activation": "tanh", "seed": 0,
                "init": "xavier_uniform"}

TRAINER_DEFAULTS = {
    "iterations": 1000,
    "interior": 512,
    "boundary": 0,
    "condition": 128,
    "time_rows": 20,
    "space_cols": 50,
    "lr_schedule": [[0.0, 1e-3], [0.5, 1e-4]],
    "beta1": 0.9,
    "beta2": 0.999,
    "eps": 1e-8,
    "stop_tol": 0.0,
    "stop_window": 50,
    "log_every": 10,
    "seed": 0,
}


def _evaluation_defaults(problem: str, market) -> dict:
    t1 = getattr(market, "maturity")
    slices = [0.0, t1 / 3.0, 2.0 * t1 / 3.0, t1]
    if problem in ("bs_european", "american_put"):
        base = {"x_lo": 0.5 * market.strike, "x_hi": 1.5 * market.strike,
                "n_x": 101, "time_slices": slices}
        if problem == "american_put":
            base.update({"fd_x_max": market.box_hi, "fd_n_x": 400,
                         "fd_n_t": 800, "boundary_times": 41,
                         "boundary_tol": 0.1})
        return base
    if problem in ("fp_direct", "fp_reparam"):
        lo, hi = market.box
        return {"x_lo": lo, "x_hi": hi, "n_x": 401, "time_slices": slices}
    if problem in ("merton_dgm", "merton_pia"):
        return {"x_lo": -1.0, "x_hi": 3.0, "n_x": 81, "time_slices": slices}
    if problem in ("exec_dgm", "exec_pia"):
        return {"x_lo": -5.0, "x_hi": 5.0, "n_x": 101, "time_slices": slices}
    if problem == "sysrisk":
        return {"x_lo": market.x_lo, "x_hi": market.x_hi, "n_x": 45,
                "x2_fixed": 2.0, "x3_values": [2.0, 5.0], "time_slices": slices}
    if problem == "mfg":
        return {"x_lo": market.u_lo, "x_hi": market.u_hi, "n_x": 201,
                "time_slices": slices, "ref_n_q": 801, "ref_n_t": 601,
                "inventory_times": 51}
    raise ConfigError(f"problem: unknown problem '{problem}'")


def _check_keys(section: dict, allowed, path: str):
    unknown = sorted(set(section) - set(allowed))
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {unknown}")


def load_config(path) -> dict:
    """Parse, validate and default-fill a run configuration."""
    raw_text = Path(path).read_text()
    try:
        raw = json.loads(raw_text)
    except json.JSONDecodeError as err:
        raise ConfigError(
            f"{path}: invalid JSON at line {err.lineno}, column {err.colno}: {err.msg}"
        ) from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    top_allowed = {"problem", "market", "net", "control_net", "density_net",
                   "trainer", "evaluation", "output_dir"}
    _check_keys(raw, top_allowed, "config")
    problem = raw.get("problem")
    if problem not in PROBLEM_BUILDERS:
        raise ConfigError(
            f"problem: expected one of {sorted(PROBLEM_BUILDERS)}, got {problem!r}"
        )

    market_cls = PROBLEM_BUILDERS[problem][0]
    market_raw = raw.get("market", {})
    _check_keys(market_raw, market_cls.__dataclass_fields__, "market")
    try:
        market = market_cls(**market_raw)
    except InputError as err:
        raise ConfigError(f"market: {err}") from None
    resolved_market = {
        k: getattr(market, k) for k in market_cls.__dataclass_fields__
    }

    def resolve_net(section_name):
        section = raw.get(section_name, {})
        _check_keys(section, NET_DEFAULTS, section_name)
        out = dict(NET_DEFAULTS)
        out.update(section)
        return out

    net = resolve_net("net")
    cfg = {
        "problem": problem,
        "market": resolved_market,
        "net": net,
        "trainer": dict(TRAINER_DEFAULTS),
        "evaluation": _evaluation_defaults(problem, market),
    }
    if problem in PIA_PROBLEMS:
        control = resolve_net("control_net")
        if "control_net" not in raw:
            control["seed"] = net["seed"] + 1
        cfg["control_net"] = control
    elif "control_net" in raw:
        raise ConfigError("control_net: only valid for primal-form problems")
    if problem == "mfg":
        density = resolve_net("density_net")
        if "density_net" not in raw:
            density["seed"] = net["seed"] + 1
        cfg["density_net"] = density
    elif "density_net" in raw:
        raise ConfigError("density_net: only valid for the mean-field problem")

    trainer_raw = raw.get("trainer", {})
    _check_keys(trainer_raw, TRAINER_DEFAULTS, "trainer")
    cfg["trainer"].update(trainer_raw)

    eval_raw = raw.get("evaluation", {})
    _check_keys(eval_raw, cfg["evaluation"], "evaluation")
    cfg["evaluation"].update(eval_raw)

    if "output_dir" in raw:
        cfg["output_dir"] = raw["output_dir"]
    return cfg


def _net_config(section: dict) -> NetConfig:
    return NetConfig(width=int(section["width"]), depth=int(section["depth"]),
                     activation=section["activation"], seed=int(section["seed"]),
                     init=section["init"])


def _trainer_config(section: dict) -> TrainerConfig:
    return TrainerConfig(
        iterations=int(section["iterations"]),
        n_interior=int(section["interior"]),
        n_boundary=int(section["boundary"]),
        n_condition=int(section["condition"]),
        n_time=int(section["time_rows"]),
        n_space=int(section["space_cols"]),
        lr_schedule=tuple((float(a), float(b)) for a, b in section["lr_schedule"]),
        adam_beta1=float(section["beta1"]),
        adam_beta2=float(section["beta2"]),
        adam_eps=float(section["eps"]),
        stop_tol=float(section["stop_tol"]),
        stop_window=int(section["stop_window"]),
        log_every=int(section["log_every"]),
        seed=int(section["seed"]),
    )


def resolved_json(cfg: dict) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def cmd_train(config_path, out_dir) -> int:
    cfg = load_config(config_path)
    out = Path(out_dir if out_dir is not None else cfg.get("output_dir", "."))
    out.mkdir(parents=True, exist_ok=True)
    problem = build_problem(cfg["problem"], cfg["market"])
    trainer = _trainer_config(cfg["trainer"])
    net_cfg = _net_config(cfg["net"])

    if cfg["problem"] in PIA_PROBLEMS:
        cfgs = {"value": net_cfg, "control": _net_config(cfg["control_net"])}
        value, control, history = train_dgm_pia(problem, cfgs, trainer)
        save_checkpoint(value, out / "value.ckpt")
        save_checkpoint(control, out / "control.ckpt")
    elif cfg["problem"] == "mfg":
        cfgs = {"h": net_cfg, "u": _net_config(cfg["density_net"])}
        net_h, net_u, history = train_mfg(problem, cfgs, trainer)
        save_checkpoint(net_h, out / "value.ckpt")
        save_checkpoint(net_u, out / "density.ckpt")
    else:
        nets, history = train_dgm(problem, net_cfg, trainer)
        if isinstance(nets, NetworkParams):
            save_checkpoint(nets, out / "value.ckpt")
        else:
            names = [f.name for f in problem.funcs]
            save_checkpoint(nets[names[0]], out / "value.ckpt")
            for i, name in enumerate(names[1:], start=2):
                save_checkpoint(nets[name], out / f"value{i}.ckpt")
    (out / "losses.csv").write_text(history_to_csv(history))
    (out / "run.json").write_text(resolved_json(cfg))
    return 0


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    return format(float(v), ".10g")


def _error_rows(t_vals, x_cols, approx, exact):
    """Rows of (t, x..., approx, exact, abs_err, rel_err)."""
    rows = []
    for tv, xs, ap, ex in zip(t_vals, x_cols, approx, exact):
        abs_err = abs(ap - ex)
        rel = _fmt(abs_err / abs(ex)) if abs(ex) >= 1e-8 else ""
        rows.append([_fmt(tv)] + [_fmt(v) for v in np.atleast_1d(xs)]
                    + [_fmt(ap), _fmt(ex), _fmt(abs_err), rel])
    return rows


def _write_csv(path, header, rows):
    lines = [",".join(header)] + [",".join(r) for r in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def _surface_files(out, slices, grid, approx_by_slice, exact_by_slice):
    for tv in slices:
        rows = [
            [_fmt(x), _fmt(a), _fmt(e)]
            for x, a, e in zip(grid, approx_by_slice[tv], exact_by_slice[tv])
        ]
        _write_csv(out / f"surface_t{tv:g}.csv", ["x", "approx", "exact"], rows)


def implied_exercise_boundary(values, euro, payoff, x, tol):
    """Largest price where the American-minus-European gap still sits at the
    exercised level (the value touches the payoff within ``tol``)."""
    gap = values - euro
    exercised_gap = payoff - euro
    contact = gap <= exercised_gap + tol
    if not contact[0]:
        return float("nan")
    idx = np.nonzero(~contact)[0]
    last = (idx[0] - 1) if idx.size else (len(x) - 1)
    return float(x[last])


def cmd_evaluate(config_path, ckpt_path, out_dir) -> int:
    cfg = load_config(config_path)
    out = Path(out_dir if out_dir is not None else cfg.get("output_dir", "."))
    out.mkdir(parents=True, exist_ok=True)
    ckpt = Path(ckpt_path)
    value_net = load_checkpoint(ckpt)
    _check_net_matches(cfg["net"], value_net, "net")
    name = cfg["problem"]
    ev = cfg["evaluation"]
    market = cfg["market"]
    grid = np.linspace(ev["x_lo"], ev["x_hi"], int(ev["n_x"]))
    slices = [float(t) for t in ev["time_slices"]]
    from .network import forward_values

    def net_on_grid(net, tv, g=grid):
        return forward_values(net, np.full(g.size, tv), g[:, None])

    rows, approx_by, exact_by = [], {}, {}

    if name in ("bs_european", "american_put"):
        from .problems import BsParams

        p = BsParams(**market)
        if name == "bs_european":
            exact_fn = bs_call(p)
            for tv in slices:
                approx_by[tv] = net_on_grid(value_net, tv)
                exact_by[tv] = exact_fn(tv, grid)
        else:
            fd = american_put_fd(
                p, FdGrid(ev["fd_x_max"], int(ev["fd_n_x"]), int(ev["fd_n_t"]))
            )
            fd_times, fd_x, fd_surface, fd_boundary = fd
            for tv in slices:
                approx_by[tv] = net_on_grid(value_net, tv)
                k = int(round(tv / p.maturity * (len(fd_times) - 1)))
                exact_by[tv] = np.interp(grid, fd_x, fd_surface[k])
            _write_american_boundary(out, ev, p, value_net, fd_times, fd_x,
                                     fd_surface, fd_boundary)
    elif name in ("fp_direct", "fp_reparam"):
        from .problems import OuParams

        p = OuParams(**market)
        exact_fn = ou_density(p)
        for tv in slices:
            if name == "fp_reparam":
                approx_by[tv] = density_from_u(value_net, tv, grid)
            else:
                approx_by[tv] = net_on_grid(value_net, tv)
            exact_by[tv] = exact_fn(tv, grid)
    elif name in ("merton_dgm", "merton_pia"):
        from .problems import MertonParams

        p = MertonParams(**market)
        sol = merton_solution(p)
        for tv in slices:
            approx_by[tv] = net_on_grid(value_net, tv)
            exact_by[tv] = sol.value(tv, grid)
        if name == "merton_pia":
            _write_control_errors(out, cfg, ckpt, grid, slices,
                                  lambda tv, g: sol.control(tv, g))
    elif name in ("exec_dgm", "exec_pia"):
        from .problems import ExecParams

        p = ExecParams(**market)
        sol = exec_solution(p)
        for tv in slices:
            approx_by[tv] = net_on_grid(value_net, tv)
            exact_by[tv] = sol.value(tv, grid)
        if name == "exec_pia":
            _write_control_errors(out, cfg, ckpt, grid, slices,
                                  lambda tv, g: sol.control(tv, g))
    elif name == "sysrisk":
        return _evaluate_sysrisk(cfg, ckpt, out, grid, slices)
    elif name == "mfg":
        return _evaluate_mfg(cfg, ckpt, out, grid, slices)
    else:  # pragma: no cover
        raise ConfigError(f"problem: no evaluator for '{name}'")

    for tv in slices:
        rows.extend(
            _error_rows(np.full(grid.size, tv), grid, approx_by[tv], exact_by[tv])
        )
    _write_csv(out / "errors.csv",
               ["t", "x", "approx", "exact", "abs_err", "rel_err"], rows)
    _surface_files(out, slices, grid, approx_by, exact_by)
    return 0


def _check_net_matches(section, net: NetworkParams, label: str):
    if (int(section["width"]) != net.width or int(section["depth"]) != net.depth
            or section["activation"] != net.activation):
        raise ConfigError(
            f"{label}: checkpoint architecture (width={net.width}, depth={net.depth}, "
            f"activation={net.activation}) does not match the configuration"
        )


def _sibling(ckpt: Path, name: str) -> Path:
    other = ckpt.parent / name
    if not other.exists():
        raise ConfigError(f"expected companion checkpoint {other}")
    return other


def _write_control_errors(out, cfg, ckpt, grid, slices, exact_fn):
    control_net = load_checkpoint(_sibling(ckpt, "control.ckpt"))
    _check_net_matches(cfg["control_net"], control_net, "control_net")
    from .network import forward_values

    rows = []
    for tv in slices:
        approx = forward_values(control_net, np.full(grid.size, tv), grid[:, None])
        exact = exact_fn(tv, grid)
        rows.extend(_error_rows(np.full(grid.size, tv), grid, approx, exact))
    _write_csv(out / "control_errors.csv",
               ["t", "x", "approx", "exact", "abs_err", "rel_err"], rows)


def _write_american_boundary(out, ev, p, net, fd_times, fd_x, fd_surface,
                             fd_boundary):
    from .network import forward_values

    euro = bs_put(p)
    payoff = np.maximum(p.strike - fd_x, 0.0)
    n_times = int(ev["boundary_times"])
    tol = float(ev["boundary_tol"])
    rows = []
    for tv in np.linspace(0.0, p.maturity, n_times):
        values = forward_values(net, np.full(fd_x.size, tv), fd_x[:, None])
        bd = implied_exercise_boundary(values, euro(tv, fd_x), payoff, fd_x, tol)
        k = int(round(tv / p.maturity * (len(fd_times) - 1)))
        rows.append([_fmt(tv), _fmt(bd), _fmt(fd_boundary[k])])
    _write_csv(out / "exercise_boundary.csv",
               ["t", "dgm_boundary", "fd_boundary"], rows)


def _evaluate_sysrisk(cfg, ckpt, out, grid, slices) -> int:
    from .network import forward_values
    from .problems import SysRiskParams

    p = SysRiskParams(**cfg["market"])
    sol = sysrisk_solution(p)
    nets = [load_checkpoint(ckpt)]
    for i in range(2, p.n_players + 1):
        nets.append(load_checkpoint(_sibling(Path(ckpt), f"value{i}.ckpt")))
    ev = cfg["evaluation"]
    x2 = float(ev["x2_fixed"])
    rows = []
    for x3 in [float(v) for v in ev["x3_values"]]:
        for tv in slices:
            states = np.column_stack(
                [grid, np.full(grid.size, x2), np.full(grid.size, x3)]
            )
            for i, net in enumerate(nets):
                approx = forward_values(net, np.full(grid.size, tv), states)
                exact = sol.value[i](tv, states)
                for k in range(grid.size):
                    abs_err = abs(approx[k] - exact[k])
                    rel = _fmt(abs_err / abs(exact[k])) if abs(exact[k]) >= 1e-8 else ""
                    rows.append([
                        _fmt(tv), _fmt(states[k, 0]), _fmt(states[k, 1]),
                        _fmt(states[k, 2]), str(i + 1),
                        _fmt(approx[k]), _fmt(exact[k]), _fmt(abs_err), rel,
                    ])
    _write_csv(out / "errors.csv",
               ["t", "x1", "x2", "x3", "player", "approx", "exact",
                "abs_err", "rel_err"], rows)
    return 0


def _evaluate_mfg(cfg, ckpt, out, grid, slices) -> int:
    from .network import forward_values
    from .problems import MfgParams

    p = MfgParams(**cfg["market"])
    ev = cfg["evaluation"]
    net_h = load_checkpoint(ckpt)
    net_u = load_checkpoint(_sibling(Path(ckpt), "density.ckpt"))
    _check_net_matches(cfg["density_net"], net_u, "density_net")
    ref = mfg_reference(p, n_q=int(ev["ref_n_q"]), n_t=int(ev["ref_n_t"]))

    rows = []
    approx_by, exact_by = {}, {}
    for tv in slices:
        approx = forward_values(net_h, np.full(grid.size, tv), grid[:, None])
        k = int(round(tv / p.maturity * (len(ref.times) - 1)))
        exact = np.interp(grid, ref.q, ref.h[k])
        approx_by[tv], exact_by[tv] = approx, exact
        rows.extend(_error_rows(np.full(grid.size, tv), grid, approx, exact))
    _write_csv(out / "errors.csv",
               ["t", "x", "approx", "exact", "abs_err", "rel_err"], rows)
    _surface_files(out, slices, grid, approx_by, exact_by)

    for tv in slices:
        dens = density_from_u(net_u, tv, grid)
        k = int(round(tv / p.maturity * (len(ref.times) - 1)))
        ref_d = np.interp(grid, ref.q, ref.mass[k])
        _write_csv(out / f"density_t{tv:g}.csv", ["x", "approx", "exact"],
                   [[_fmt(x), _fmt(a), _fmt(e)] for x, a, e in zip(grid, dens, ref_d)])

    n_inv = int(ev["inventory_times"])
    t_inv = np.linspace(0.0, p.maturity, n_inv)
    rows = []
    for tv in t_inv:
        dens = density_from_u(net_u, tv, grid)
        e_dgm = np.trapezoid(grid * dens, grid)
        e_ref = float(np.interp(tv, ref.times, ref.e_t))
        rows.append([_fmt(tv), _fmt(e_dgm), _fmt(e_ref),
                     _fmt(abs(e_dgm - e_ref))])
    _write_csv(out / "mean_inventory.csv",
               ["t", "approx", "exact", "abs_err"], rows)
    return 0


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def cmd_report(run_dir) -> int:
    run = Path(run_dir)
    errors_path = run / "errors.csv"
    losses_path = run / "losses.csv"
    if not errors_path.exists() or not losses_path.exists():
        raise ConfigError(f"{run}: missing errors.csv or losses.csv")
    lines = errors_path.read_text().strip().splitlines()
    header = lines[0].split(",")
    t_col = header.index("t")
    abs_col = header.index("abs_err")
    rel_col = header.index("rel_err")
    groups: dict[str, list] = {}
    for line in lines[1:]:
        parts = line.split(",")
        groups.setdefault(parts[t_col], []).append(parts)
    print(f"{'slice':<14s}{'n':<7s}{'max_abs':<13s}{'mean_abs':<13s}"
          f"{'max_rel':<13s}{'mean_rel':<13s}")
    for tval in sorted(groups, key=float):
        rows = groups[tval]
        abs_errs = np.array([float(r[abs_col]) for r in rows])
        rels = np.array([float(r[rel_col]) for r in rows if r[rel_col] != ""])
        max_rel = f"{rels.max():.6g}" if rels.size else "-"
        mean_rel = f"{rels.mean():.6g}" if rels.size else "-"
        print(f"{'t=' + format(float(tval), 'g'):<14s}{len(rows):<7d}"
              f"{abs_errs.max():<13.6g}{abs_errs.mean():<13.6g}"
              f"{max_rel:<13s}{mean_rel:<13s}")
    loss_lines = losses_path.read_text().strip().splitlines()
    if len(loss_lines) > 1:
        last = loss_lines[-1].split(",")
        print("final losses: " + "  ".join(
            f"{k}={v}" for k, v in zip(LOSS_COLUMNS, last)))
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dgmsolve",
        description="train and evaluate mesh-free PDE solvers",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    p_train = sub.add_parser("train", help="train a configured problem")
    p_train.add_argument("-c", "--config", required=True)
    p_train.add_argument("-o", "--out", default=None)
    p_eval = sub.add_parser("evaluate", help="evaluate a trained checkpoint")
    p_eval.add_argument("-c", "--config", required=True)
    p_eval.add_argument("-k", "--checkpoint", required=True)
    p_eval.add_argument("-o", "--out", default=None)
    p_rep = sub.add_parser("report", help="summarize a run directory")
    p_rep.add_argument("run_dir")
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return 2 if err.code not in (0, None) else 0
    try:
        if args.command == "train":
            return cmd_train(args.config, args.out)
        if args.command == "evaluate":
            return cmd_evaluate(args.config, args.checkpoint, args.out)
        return cmd_report(args.run_dir)
    except (ConfigError, InputError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
