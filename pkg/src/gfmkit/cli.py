"""Command-line front end: simulate | synthesize | compare | norm.

Every run writes a manifest.json echoing the resolved inputs, tool version,
seed and backend, so an artifact directory is sufficient to reproduce the
command.  Exit codes: 0 success, 1 configuration error, 2 numerical failure,
3 unstable-result status.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict

import numpy as np

from . import __version__, config, controllers, plant, simkit, synthesis
from .config import ConfigError
from .linsys import (LinSysError, feedback_interconnect, freq_response_batch,
                     select_io, series, spectral_abscissa)
from .plant import ConditioningError, ConvergenceError, PlantError
from .simkit import SimulationError

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERICAL = 2
EXIT_UNSTABLE = 3


def _load_inputs(args):
    """Resolve params/setpoints/disturbance from --params (or defaults)."""
    if getattr(args, "params", None):
        if not os.path.exists(args.params):
            raise ConfigError(f"params file not found: {args.params}")
        return config.load_params(args.params)
    # built-in nameplate (full Table values, filter resistance included)
    params = plant.default_params(include_filter_resistance=True)
    return params, plant.default_setpoints(), plant.Disturbance()


def _load_controller(args, params):
    ctl = getattr(args, "controller", None)
    pre = getattr(args, "preset", None)
    if bool(ctl) == bool(pre):
        raise ConfigError("exactly one of --controller/--preset is required")
    if ctl:
        if not os.path.exists(ctl):
            raise ConfigError(f"controller file not found: {ctl}")
        spec = config.load_controller(ctl, params)
        echo = {"file": ctl, "text": open(ctl).read()}
    else:
        spec = controllers.preset(pre, params)
        echo = {"preset": pre}
    return spec, echo


def _load_scenario(args, sp, d):
    name = getattr(args, "scenario", None) or "pref_step"
    dt = getattr(args, "dt", None)
    if os.path.exists(name):
        sc = config.load_scenario(name, setpoints=sp, disturbance=d,
                                  dt_override=dt)
        echo = {"file": name, "text": open(name).read()}
    elif name in simkit.SCENARIO_PRESETS:
        sc = simkit.SCENARIO_PRESETS[name]()
        if dt:
            sc = sc.with_dt(dt)
        echo = {"preset": name}
    else:
        raise ConfigError(f"scenario {name!r} is neither a file nor one of "
                          f"{sorted(simkit.SCENARIO_PRESETS)}")
    return sc, echo


def _scenario_dict(sc):
    return {"duration": sc.duration, "dt": sc.dt, "name": sc.name,
            "setpoints": asdict(sc.setpoints),
            "disturbance": asdict(sc.disturbance),
            "events": [[ev.time, ev.quantity, ev.value] for ev in sc.events]}


def _write_manifest(outdir, args, params, extra):
    manifest = {
        "tool": f"gfmkit {__version__}",
        "command": args.command,
        "argv": sys.argv[1:],
        "seed": getattr(args, "seed", None),
        "backend": simkit.backend_name(),
        "params": {**{k: v for k, v in asdict(params).items() if k != "base"},
                   "base": asdict(params.base)},
    }
    manifest.update(extra)
    path = os.path.join(outdir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    return path


def _write_metrics_csv(path, rows):
    cols = ["channel", "available", "steady_state", "step", "peak",
            "overshoot", "settling_time_2pct"]
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(cols) + "\n")
        for r in rows:
            d = r.as_dict()
            fh.write(",".join(_fmt(d[c]) for c in cols) + "\n")


def _fmt(v):
    if isinstance(v, float):
        return repr(float(v))
    return str(v)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    params, sp, d = _load_inputs(args)
    spec, ctl_echo = _load_controller(args, params)
    sc, sc_echo = _load_scenario(args, sp, d)
    os.makedirs(args.out, exist_ok=True)
    result = simkit.simulate(params, spec, sc)
    simkit.export_csv(result, os.path.join(args.out, "timeseries.csv"))
    rows = [result.metrics[ch] for ch in result.output_names
            if ch in result.metrics]
    _write_metrics_csv(os.path.join(args.out, "metrics.csv"), rows)
    _write_manifest(args.out, args, params,
                    {"controller": ctl_echo, "scenario": _scenario_dict(sc),
                     "scenario_source": sc_echo,
                     "diverged": result.diverged})
    if result.diverged:
        print(f"simulation diverged at t = {result.t[-1]:.6g} s "
              f"(artifacts in {args.out})", file=sys.stderr)
        return EXIT_NUMERICAL
    print(f"simulated {sc.name}: {len(result.t)} samples -> {args.out}")
    for r in rows:
        if r.available:
            print(f"  {r.channel}: steady={r.steady_state:.6g} "
                  f"overshoot={r.overshoot:.4g} "
                  f"settle2%={r.settling_time_2pct:.4g}s")
    return EXIT_OK


def cmd_synthesize(args) -> int:
    params, sp, d = _load_inputs(args)
    if args.controller:
        spec = config.load_controller(args.controller, params)
        if spec.name != "mimo-gfm":
            raise ConfigError("--controller for synthesize must be a mimo-gfm "
                              "gain file")
        K_init = _gains_from_spec(spec, params)
        init_echo = {"file": args.controller}
    else:
        K_init = controllers.initial_gains()
        init_echo = {"default": "initial_gains"}
    os.makedirs(args.out, exist_ok=True)
    prob = synthesis.build_problem(params, sp, d)
    opts = synthesis.SynthesisOptions(max_iters=args.max_iters,
                                      restarts=args.restarts, seed=args.seed)
    result = synthesis.synthesize(prob, K_init, opts)
    synthesis.write_report(result, prob, args.out)
    config.write_controller(os.path.join(args.out, "controller.gfc"),
                            preset="mimo-gfm", gains=result.K_opt)
    _write_manifest(args.out, args, params,
                    {"initial_gains": {f: getattr(K_init, f)
                                       for f in controllers.GainVector.FIELDS},
                     "initial_source": init_echo,
                     "options": asdict(opts),
                     "objective": result.gamma, "stable": result.stable})
    print(result.summary())
    print(f"report + optimized controller written to {args.out}")
    if not result.stable:
        return EXIT_NUMERICAL
    return EXIT_OK


def _gains_from_spec(spec, params):
    """Recover the gain vector from a mimo-gfm PhiSpec."""
    e11 = spec.element(0, 0)
    if e11.kind == "PI":
        kpdc, kidc = e11.k, e11.k / e11.T
    elif e11.kind == "I":
        kpdc, kidc = 0.0, e11.k / e11.T
    else:
        kpdc, kidc = e11.k, 0.0
    e22 = spec.element(1, 1)
    k22 = 1.0 / e22.T
    def pk(i, j):
        el = spec.element(i, j)
        return el.k if el.kind == "P" else 0.0
    e34 = spec.element(2, 3)
    k34 = (e34.k / e34.T) if e34.kind == "I" else 0.0
    return controllers.GainVector(
        kpdc=kpdc, kidc=kidc, k21=pk(1, 0), k31=pk(2, 0), k12=pk(0, 1),
        k22=k22, k32=pk(2, 1), k14=pk(0, 3), k15=pk(0, 4), k24=pk(1, 3),
        k34=k34)


def cmd_compare(args) -> int:
    params, sp, d = _load_inputs(args)
    specs, labels, echoes = [], [], []
    for pre in args.preset or []:
        specs.append(controllers.preset(pre, params))
        labels.append(pre)
        echoes.append({"preset": pre})
    for path in args.controller or []:
        if not os.path.exists(path):
            raise ConfigError(f"controller file not found: {path}")
        specs.append(config.load_controller(path, params))
        labels.append(os.path.splitext(os.path.basename(path))[0])
        echoes.append({"file": path})
    if len(specs) < 2:
        raise ConfigError("compare needs at least two controllers "
                          "(--preset/--controller, repeatable)")
    scenarios = []
    sc_echoes = []
    for name in args.scenario or ["pref_step"]:
        sub = argparse.Namespace(scenario=name, dt=args.dt)
        sc, sc_echo = _load_scenario(sub, sp, d)
        scenarios.append(sc)
        sc_echoes.append(sc_echo)
    os.makedirs(args.out, exist_ok=True)

    cols = ["controller", "scenario", "channel", "available", "steady_state",
            "step", "peak", "overshoot", "settling_time_2pct", "error"]
    cpath = os.path.join(args.out, "comparison.csv")
    n_failed = n_runs = 0
    with open(cpath, "w", newline="\n") as fh:
        fh.write(",".join(cols) + "\n")
        for sc in scenarios:
            sc_label = os.path.splitext(os.path.basename(str(sc.name)))[0]
            rows = simkit.compare(params, specs, sc, labels=labels)
            for row in rows:
                n_runs += 1
                if row["result"] is None:
                    n_failed += 1
                    fh.write(",".join([row["label"], sc_label, "", "False",
                                       "", "", "", "", "", row["error"]]) + "\n")
                    continue
                if row["result"].diverged:
                    n_failed += 1
                simkit.export_csv(
                    row["result"],
                    os.path.join(args.out,
                                 f"timeseries_{row['label']}_{sc_label}.csv"))
                for ch, m in row["metrics"].items():
                    dd = m.as_dict()
                    fh.write(",".join([row["label"], sc_label] +
                                      [_fmt(dd[c]) for c in cols[2:-1]] +
                                      [row["error"]]) + "\n")
    _write_manifest(args.out, args, params,
                    {"controllers": echoes, "labels": labels,
                     "scenarios": [_scenario_dict(sc) for sc in scenarios],
                     "scenario_sources": sc_echoes})
    print(f"compared {len(specs)} controllers on {len(scenarios)} "
          f"scenario(s) -> {cpath}")
    if n_failed == n_runs:
        print("all controllers failed", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_norm(args) -> int:
    params, sp, d = _load_inputs(args)
    spec, ctl_echo = _load_controller(args, params)
    os.makedirs(args.out, exist_ok=True)

    ctrl = controllers.realize_phi(spec)
    try:
        eq = plant.solve_equilibrium(params, sp, ctrl, d)
    except ConditioningError:
        # rank-deficient steady state (e.g. no frequency feedback at all):
        # fall back to a least-squares Newton step
        eq = plant.solve_equilibrium(params, sp, ctrl, d, on_singular="lstsq")
    lin = plant.linearize(params, eq.x0, eq.u0, d)
    cl = feedback_interconnect(lin, ctrl, synthesis.LOOP_WIRING)
    eigs = np.sort_complex(np.linalg.eigvals(cl.A))
    alpha = float(eigs.real.max())
    stable = alpha < 0.0

    prob = synthesis.SynthesisProblem(params=params, setpoints=sp,
                                      disturbance=d, plant_lin=lin,
                                      weights=synthesis.make_weights())
    zw = synthesis.closed_loop_zw(prob, spec)
    omegas = np.logspace(-4, 6, 4001)
    lines = []
    print(f"closed-loop spectral abscissa: {alpha:+.6g} "
          f"({'stable' if stable else 'UNSTABLE'})")
    table = []
    for name, (zi, wj) in prob.channels:
        Tij = select_io(zw, outputs=[zi], inputs=[wj])
        WT = series(Tij, prob.weights.by_name(name))
        mag_t = np.abs(freq_response_batch(Tij, omegas)[:, 0, 0])
        mag_wt = np.abs(freq_response_batch(WT, omegas)[:, 0, 0])
        if stable:
            from .linsys import hinf_norm
            n_t, n_wt = hinf_norm(Tij, tol=1e-5), hinf_norm(WT, tol=1e-5)
            print(f"  {name}: ||T|| = {n_t:.6g}   ||W T|| = {n_wt:.6g}")
            table.append((name, n_t, n_wt))
        lines.append((f"T_{name[3:]}", mag_t))
        lines.append((name, mag_wt))

    fpath = os.path.join(args.out, "freq_response.csv")
    with open(fpath, "w", newline="\n") as fh:
        fh.write("omega," + ",".join(nm for nm, _ in lines) + "\n")
        for i, w in enumerate(omegas):
            fh.write(repr(float(w)) + "," +
                     ",".join(repr(float(m[i])) for _, m in lines) + "\n")
    print("closed-loop eigenvalues:")
    for ev in eigs:
        print(f"  {ev.real:+.6g} {ev.imag:+.6g}j")
    _write_manifest(args.out, args, params,
                    {"controller": ctl_echo, "spectral_abscissa": alpha,
                     "stable": stable,
                     "channel_norms": {nm: {"T": t, "WT": wt}
                                       for nm, t, wt in table},
                     "eigenvalues": [[ev.real, ev.imag] for ev in eigs]})
    return EXIT_OK if stable else EXIT_UNSTABLE


# ---------------------------------------------------------------------------

def build_parser():
    ap = argparse.ArgumentParser(prog="gfmkit",
                                 description="grid-forming converter control "
                                             "design toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, scenario=False):
        p.add_argument("--params", help="parameter file (defaults to the "
                                        "built-in reference nameplate)")
        p.add_argument("--out", required=True, help="artifact directory")
        p.add_argument("--seed", type=int, default=0)
        if scenario:
            p.add_argument("--scenario", default="pref_step",
                           help="scenario file or preset "
                                f"{sorted(simkit.SCENARIO_PRESETS)}")
            p.add_argument("--dt", type=float, help="integration step override")

    ps = sub.add_parser("simulate", help="nonlinear closed-loop simulation")
    common(ps, scenario=True)
    ps.add_argument("--controller", help="controller spec file")
    ps.add_argument("--preset", help=f"controller preset "
                                     f"{list(controllers.PRESET_NAMES)}")
    ps.set_defaults(func=cmd_simulate)

    py = sub.add_parser("synthesize", help="structured H-infinity gain design")
    common(py)
    py.add_argument("--controller", help="initial gain file (mimo-gfm spec)")
    py.add_argument("--max-iters", type=int, default=2500,
                    help="objective evaluations per local search")
    py.add_argument("--restarts", type=int, default=0)
    py.set_defaults(func=cmd_synthesize)

    pc = sub.add_parser("compare", help="simulate several controllers")
    pc.add_argument("--params", help="parameter file")
    pc.add_argument("--out", required=True, help="artifact directory")
    pc.add_argument("--seed", type=int, default=0)
    pc.add_argument("--scenario", action="append",
                    help="scenario file or preset (repeatable)")
    pc.add_argument("--dt", type=float, help="integration step override")
    pc.add_argument("--preset", action="append",
                    help="controller preset (repeatable)")
    pc.add_argument("--controller", action="append",
                    help="controller spec file (repeatable)")
    pc.set_defaults(func=cmd_compare)

    pn = sub.add_parser("norm", help="weighted channel norms and eigenvalues")
    common(pn)
    pn.add_argument("--controller", help="controller spec file")
    pn.add_argument("--preset", help="controller preset")
    pn.set_defaults(func=cmd_norm)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    try:
        return args.func(args)
    except (ConfigError, controllers.ControllerError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PlantError, SimulationError, LinSysError,
            synthesis.SynthesisError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
