#!/usr/bin/env python3
"""Benchmark the compiled RK4 kernel against the pure-Python fallback.

Runs the power-reference step scenario with the reference controller on both
backends, reports steps/second and the worst trajectory deviation between
them.  The pure backend run is shortened by default; pass --full to integrate
the whole scenario on both.
"""

import argparse
import time

import numpy as np

from gfmkit import controllers, plant, simkit


def run(backend, scenario, params, spec):
    t0 = time.perf_counter()
    res = simkit.simulate(params, spec, scenario, backend=backend)
    elapsed = time.perf_counter() - t0
    nsteps = len(res.t) - 1
    return res, nsteps, elapsed


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--full", action="store_true",
                    help="run the full 3 s scenario on the python backend too")
    ap.add_argument("--dt", type=float, default=2e-5)
    args = ap.parse_args()

    params = plant.default_params(include_filter_resistance=True)
    spec = controllers.preset("mimo-gfm", params)
    duration = 3.0 if args.full else 0.5
    scenario = simkit.pref_step(duration=duration, t_step=0.1, dt=args.dt)

    print(f"scenario: pref_step, duration={duration}s, dt={args.dt:g} "
          f"({int(duration / args.dt)} steps), controller=mimo-gfm")
    rows = {}
    for backend in ("compiled", "python"):
        try:
            res, nsteps, elapsed = run(backend, scenario, params, spec)
        except ImportError:
            print(f"{backend:9s}: unavailable")
            continue
        rows[backend] = res
        print(f"{backend:9s}: {elapsed:8.3f} s   {nsteps / elapsed:12.0f} steps/s")

    if len(rows) == 2:
        dev = max(np.abs(rows["compiled"].x - rows["python"].x).max(),
                  np.abs(rows["compiled"].u - rows["python"].u).max())
        print(f"max |compiled - python| over states/inputs: {dev:.3e}")


if __name__ == "__main__":
    main()
