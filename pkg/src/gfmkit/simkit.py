"""Nonlinear closed-loop time-domain simulation and response metrics.

Fixed-step classical RK4 on the combined converter + controller states,
started from a solved equilibrium.  Set-point/disturbance step events are
applied exactly at sample boundaries; the integration between events runs in
a compiled kernel when available (see backend_name()).  Also provides step
response metrics, multi-controller comparison and deterministic CSV export.
"""

from __future__ import annotations

import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import plant as _plant
from .controllers import PhiSpec, realize_phi
from .linsys import WellPosednessError
from .plant import (ConverterParams, Disturbance, Setpoints, default_setpoints,
                    solve_equilibrium)

if os.environ.get("GFMKIT_BACKEND", "").lower() in ("python", "py", "pure"):
    from . import _simcore_py as _kernel
    _COMPILED = False
else:
    try:
        from . import _simcore as _kernel    # type: ignore[attr-defined]
        _COMPILED = True
    except ImportError:
        from . import _simcore_py as _kernel
        _COMPILED = False


def backend_name() -> str:
    return "compiled" if _COMPILED else "python"


def kernel_for(name: str):
    """Explicit kernel lookup, used by the backend benchmark."""
    if name == "compiled":
        from . import _simcore
        return _simcore
    if name == "python":
        from . import _simcore_py
        return _simcore_py
    raise ValueError(f"unknown backend {name!r}")


EVENT_QUANTITIES = ("Pref", "Qref", "Vref", "Vdcref", "omega_g", "Vg")

STATE_LIMIT = 1e6
VDC_FLOOR = 1e-6
DEFAULT_DT = 2e-5    # the LC filter resonance sits near 800 Hz; keep dt well below


class SimulationError(Exception):
    pass


@dataclass(frozen=True)
class Event:
    time: float
    quantity: str
    value: float

    def __post_init__(self):
        if self.quantity not in EVENT_QUANTITIES:
            raise ValueError(f"unknown event quantity {self.quantity!r}; "
                             f"choose from {EVENT_QUANTITIES}")


@dataclass(frozen=True)
class Scenario:
    duration: float
    dt: float = DEFAULT_DT
    setpoints: Setpoints = field(default_factory=default_setpoints)
    disturbance: Disturbance = field(default_factory=Disturbance)
    events: tuple = ()
    name: str = "custom"

    def __post_init__(self):
        if self.dt <= 0 or self.duration <= 0:
            raise ValueError("duration and dt must be positive")
        times = [ev.time for ev in self.events]
        if times != sorted(times):
            raise ValueError("events must be time-ordered")
        if times and (times[0] < 0 or times[-1] > self.duration):
            raise ValueError("event times must lie within [0, duration]")

    def with_dt(self, dt) -> "Scenario":
        return replace(self, dt=dt)


def pref_step(pref_from=0.5, pref_to=1.0, t_step=1.0, duration=3.0,
              dt=DEFAULT_DT) -> Scenario:
    """Active-power reference step (default 0.5 -> 1.0 p.u. at t = 1 s)."""
    return Scenario(duration=duration, dt=dt,
                    setpoints=default_setpoints(Pref=pref_from),
                    events=(Event(t_step, "Pref", pref_to),),
                    name="pref_step")


def wg_step(wg_to=0.998, t_step=1.0, duration=5.0, dt=DEFAULT_DT) -> Scenario:
    """Grid-frequency step (default 1.0 -> 0.998 p.u., i.e. 50 -> 49.9 Hz)."""
    return Scenario(duration=duration, dt=dt,
                    setpoints=default_setpoints(Pref=0.5),
                    events=(Event(t_step, "omega_g", wg_to),),
                    name="wg_step")


SCENARIO_PRESETS = {"pref_step": pref_step, "wg_step": wg_step}


@dataclass
class SimResult:
    """Uniformly sampled closed-loop trajectories plus run metadata."""

    t: np.ndarray            # (N,)
    x: np.ndarray            # (N, 8) plant states
    xi: np.ndarray           # (N, nc) controller states
    y: np.ndarray            # (N, 5) outputs [vdc, p, wu, q, V]
    u: np.ndarray            # (N, 3) control inputs [iu, wu, Eu]
    scenario: Scenario
    controller: str
    diverged: bool = False
    truncated_at: int = None
    metrics: dict = field(default_factory=dict)

    @property
    def output_names(self):
        return _plant.OUTPUT_NAMES

    def channel(self, name) -> np.ndarray:
        names = list(_plant.OUTPUT_NAMES)
        if name in names:
            return self.y[:, names.index(name)]
        snames = list(_plant.STATE_NAMES)
        if name in snames:
            return self.x[:, snames.index(name)]
        unames = list(_plant.INPUT_NAMES)
        if name in unames:
            return self.u[:, unames.index(name)]
        raise KeyError(name)


def _controller_matrices(phi: PhiSpec):
    ctrl = realize_phi(phi)
    nc = ctrl.n_states
    # writable C-contiguous copies for the kernel (model arrays are frozen)
    Ac = np.array(ctrl.A, order="C")
    Br = np.array(ctrl.B[:, :5], order="C")
    By = np.array(ctrl.B[:, 5:], order="C")
    Cc = np.array(ctrl.C, order="C")
    Dr = np.array(ctrl.D[:, :5], order="C")
    Dy = np.array(ctrl.D[:, 5:], order="C")
    # the measured frequency equals the controller's own frequency output:
    # solving the instantaneous loop u = M (u0 + Cc xi + Dr r + Dy yhat)
    S = np.zeros((5, 3))
    S[2, 1] = 1.0
    L = np.eye(3) - Dy @ S
    svals = np.linalg.svd(L, compute_uv=False)
    if svals.min() < 1e-10 * max(1.0, svals.max()):
        raise WellPosednessError(
            "controller feeds the measured frequency through to its own "
            "frequency output; the instantaneous loop is singular")
    M = np.ascontiguousarray(np.linalg.inv(L))
    return ctrl, nc, Ac, Br, By, Cc, Dr, Dy, M


def _apply_event(ev: Event, yref, dist):
    wg, vg = dist
    if ev.quantity == "Vdcref":
        yref[0] = ev.value
    elif ev.quantity == "Pref":
        yref[1] = ev.value
    elif ev.quantity == "omega_g":
        wg = ev.value
        yref[2] = ev.value     # the frequency reference tracks the grid
    elif ev.quantity == "Qref":
        yref[3] = ev.value
    elif ev.quantity == "Vref":
        yref[4] = ev.value
    elif ev.quantity == "Vg":
        vg = ev.value
    return yref, (wg, vg)


def simulate(params: ConverterParams, phi: PhiSpec, scenario: Scenario,
             backend=None) -> SimResult:
    """Integrate the nonlinear closed loop through the scenario.

    The run starts at the solved equilibrium of the pre-event set-points.
    Returns a diverged (truncated) result instead of raising when the state
    leaves [-1e6, 1e6] or the DC voltage collapses.
    """
    kern = _kernel if backend is None else kernel_for(backend)
    ctrl, nc, Ac, Br, By, Cc, Dr, Dy, M = _controller_matrices(phi)

    eq = solve_equilibrium(params, scenario.setpoints, ctrl, scenario.disturbance)
    z0 = np.concatenate([eq.x0.as_array(), eq.xi0])

    dt = scenario.dt
    nsteps = int(round(scenario.duration / dt))
    ev_steps = []
    for ev in scenario.events:
        k = int(round(ev.time / dt))
        if abs(ev.time - k * dt) > 1e-9 * max(1.0, abs(ev.time)):
            warnings.warn(f"event at t={ev.time} snapped to the sample grid "
                          f"(t={k * dt})")
        ev_steps.append(min(max(k, 0), nsteps))

    Z = np.zeros((nsteps + 1, 8 + nc))
    U = np.zeros((nsteps + 1, 3))
    Z[0] = z0

    pp = np.array([params.omega_b, params.Lf, params.Cf, params.Lg,
                   params.Rg, params.Rf, params.Cdc])
    u0 = scenario.setpoints.u0_array()
    yref = scenario.setpoints.yref_array().copy()
    dist = (scenario.disturbance.wg, scenario.disturbance.Vg)

    # segment boundaries: start, each event step, end
    bounds = [0] + ev_steps + [nsteps]
    diverged = False
    pos = 0
    for seg in range(len(bounds) - 1):
        if seg > 0:
            yref, dist = _apply_event(scenario.events[seg - 1], yref, dist)
        start, end = bounds[seg], bounds[seg + 1]
        n_seg = end - start
        if n_seg < 0:
            raise SimulationError("events must be ordered within the duration")
        done = kern.rk4_segment(pp, Ac, Br, By, Cc, Dr, Dy, M, u0, yref,
                                dist[0], dist[1], dt, n_seg, start, Z, U)
        pos = start + done
        if done < n_seg:
            diverged = True
            break

    n_valid = pos + 1
    t = np.arange(n_valid) * dt
    Z, U = Z[:n_valid], U[:n_valid]
    x = Z[:, :8]
    xi = Z[:, 8:]
    y = np.empty((n_valid, 5))
    y[:, 0] = x[:, 7]
    y[:, 1] = x[:, 2] * x[:, 4] + x[:, 3] * x[:, 5]
    y[:, 2] = U[:, 1]
    y[:, 3] = -x[:, 2] * x[:, 5] + x[:, 3] * x[:, 4]
    y[:, 4] = np.sqrt(x[:, 2] * x[:, 2] + x[:, 3] * x[:, 3])

    result = SimResult(t=t, x=x, xi=xi, y=y, u=U, scenario=scenario,
                       controller=phi.name, diverged=diverged,
                       truncated_at=pos if diverged else None)
    if scenario.events and not diverged:
        t_ev = scenario.events[-1].time
        for ch in _plant.OUTPUT_NAMES:
            result.metrics[ch] = metrics(result, ch, window=(t_ev, scenario.duration))
    return result


# ---------------------------------------------------------------------------
# step-response metrics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MetricRecord:
    channel: str
    available: bool
    steady_state: float = math.nan
    step: float = math.nan
    peak: float = math.nan
    overshoot: float = math.nan
    settling_time_2pct: float = math.nan
    reason: str = ""

    def as_dict(self):
        return {"channel": self.channel, "available": self.available,
                "steady_state": self.steady_state, "step": self.step,
                "peak": self.peak, "overshoot": self.overshoot,
                "settling_time_2pct": self.settling_time_2pct}


def series_metrics(t, series, t0, channel="series") -> MetricRecord:
    """Step metrics of a sampled series whose step occurs at time t0.

    steady state: mean of the last 10% of the window; overshoot: fraction of
    the step by which the response exceeds the steady value in the step
    direction; settling time: last time outside the +/-2%-of-step band around
    the steady value, measured from t0.  Marked unavailable when the last 10%
    still drifts by more than 0.1% of the step.
    """
    t = np.asarray(t, float)
    series = np.asarray(series, float)
    sel = t >= t0 - 1e-15
    if not np.any(sel) or np.count_nonzero(sel) < 10:
        return MetricRecord(channel, False, reason="window too short")
    tw, yw = t[sel], series[sel]
    pre_idx = np.nonzero(t < t0 - 1e-15)[0]
    pre = series[pre_idx[-1]] if pre_idx.size else yw[0]

    ntail = max(1, int(0.1 * yw.size))
    tail = yw[-ntail:]
    steady = float(np.mean(tail))
    step = float(steady - pre)
    drift = float(np.max(tail) - np.min(tail))
    if drift > 1e-3 * abs(step):
        return MetricRecord(channel, False, steady_state=steady, step=step,
                            reason=f"no steady state (drift {drift:.3e})")

    if step == 0.0:
        peak = steady
        overshoot = 0.0
    else:
        sgn = 1.0 if step > 0 else -1.0
        peak = float(sgn * np.max(sgn * yw))
        overshoot = sgn * (peak - steady) / abs(step)
    band = 0.02 * abs(step)
    outside = np.nonzero(np.abs(yw - steady) > band)[0]
    settle = float(tw[outside[-1]] - t0) if outside.size else 0.0
    return MetricRecord(channel, True, steady_state=steady, step=step,
                        peak=peak, overshoot=overshoot,
                        settling_time_2pct=settle)


def metrics(result: SimResult, channel: str, window=None) -> MetricRecord:
    """Step metrics of one output channel over (t_step, t_end]."""
    if window is None:
        if not result.scenario.events:
            raise ValueError("no events in scenario; pass an explicit window")
        window = (result.scenario.events[-1].time, result.scenario.duration)
    t0, t1 = window
    if t0 < 0 or t1 > result.t[-1] + 1e-12:
        return MetricRecord(channel, False, reason="window outside simulated span")
    sel = result.t <= t1 + 1e-15
    return series_metrics(result.t[sel], result.channel(channel)[sel], t0,
                          channel=channel)


def compare(params: ConverterParams, specs, scenario: Scenario,
            labels=None, parallel=True):
    """Simulate several controllers through one scenario.

    Returns a list of rows, one per controller: label, SimResult and the
    per-output metric records (or the divergence marker).  Controllers run
    in parallel threads; the integration settings are identical across rows.
    """
    specs = list(specs)
    if labels is None:
        labels = [sp.name for sp in specs]

    def run(sp):
        try:
            return simulate(params, sp, scenario)
        except Exception as exc:   # per-row failure, reported not fatal
            return exc

    if parallel and len(specs) > 1:
        with ThreadPoolExecutor(max_workers=min(8, len(specs))) as ex:
            results = list(ex.map(run, specs))
    else:
        results = [run(sp) for sp in specs]

    rows = []
    for label, res in zip(labels, results):
        if isinstance(res, Exception):
            rows.append({"label": label, "result": None, "error": str(res),
                         "metrics": {}})
        else:
            rows.append({"label": label, "result": res,
                         "error": "diverged" if res.diverged else "",
                         "metrics": res.metrics})
    return rows


# ---------------------------------------------------------------------------
# CSV export
# ---------------------------------------------------------------------------

CSV_HEADER = "t,id,iq,vd,vq,iod,ioq,delta,vdc,p,wu,q,V,iu,Eu"


def export_csv(result: SimResult, path):
    """Write the trajectory as CSV, full double precision, byte-deterministic."""
    cols = [result.t] + [result.x[:, i] for i in range(8)] + \
           [result.y[:, 1], result.y[:, 2], result.y[:, 3], result.y[:, 4]] + \
           [result.u[:, 0], result.u[:, 2]]
    data = np.column_stack(cols)
    try:
        with open(path, "w", newline="\n") as fh:
            fh.write(CSV_HEADER + "\n")
            for row in data:
                fh.write(",".join(repr(float(v)) for v in row) + "\n")
    except OSError as exc:
        raise SimulationError(f"could not write {path}: {exc}") from exc
    return path


def read_csv(path):
    """Round-trip reader for export_csv output: (header list, float array)."""
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        data = np.loadtxt(fh, delimiter=",")
    return header, np.atleast_2d(data)
