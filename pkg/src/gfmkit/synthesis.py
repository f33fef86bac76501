"""Fixed-structure H-infinity gain design for the coupled controller.

The eleven free gains are tuned by minimizing the worst weighted closed-loop
channel norm

    max_ij  || W_ij(s) T_ij(s) ||_inf

where the T_ij are the responses from the exogenous pair (active-power
reference, grid frequency) to the four performance signals (power tracking
error, power, converter frequency, combined reactive/voltage deviation).
Unstable candidates are handled by a spectral-abscissa barrier so the
objective is total; the search itself is a multi-start Nelder-Mead simplex
with deterministic seeding.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict

import numpy as np
import scipy.optimize

from .controllers import GainVector, gains_to_phi, realize_phi
from .linsys import (StateSpaceModel, Wiring, block_diag, feedback_interconnect,
                     hinf_norm, hinf_norm_gridscan, mix_io, select_io, series,
                     siso_tf, spectral_abscissa)
from .plant import (ConverterParams, Disturbance, Setpoints, default_setpoints,
                    linearize, solve_plant_equilibrium)

# canonical plant/controller interconnection: control corrections sum onto
# the plant inputs, measured outputs drive the controller feedback channels
LOOP_WIRING = Wiring(
    ctrl_to_plant=(("d_iu", "iu"), ("d_wu", "wu"), ("d_Eu", "Eu")),
    plant_to_ctrl=(("vdc", "vdc"), ("p", "p"), ("wu", "wu"),
                   ("q", "q"), ("V", "V")),
)

BARRIER_SCALE = 1e6

CHANNEL_NAMES = ("W11T11", "W21T21", "W22T22", "W31T31", "W32T32", "W41T41")
# (z index, w index) per channel; w = [Pref, wg], z = [Pref-p, p, wu, q+V/Dq]
CHANNEL_INDEX = ((0, 0), (1, 0), (1, 1), (2, 0), (2, 1), (3, 0))


class SynthesisError(Exception):
    pass


@dataclass(frozen=True)
class WeightNumbers:
    """Corner/gain constants of the six weighting functions."""

    s11_1: float = 4.0
    s11_2: float = 0.0004
    T21_1: float = 1.447e-3
    T21_2: float = 1.447e-5
    kw22: float = 100.0
    T22_1: float = 1.447e-3
    T22_2: float = 1.447e-5
    kw31: float = 0.015
    T31_2: float = 1.447e-5
    T32_1: float = 1.447e-3
    T32_2: float = 1.447e-5
    s41_1: float = 60.0
    s41_2: float = 0.006

    def __post_init__(self):
        for name, val in asdict(self).items():
            if not val > 0:
                raise ValueError(f"weight number {name} must be positive, got {val}")


@dataclass(frozen=True)
class WeightSet:
    """The six SISO weighting filters, stable by construction.

    W11/W41 are low-frequency lead-lag weights (tight tracking of power and
    of the reactive/voltage law), W21/W22/W32 high-frequency lead weights
    (disturbance roll-off), W31 differentiates to penalize fast frequency
    movement.
    """

    W11: StateSpaceModel
    W21: StateSpaceModel
    W22: StateSpaceModel
    W31: StateSpaceModel
    W32: StateSpaceModel
    W41: StateSpaceModel
    numbers: WeightNumbers = field(default_factory=WeightNumbers)

    def by_name(self, name: str) -> StateSpaceModel:
        return getattr(self, name[:3])


def make_weights(numbers: WeightNumbers = None) -> WeightSet:
    n = numbers or WeightNumbers()
    lead = siso_tf([n.T21_1, 1.0], [n.T21_2, 1.0])
    return WeightSet(
        W11=siso_tf([1.0, n.s11_1], [1.0, n.s11_2]),
        W21=series(lead, lead),
        W22=siso_tf([n.T22_1 / n.kw22, 1.0 / n.kw22], [n.T22_2, 1.0]),
        W31=siso_tf([1.0 / n.kw31, 0.0], [n.T31_2, 1.0]),
        W32=siso_tf([n.T32_1, 1.0], [n.T32_2, 1.0]),
        W41=siso_tf([1.0, n.s41_1], [1.0, n.s41_2]),
        numbers=n,
    )


@dataclass(frozen=True)
class SynthesisProblem:
    """Frozen design data: linearized plant at the operating point + weights.

    The operating point is controller-independent (every admissible gain
    vector pins the same steady state), so the plant is linearized once.
    """

    params: ConverterParams
    setpoints: Setpoints
    disturbance: Disturbance
    plant_lin: StateSpaceModel
    weights: WeightSet

    @property
    def channels(self):
        return tuple(zip(CHANNEL_NAMES, CHANNEL_INDEX))


def build_problem(params: ConverterParams, setpoints: Setpoints = None,
                  disturbance: Disturbance = None,
                  weights: WeightSet = None) -> SynthesisProblem:
    sp = setpoints or default_setpoints()
    d = disturbance or Disturbance()
    x0, u0 = solve_plant_equilibrium(params, sp, d)
    lin = linearize(params, x0, u0, d)
    return SynthesisProblem(params=params, setpoints=sp, disturbance=d,
                            plant_lin=lin, weights=weights or make_weights())


def closed_loop_zw(problem: SynthesisProblem, phi_or_gains) -> StateSpaceModel:
    """Closed-loop model from w = [Pref, wg] to z = [Pref-p, p, wu, q+V/Dq].

    The grid frequency acts twice: as the physical disturbance and as the
    converter's frequency reference (the loop is meant to resynchronize).
    """
    spec = phi_or_gains
    if isinstance(spec, GainVector):
        spec = gains_to_phi(spec, problem.params)
    ctrl = realize_phi(spec)
    cl = feedback_interconnect(problem.plant_lin, ctrl, LOOP_WIRING)
    # cl inputs: [iu, wu, Eu, wg, Vg, Vdcref, Pref, wref, Qref, Vref]
    inames = list(cl.input_names)
    R = np.zeros((cl.n_inputs, 2))
    R[inames.index("Pref"), 0] = 1.0
    R[inames.index("wg"), 1] = 1.0
    R[inames.index("wref"), 1] = 1.0
    onames = list(cl.output_names)
    T = np.zeros((4, cl.n_outputs))
    T[0, onames.index("p")] = -1.0
    T[1, onames.index("p")] = 1.0
    T[2, onames.index("wu")] = 1.0
    T[3, onames.index("q")] = 1.0
    T[3, onames.index("V")] = 1.0 / problem.params.Dq
    N = np.zeros((4, 2))
    N[0, 0] = 1.0
    return mix_io(cl, out_map=T, in_map=R, out_feedthrough=N,
                  input_names=["Pref", "wg"],
                  output_names=["e_p", "p", "wu", "qV"])


def weighted_channels(problem: SynthesisProblem, gains) -> list:
    """The six weighted SISO channels W_ij * T_ij as state-space models."""
    zw = closed_loop_zw(problem, gains)
    out = []
    for name, (zi, wj) in problem.channels:
        Tij = select_io(zw, outputs=[zi], inputs=[wj])
        out.append(series(Tij, problem.weights.by_name(name)))
    return out


def closed_loop_abscissa(problem: SynthesisProblem, gains) -> float:
    spec = gains
    if isinstance(spec, GainVector):
        spec = gains_to_phi(spec, problem.params)
    ctrl = realize_phi(spec)
    cl = feedback_interconnect(problem.plant_lin, ctrl, LOOP_WIRING)
    return spectral_abscissa(cl.A)


def objective(problem: SynthesisProblem, gains, tol=1e-3,
              return_details=False):
    """Worst weighted channel norm, or a stability barrier when not Hurwitz.

    Total by design: an unstable candidate scores BARRIER_SCALE*(1 + alpha)
    where alpha is the spectral abscissa, which steers infeasible iterates
    back toward the stability boundary.
    """
    zw = closed_loop_zw(problem, gains)
    alpha = spectral_abscissa(zw.A)
    if not alpha < 0.0:
        val = BARRIER_SCALE * (1.0 + alpha)
        return (val, alpha, None) if return_details else val
    norms = []
    for name, (zi, wj) in problem.channels:
        chan = series(select_io(zw, outputs=[zi], inputs=[wj]),
                      problem.weights.by_name(name))
        norms.append(hinf_norm(chan, tol=tol))
    val = float(max(norms))
    return (val, alpha, norms) if return_details else val


@dataclass(frozen=True)
class SynthesisOptions:
    max_iters: int = 2000          # objective evaluations per local search
    restarts: int = 0              # additional perturbed starts
    tol: float = 1e-4              # simplex absolute f-tolerance
    norm_tol: float = 1e-3         # hinf bisection tolerance inside the search
    seed: int = 0
    perturb_rel: float = 0.25      # restart perturbation, relative to scale
    workers: int = 4


# typical magnitude of each gain; sets the initial simplex and restart spread
DEFAULT_SCALE = np.array([50.0, 200.0, 1.0, 2.0, 0.05, 5.0, 0.2,
                          0.5, 0.5, 0.5, 0.5])


@dataclass
class SynthesisResult:
    K_opt: GainVector
    gamma: float
    stable: bool
    history: list                   # (eval index, best objective, abscissa)
    per_channel: dict
    abscissa: float
    n_evals: int
    seed: int
    notes: list = field(default_factory=list)

    def summary(self):
        lines = [f"objective gamma = {self.gamma:.6g} "
                 f"(stable={self.stable}, max Re eig = {self.abscissa:.4g})"]
        for name, val in self.per_channel.items():
            lines.append(f"  {name}: {val:.6g}")
        return "\n".join(lines)


def _penalized(problem, vec, norm_tol):
    """(objective, abscissa) on a raw parameter vector; invalid gains barred."""
    k22, kidc = vec[5], vec[1]
    if k22 <= 0.0 or kidc < 0.0:
        bad = max(0.0, -k22) + max(0.0, -kidc)
        return BARRIER_SCALE * (10.0 + bad), math.inf
    K = GainVector.from_array(vec)
    val, alpha, _ = objective(problem, K, tol=norm_tol, return_details=True)
    return val, alpha


def _local_search(problem, v0, budget, opts, history, eval_offset=0):
    """Nelder-Mead descent from v0; returns (best vector, best value, evals)."""
    state = {"best": math.inf, "n": 0}

    def fun(vec):
        val, alpha = _penalized(problem, vec, opts.norm_tol)
        state["n"] += 1
        if val < state["best"]:
            state["best"] = val
            history.append((eval_offset + state["n"], val,
                            None if math.isinf(alpha) else alpha))
        return val

    simplex = np.empty((12, 11))
    simplex[0] = v0
    for i in range(11):
        step = 0.25 * DEFAULT_SCALE[i]
        if abs(v0[i]) > DEFAULT_SCALE[i]:
            step = 0.25 * abs(v0[i])
        simplex[i + 1] = v0
        simplex[i + 1, i] += step
    res = scipy.optimize.minimize(
        fun, v0, method="Nelder-Mead",
        options={"maxfev": budget, "xatol": 1e-8, "fatol": opts.tol,
                 "initial_simplex": simplex, "adaptive": True})
    return res.x, float(res.fun), state["n"]


def _stabilize(problem, v0, budget):
    """Pre-phase: minimize the spectral abscissa until strictly negative."""

    def alpha_of(vec):
        if vec[5] <= 0.0 or vec[1] < 0.0:
            return 1e3 + max(0.0, -vec[5]) + max(0.0, -vec[1])
        return closed_loop_abscissa(problem, GainVector.from_array(vec))

    res = scipy.optimize.minimize(
        alpha_of, v0, method="Nelder-Mead",
        options={"maxfev": budget, "fatol": 1e-6, "adaptive": True})
    if not alpha_of(res.x) < 0.0:
        raise SynthesisError(
            "stabilization pre-phase failed: no stabilizing gain vector found "
            f"(best abscissa {res.fun:.4g})")
    return res.x


def synthesize(problem: SynthesisProblem, K_init: GainVector = None,
               options: SynthesisOptions = None) -> SynthesisResult:
    """Minimize the worst weighted channel norm over the free gains.

    Deterministic for a given seed; restarts run from seeded perturbations of
    the initial point (in parallel threads) and the best local result wins.
    With max_iters=0 the initial gains are returned with their objective.
    """
    opts = options or SynthesisOptions()
    if K_init is None:
        from .controllers import initial_gains
        K_init = initial_gains()
    v0 = K_init.to_array()
    history = []

    f0, alpha0 = _penalized(problem, v0, opts.norm_tol)
    history.append((0, f0, None if math.isinf(alpha0) else alpha0))
    if f0 >= BARRIER_SCALE:
        v0 = _stabilize(problem, v0, max(200, opts.max_iters // 4))
        f0, alpha0 = _penalized(problem, v0, opts.norm_tol)

    candidates = [(v0.copy(), 0)]
    rng = np.random.default_rng(opts.seed)
    for r in range(opts.restarts):
        pert = rng.normal(0.0, opts.perturb_rel, size=11) * DEFAULT_SCALE
        vr = v0 + pert
        vr[5] = max(vr[5], 0.05)       # keep the frequency-lag pole stable
        vr[1] = max(vr[1], 0.0)
        candidates.append((vr, r + 1))

    results = []
    if opts.max_iters > 0:
        def run(arg):
            vec, idx = arg
            local_hist = []
            out = _local_search(problem, vec, opts.max_iters, opts, local_hist,
                                eval_offset=idx * opts.max_iters)
            return out, local_hist

        if len(candidates) > 1 and opts.workers > 1:
            with ThreadPoolExecutor(max_workers=min(opts.workers,
                                                    len(candidates))) as ex:
                outs = list(ex.map(run, candidates))
        else:
            outs = [run(c) for c in candidates]
        for (vec, val, n), hist in outs:
            results.append((val, vec, n))
            history.extend(hist)
    else:
        results.append((f0, v0, 0))

    results.sort(key=lambda t: t[0])
    best_val, best_vec, _ = results[0]
    if best_val > f0:               # descent contract: never worse than start
        best_val, best_vec = f0, v0
    n_evals = sum(r[2] for r in results)

    K_opt = GainVector.from_array(best_vec)
    gamma, alpha, norms = objective(problem, K_opt, tol=1e-5,
                                    return_details=True)
    per_channel = dict(zip(CHANNEL_NAMES, norms)) if norms else {}
    notes = []
    if per_channel.get("W41T41", math.inf) < 1.0:
        # reactive/voltage-law channel meets its weighted bound, i.e. the
        # response stays under the inverse low-frequency weight
        notes.append("W41T41 < 1: q-V droop deviation bounded by 1/|W41|")
    if gamma < 1.0:
        notes.append("objective below 1: weighted bounds met on all channels")
    result = SynthesisResult(K_opt=K_opt, gamma=float(gamma),
                             stable=bool(alpha < 0.0), history=history,
                             per_channel=per_channel, abscissa=float(alpha),
                             n_evals=n_evals, seed=opts.seed, notes=notes)
    return result


# ---------------------------------------------------------------------------
# report output
# ---------------------------------------------------------------------------

def write_report(result: SynthesisResult, problem: SynthesisProblem, outdir):
    """Machine-readable synthesis report + iteration history CSV.

    Writes report.json (gains, objective, per-channel norms, closed-loop
    eigenvalues) and history.csv (eval index, best objective, abscissa).
    """
    import os
    os.makedirs(outdir, exist_ok=True)
    ctrl = realize_phi(gains_to_phi(result.K_opt, problem.params))
    cl = feedback_interconnect(problem.plant_lin, ctrl, LOOP_WIRING)
    eig = np.sort_complex(np.linalg.eigvals(cl.A))
    report = {
        "gains": {f: getattr(result.K_opt, f) for f in GainVector.FIELDS},
        "objective": result.gamma,
        "stable": result.stable,
        "spectral_abscissa": result.abscissa,
        "per_channel_norms": result.per_channel,
        "closed_loop_eigenvalues": [[ev.real, ev.imag] for ev in eig],
        "n_evals": result.n_evals,
        "seed": result.seed,
        "notes": result.notes,
    }
    rpath = os.path.join(outdir, "report.json")
    with open(rpath, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    hpath = os.path.join(outdir, "history.csv")
    with open(hpath, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["eval", "best_objective", "spectral_abscissa"])
        for ev, val, alpha in result.history:
            w.writerow([ev, repr(float(val)),
                        "" if alpha is None else repr(float(alpha))])
    return rpath, hpath
