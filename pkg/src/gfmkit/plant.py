"""Nonlinear per-unit model of a grid-forming converter tied to a stiff grid.

The AC side is an LC-filtered voltage source behind a line impedance, written
in the converter's own rotating dq frame; the DC link is a capacitor fed by a
controlled current source.  All quantities are per-unit on the converter base
except time (seconds) and the angle delta (radians).  The module provides the
vector field, the measured outputs, per-unit conversion of nameplate values,
Newton equilibrium solving, and exact analytic linearization.

State ordering used throughout:  [id, iq, vd, vq, iod, ioq, delta, vdc]
Input ordering:                  [iu, wu, Eu]   (DC current, frequency, voltage)
Output ordering:                 [vdc, p, wu, q, V]
Disturbance ordering:            [wg, Vg]
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np


N_STATES = 8
STATE_NAMES = ("id", "iq", "vd", "vq", "iod", "ioq", "delta", "vdc")
INPUT_NAMES = ("iu", "wu", "Eu")
OUTPUT_NAMES = ("vdc", "p", "wu", "q", "V")
DISTURBANCE_NAMES = ("wg", "Vg")

VDC_MIN = 1e-6  # the DC equation divides by vdc


class PlantError(Exception):
    pass


class SingularityError(PlantError):
    pass


class ConvergenceError(PlantError):
    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class ConditioningError(PlantError):
    pass


@dataclass(frozen=True)
class BaseValues:
    """Converter base quantities: rated power, line-to-line RMS voltage, DC voltage."""

    Sn: float
    Vn: float
    Vdc_base: float

    def __post_init__(self):
        if min(self.Sn, self.Vn, self.Vdc_base) <= 0:
            raise ValueError("base values must be positive")

    @property
    def Zb(self):
        return self.Vn ** 2 / self.Sn

    @property
    def Zdc(self):
        return self.Vdc_base ** 2 / self.Sn


@dataclass(frozen=True)
class SIParams:
    """Nameplate circuit values in SI units plus the already-dimensionless entries."""

    omega_n: float          # nominal angular frequency, rad/s
    Lf: float               # filter inductance, H
    Cf: float               # filter capacitance, F
    Lg: float               # line inductance, H
    Rg: float               # line resistance, Ohm
    Cdc: float              # DC-link capacitance, F
    Rf: float = 0.0         # filter resistance, Ohm (kept out of the model unless opted in)
    Dp: float = 0.01        # p-f droop slope, p.u.
    Dq: float = 0.05        # q-V droop slope, p.u.
    Vg: float = 1.0         # grid voltage magnitude, p.u.


@dataclass(frozen=True)
class ConverterParams:
    """Per-unit electrical and droop parameters as consumed by the dynamics.

    Lf/Lg are per-unit reactances, Cf/Cdc per-unit susceptance-convention
    capacitances (the dynamics use wb/Lf, wb/Cf, ... directly).
    """

    omega_b: float
    Lf: float
    Cf: float
    Lg: float
    Rg: float
    Cdc: float
    Rf: float = 0.0
    Dp: float = 0.01
    Dq: float = 0.05
    Vg: float = 1.0
    base: BaseValues = BaseValues(1.0, 1.0, 1.0)

    def __post_init__(self):
        positives = {"omega_b": self.omega_b, "Lf": self.Lf, "Cf": self.Cf,
                     "Lg": self.Lg, "Cdc": self.Cdc, "Vg": self.Vg}
        for name, val in positives.items():
            if not val > 0:
                raise ValueError(f"{name} must be positive, got {val}")
        if self.Rg < 0 or self.Rf < 0:
            raise ValueError("resistances must be non-negative")
        for name, val in (("Dp", self.Dp), ("Dq", self.Dq)):
            if not 0 < val < 1:
                raise ValueError(f"{name} must lie in (0, 1), got {val}")


def per_unit_convert(si: SIParams, base: BaseValues,
                     include_filter_resistance=False) -> ConverterParams:
    """Normalize SI circuit values onto the converter base.

    Inductors map to per-unit reactance w_n*L/Zb, capacitors to the
    susceptance convention w_n*C*Zb, resistances to R/Zb; the DC capacitor is
    normalized on the DC base (Vdc_base, Sn).  The filter resistance is
    dropped (0) unless explicitly opted in.
    """
    if si.omega_n <= 0:
        raise ValueError("omega_n must be positive")
    Zb, Zdc = base.Zb, base.Zdc
    rf = si.Rf / Zb if include_filter_resistance else 0.0
    return ConverterParams(
        omega_b=si.omega_n,
        Lf=si.omega_n * si.Lf / Zb,
        Cf=si.omega_n * si.Cf * Zb,
        Lg=si.omega_n * si.Lg / Zb,
        Rg=si.Rg / Zb,
        Cdc=si.omega_n * si.Cdc * Zdc,
        Rf=rf,
        Dp=si.Dp, Dq=si.Dq, Vg=si.Vg,
        base=base,
    )


def to_si(p: ConverterParams) -> SIParams:
    """Inverse of per_unit_convert (exact round trip)."""
    Zb, Zdc = p.base.Zb, p.base.Zdc
    return SIParams(
        omega_n=p.omega_b,
        Lf=p.Lf * Zb / p.omega_b,
        Cf=p.Cf / (p.omega_b * Zb),
        Lg=p.Lg * Zb / p.omega_b,
        Rg=p.Rg * Zb,
        Cdc=p.Cdc / (p.omega_b * Zdc),
        Rf=p.Rf * Zb,
        Dp=p.Dp, Dq=p.Dq, Vg=p.Vg,
    )


def default_si_params() -> SIParams:
    """Nameplate values of the reference 4 kW / 380 V laboratory converter."""
    return SIParams(omega_n=100.0 * math.pi, Lf=2e-3, Cf=20e-6, Lg=2e-3,
                    Rg=0.06, Cdc=500e-6, Rf=0.06, Dp=0.01, Dq=0.05, Vg=1.0)


def default_base() -> BaseValues:
    return BaseValues(Sn=4000.0, Vn=380.0, Vdc_base=700.0)


def default_params(include_filter_resistance=False) -> ConverterParams:
    return per_unit_convert(default_si_params(), default_base(),
                            include_filter_resistance)


@dataclass(frozen=True)
class PlantState:
    id: float
    iq: float
    vd: float
    vq: float
    iod: float
    ioq: float
    delta: float
    vdc: float

    def __post_init__(self):
        if not self.vdc > 0:
            raise ValueError(f"vdc must be positive, got {self.vdc}")

    def as_array(self):
        return np.array([self.id, self.iq, self.vd, self.vq,
                         self.iod, self.ioq, self.delta, self.vdc])

    @classmethod
    def from_array(cls, x):
        x = np.asarray(x, dtype=float)
        return cls(*x[:8])

    def wrapped(self):
        """Angle wrapped into (-pi, pi]."""
        d = wrap_angle(self.delta)
        return replace(self, delta=d) if d != self.delta else self


@dataclass(frozen=True)
class ControlInput:
    iu: float
    wu: float
    Eu: float

    def as_array(self):
        return np.array([self.iu, self.wu, self.Eu])

    @classmethod
    def from_array(cls, u):
        u = np.asarray(u, dtype=float)
        return cls(*u[:3])


@dataclass(frozen=True)
class OutputVector:
    vdc: float
    p: float
    wu: float
    q: float
    V: float

    def as_array(self):
        return np.array([self.vdc, self.p, self.wu, self.q, self.V])


@dataclass(frozen=True)
class Disturbance:
    wg: float = 1.0
    Vg: float = 1.0

    def __post_init__(self):
        if self.wg <= 0 or self.Vg <= 0:
            raise ValueError("disturbance entries must be positive")


@dataclass(frozen=True)
class Setpoints:
    """Input set-points u0 = (i0, omega_0, E0) and output references Yref."""

    i0: float = 0.5
    omega_0: float = 1.0
    E0: float = 1.0
    Vdcref: float = 1.0
    Pref: float = 0.5
    omega_g_ref: float = 1.0
    Qref: float = 0.0
    Vref: float = 1.0

    def u0_array(self):
        return np.array([self.i0, self.omega_0, self.E0])

    def yref_array(self):
        return np.array([self.Vdcref, self.Pref, self.omega_g_ref,
                         self.Qref, self.Vref])


def default_setpoints(Pref=0.5, Qref=0.0, Vref=1.0, Vdcref=1.0,
                      omega_g=1.0) -> Setpoints:
    """Nominal operating references; i0 pre-dispatches the DC source at Pref."""
    return Setpoints(i0=Pref, omega_0=omega_g, E0=1.0, Vdcref=Vdcref,
                     Pref=Pref, omega_g_ref=omega_g, Qref=Qref, Vref=Vref)


def wrap_angle(delta: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    d = math.fmod(delta + math.pi, 2.0 * math.pi)
    if d <= 0.0:
        d += 2.0 * math.pi
    return d - math.pi


def f_dynamics_array(x, u, d, p: ConverterParams):
    """Vector field on raw arrays; states/inputs ordered as the module header."""
    id_, iq, vd, vq, iod, ioq, delta, vdc = x
    iu, wu, Eu = u
    wg, Vg = d
    if vdc < VDC_MIN:
        raise SingularityError(f"vdc = {vdc} below {VDC_MIN}; DC equation singular")
    wb = p.omega_b
    sd, cd = math.sin(delta), math.cos(delta)
    return np.array([
        wb / p.Lf * (Eu - vd) + wb * wu * iq - wb * p.Rf / p.Lf * id_,
        -wb / p.Lf * vq - wb * wu * id_ - wb * p.Rf / p.Lf * iq,
        wb / p.Cf * (id_ - iod) + wb * wu * vq,
        wb / p.Cf * (iq - ioq) - wb * wu * vd,
        wb / p.Lg * (vd - Vg * cd) - wb * p.Rg / p.Lg * iod + wb * wu * ioq,
        wb / p.Lg * (vq + Vg * sd) - wb * p.Rg / p.Lg * ioq - wb * wu * iod,
        wb * (wu - wg),
        wb / p.Cdc * (iu - Eu * id_ / vdc),
    ])


def f_dynamics(x: PlantState, u: ControlInput, d: Disturbance,
               p: ConverterParams) -> np.ndarray:
    """State derivative (PlantState ordering, per unit time in seconds)."""
    return f_dynamics_array(x.as_array(), u.as_array(),
                            np.array([d.wg, d.Vg]), p)


def g_outputs_array(x, u):
    id_, iq, vd, vq, iod, ioq, delta, vdc = x
    p_ = vd * iod + vq * ioq
    q_ = -vd * ioq + vq * iod
    V_ = math.sqrt(vd * vd + vq * vq)   # spelled exactly as the sim kernels
    return np.array([vdc, p_, u[1], q_, V_])


def g_outputs(x: PlantState, u: ControlInput) -> OutputVector:
    y = g_outputs_array(x.as_array(), u.as_array())
    return OutputVector(*y)


# ---------------------------------------------------------------------------
# analytic Jacobians
# ---------------------------------------------------------------------------

def jac_f(x, u, d, p: ConverterParams):
    """Jacobians (df/dx, df/du, df/dd) of the vector field at a point."""
    id_, iq, vd, vq, iod, ioq, delta, vdc = x
    iu, wu, Eu = u
    wg, Vg = d
    if vdc < VDC_MIN:
        raise SingularityError(f"vdc = {vdc} below {VDC_MIN}; DC equation singular")
    wb = p.omega_b
    sd, cd = math.sin(delta), math.cos(delta)

    fx = np.zeros((8, 8))
    fx[0, 0] = -wb * p.Rf / p.Lf
    fx[0, 1] = wb * wu
    fx[0, 2] = -wb / p.Lf
    fx[1, 0] = -wb * wu
    fx[1, 1] = -wb * p.Rf / p.Lf
    fx[1, 3] = -wb / p.Lf
    fx[2, 0] = wb / p.Cf
    fx[2, 3] = wb * wu
    fx[2, 4] = -wb / p.Cf
    fx[3, 1] = wb / p.Cf
    fx[3, 2] = -wb * wu
    fx[3, 5] = -wb / p.Cf
    fx[4, 2] = wb / p.Lg
    fx[4, 4] = -wb * p.Rg / p.Lg
    fx[4, 5] = wb * wu
    fx[4, 6] = wb * Vg * sd / p.Lg
    fx[5, 3] = wb / p.Lg
    fx[5, 4] = -wb * wu
    fx[5, 5] = -wb * p.Rg / p.Lg
    fx[5, 6] = wb * Vg * cd / p.Lg
    fx[7, 0] = -wb * Eu / (p.Cdc * vdc)
    fx[7, 7] = wb * Eu * id_ / (p.Cdc * vdc * vdc)

    fu = np.zeros((8, 3))
    fu[0, 1] = wb * iq
    fu[0, 2] = wb / p.Lf
    fu[1, 1] = -wb * id_
    fu[2, 1] = wb * vq
    fu[3, 1] = -wb * vd
    fu[4, 1] = wb * ioq
    fu[5, 1] = -wb * iod
    fu[6, 1] = wb
    fu[7, 0] = wb / p.Cdc
    fu[7, 2] = -wb * id_ / (p.Cdc * vdc)

    fd = np.zeros((8, 2))
    fd[4, 1] = -wb * cd / p.Lg
    fd[5, 1] = wb * sd / p.Lg
    fd[6, 0] = -wb
    return fx, fu, fd


def jac_g(x):
    """Jacobians (dy/dx, dy/du) of the output map at a state."""
    id_, iq, vd, vq, iod, ioq, delta, vdc = x
    gx = np.zeros((5, 8))
    gx[0, 7] = 1.0
    gx[1, 2] = iod
    gx[1, 3] = ioq
    gx[1, 4] = vd
    gx[1, 5] = vq
    gx[3, 2] = -ioq
    gx[3, 3] = iod
    gx[3, 4] = vq
    gx[3, 5] = -vd
    V_ = math.sqrt(vd * vd + vq * vq)
    if V_ > 0:
        gx[4, 2] = vd / V_
        gx[4, 3] = vq / V_
    gu = np.zeros((5, 3))
    gu[2, 1] = 1.0
    return gx, gu


def linearize(p: ConverterParams, x0, u0, d0):
    """Exact linearization at a regular point.

    Returns a StateSpaceModel with inputs (iu, wu, Eu, wg, Vg) and outputs
    (vdc, p, wu, q, V); B and D stack the control and disturbance columns.
    """
    from .linsys import StateSpaceModel

    x0 = x0.as_array() if isinstance(x0, PlantState) else np.asarray(x0, float)
    u0 = u0.as_array() if isinstance(u0, ControlInput) else np.asarray(u0, float)
    if isinstance(d0, Disturbance):
        d0 = np.array([d0.wg, d0.Vg])
    fx, fu, fd = jac_f(x0, u0, d0, p)
    gx, gu = jac_g(x0)
    B = np.hstack([fu, fd])
    D = np.hstack([gu, np.zeros((5, 2))])
    return StateSpaceModel(fx, B, gx, D,
                           input_names=INPUT_NAMES + DISTURBANCE_NAMES,
                           output_names=OUTPUT_NAMES,)


# ---------------------------------------------------------------------------
# equilibrium solving
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Equilibrium:
    x0: PlantState
    u0: ControlInput
    xi0: np.ndarray          # controller internal states
    residual: float
    iterations: int

    def y0(self) -> OutputVector:
        return g_outputs(self.x0, self.u0)


def default_state_guess(sp: Setpoints) -> np.ndarray:
    """Nominal-region starting point for Newton."""
    return np.array([sp.Pref, -sp.Qref, 1.0, 0.0, sp.Pref, -sp.Qref, 0.1, 1.0])


def _newton(residual_and_jac, v0, tol=1e-10, max_iter=100, on_singular="raise"):
    """Damped Newton iteration on a square nonlinear system."""
    v = np.asarray(v0, dtype=float).copy()
    res, J = residual_and_jac(v)
    best = float(np.linalg.norm(res, np.inf))
    for it in range(1, max_iter + 1):
        if best <= tol:
            return v, best, it - 1
        try:
            if on_singular == "lstsq":
                step = np.linalg.lstsq(J, -res, rcond=None)[0]
            else:
                cond = np.linalg.cond(J)
                if not np.isfinite(cond) or cond > 1e14:
                    raise ConditioningError(
                        f"equilibrium Jacobian is ill-conditioned (cond={cond:.2e})")
                step = np.linalg.solve(J, -res)
        except np.linalg.LinAlgError as exc:
            if on_singular == "lstsq":
                raise ConvergenceError("least-squares step failed") from exc
            raise ConditioningError("equilibrium Jacobian is singular") from exc
        # backtracking line search on the residual norm
        lam = 1.0
        for _ in range(60):
            v_try = v + lam * step
            try:
                res_try, J_try = residual_and_jac(v_try)
            except SingularityError:
                lam *= 0.5
                continue
            nrm = float(np.linalg.norm(res_try, np.inf))
            if nrm < best or nrm <= tol:
                v, res, J, best = v_try, res_try, J_try, nrm
                break
            lam *= 0.5
        else:
            raise ConvergenceError(
                f"Newton stalled at residual {best:.3e}", residual=best, iterations=it)
    if best <= tol:
        return v, best, max_iter
    raise ConvergenceError(
        f"Newton did not converge in {max_iter} iterations (residual {best:.3e})",
        residual=best, iterations=max_iter)


def solve_plant_equilibrium(p: ConverterParams, sp: Setpoints, d: Disturbance,
                            guess=None, tol=1e-10, max_iter=100):
    """Controller-independent operating point.

    Solves f(x, u, d) = 0 together with the steady-state conditions every
    integral-action design pins: p = Pref, vdc = Vdcref, and the combined
    reactive/voltage droop (Qref - q) + (Vref - V)/Dq = 0.  (The frequency
    condition wu = wg is the delta-row of f itself.)  Returns (x0, u0).
    """
    x_guess = np.asarray(guess, float) if guess is not None \
        else default_state_guess(sp)
    v0 = np.concatenate([x_guess, [sp.Pref, d.wg, 1.0]])
    darr = np.array([d.wg, d.Vg])

    def rj(v):
        x, u = v[:8], v[8:]
        f = f_dynamics_array(x, u, darr, p)
        y = g_outputs_array(x, u)
        res = np.concatenate([f, [
            y[1] - sp.Pref,
            x[7] - sp.Vdcref,
            (sp.Qref - y[3]) + (sp.Vref - y[4]) / p.Dq,
        ]])
        fx, fu, _ = jac_f(x, u, darr, p)
        gx, gu = jac_g(x)
        J = np.zeros((11, 11))
        J[:8, :8] = fx
        J[:8, 8:] = fu
        J[8, :8] = gx[1]
        J[8, 8:] = gu[1]
        J[9, 7] = 1.0
        J[10, :8] = -gx[3] - gx[4] / p.Dq
        J[10, 8:] = -gu[3] - gu[4] / p.Dq
        return res, J

    v, res, _ = _newton(rj, v0, tol=tol, max_iter=max_iter)
    x0 = PlantState.from_array(v[:8]).wrapped()
    return x0, ControlInput.from_array(v[8:])


def solve_equilibrium(p: ConverterParams, sp: Setpoints, ctrl, d: Disturbance,
                      guess=None, tol=1e-10, max_iter=100,
                      on_singular="raise") -> Equilibrium:
    """Operating point of the closed loop plant + realized controller.

    ``ctrl`` is the controller realization produced by
    controllers.realize_phi: inputs are the five references followed by the
    five measured outputs, outputs are the three control corrections added to
    the set-points.  Newton runs on the combined algebraic system
    (plant dynamics, controller dynamics, control consistency); the residual
    infinity-norm at the solution is at most ``tol``.
    """
    nc = ctrl.n_states
    Ac, Cc = ctrl.A, ctrl.C
    Br, By = ctrl.B[:, :5], ctrl.B[:, 5:]
    Dr, Dy = ctrl.D[:, :5], ctrl.D[:, 5:]
    yref = sp.yref_array()
    u0set = sp.u0_array()
    darr = np.array([d.wg, d.Vg])

    x_guess = np.asarray(guess, float) if guess is not None \
        else default_state_guess(sp)
    u_guess = np.array([sp.Pref, d.wg, 1.0])
    # controller states at their algebraic steady values for the guessed u
    if nc:
        rhs = u_guess - u0set - Dr @ yref - Dy @ g_outputs_array(x_guess, u_guess)
        xi_guess = np.linalg.lstsq(Cc, rhs, rcond=None)[0]
    else:
        xi_guess = np.zeros(0)
    v0 = np.concatenate([x_guess, xi_guess, u_guess])

    def rj(v):
        x, xi, u = v[:8], v[8:8 + nc], v[8 + nc:]
        f = f_dynamics_array(x, u, darr, p)
        y = g_outputs_array(x, u)
        res_xi = Ac @ xi + Br @ yref + By @ y if nc else np.zeros(0)
        res_u = u0set + (Cc @ xi if nc else 0.0) + Dr @ yref + Dy @ y - u
        res = np.concatenate([f, res_xi, res_u])
        fx, fu, _ = jac_f(x, u, darr, p)
        gx, gu = jac_g(x)
        n = 11 + nc
        J = np.zeros((n, n))
        J[:8, :8] = fx
        J[:8, 8 + nc:] = fu
        if nc:
            J[8:8 + nc, :8] = By @ gx
            J[8:8 + nc, 8:8 + nc] = Ac
            J[8:8 + nc, 8 + nc:] = By @ gu
            J[8 + nc:, 8:8 + nc] = Cc
        J[8 + nc:, :8] = Dy @ gx
        J[8 + nc:, 8 + nc:] = Dy @ gu - np.eye(3)
        return res, J

    v, res, it = _newton(rj, v0, tol=tol, max_iter=max_iter,
                         on_singular=on_singular)
    x0 = PlantState.from_array(v[:8]).wrapped()
    return Equilibrium(x0=x0, u0=ControlInput.from_array(v[8 + nc:]),
                       xi0=v[8:8 + nc].copy(), residual=res, iterations=it)
