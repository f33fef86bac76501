import math

import numpy as np
import pytest

from gfmkit import controllers, plant
from gfmkit.plant import (BaseValues, ControlInput, ConvergenceError,
                          Disturbance, PlantState, SIParams, Setpoints,
                          SingularityError, default_base, default_setpoints,
                          default_si_params, f_dynamics, f_dynamics_array,
                          g_outputs, jac_f, jac_g, linearize, per_unit_convert,
                          solve_equilibrium, solve_plant_equilibrium, to_si,
                          wrap_angle)


def test_base_impedance():
    base = default_base()
    assert base.Zb == pytest.approx(380.0 ** 2 / 4000.0)
    assert base.Zb == pytest.approx(36.1)


def test_line_reactance_per_unit():
    p = per_unit_convert(default_si_params(), default_base())
    assert p.Lg == pytest.approx(100.0 * math.pi * 0.002 / 36.1, rel=1e-12)
    assert p.Lg == pytest.approx(0.0174, abs=5e-5)


def test_per_unit_identity_passthrough():
    si = SIParams(omega_n=1.0, Lf=0.2, Cf=0.3, Lg=0.4, Rg=0.05, Cdc=19.0,
                  Rf=0.0, Dp=0.01, Dq=0.05)
    p = per_unit_convert(si, BaseValues(1.0, 1.0, 1.0))
    assert (p.Lf, p.Cf, p.Lg, p.Rg, p.Cdc) == (0.2, 0.3, 0.4, 0.05, 19.0)


def test_per_unit_round_trip():
    si = default_si_params()
    p = per_unit_convert(si, default_base(), include_filter_resistance=True)
    back = to_si(p)
    for f in ("omega_n", "Lf", "Cf", "Lg", "Rg", "Cdc", "Rf", "Dp", "Dq", "Vg"):
        assert getattr(back, f) == pytest.approx(getattr(si, f), rel=1e-12)


def test_rf_excluded_by_default():
    p = per_unit_convert(default_si_params(), default_base())
    assert p.Rf == 0.0
    p_rf = per_unit_convert(default_si_params(), default_base(),
                            include_filter_resistance=True)
    assert p_rf.Rf == pytest.approx(0.06 / 36.1)


def test_param_invariants():
    with pytest.raises(ValueError):
        per_unit_convert(default_si_params(), BaseValues(-1.0, 1.0, 1.0))
    kw = dict(omega_b=314.0, Lf=0.017, Cf=0.23, Lg=0.017, Rg=0.002, Cdc=19.0)
    with pytest.raises(ValueError):
        plant.ConverterParams(Dp=0.0, **kw)
    with pytest.raises(ValueError):
        plant.ConverterParams(Dp=1.5, **kw)


def test_dynamics_at_origin(params_bare):
    x = PlantState(0, 0, 0, 0, 0, 0, 0.0, 1.0)
    u = ControlInput(0.0, 0.0, 0.0)
    d = Disturbance(1.0, 1.0)
    dx = f_dynamics(x, u, d, params_bare)
    wb = params_bare.omega_b
    assert dx[4] == pytest.approx(-wb / params_bare.Lg)    # grid pulls iod
    assert dx[5] == 0.0                                     # sin(0) term
    assert dx[6] == pytest.approx(-wb)                      # wu=0, wg=1


def test_delta_rate_synchronized(params_bare):
    x = PlantState(0.1, 0.0, 1.0, 0.0, 0.1, 0.0, 0.2, 1.0)
    u = ControlInput(0.1, 1.0, 1.0)
    dx = f_dynamics(x, u, Disturbance(1.0, 1.0), params_bare)
    assert dx[6] == 0.0


def test_dynamics_vdc_singularity(params_bare):
    x = np.array([0, 0, 1, 0, 0, 0, 0, 1e-9])
    with pytest.raises(SingularityError):
        f_dynamics_array(x, np.zeros(3), np.ones(2), params_bare)


def test_outputs_simple_cases():
    u = ControlInput(0.0, 1.0, 1.0)
    y = g_outputs(PlantState(0, 0, 1.0, 0.0, 0.5, 0.0, 0.0, 1.0), u)
    assert (y.p, y.q, y.V) == (0.5, 0.0, 1.0)
    y = g_outputs(PlantState(0, 0, 0.8, 0.6, 0.0, 0.0, 0.0, 1.0), u)
    assert y.V == pytest.approx(1.0)
    y = g_outputs(PlantState(0, 0, 1.0, 0.0, 0.0, 0.2, 0.0, 1.0), u)
    assert y.q == pytest.approx(-0.2)
    assert y.wu == 1.0


def test_output_magnitude_property():
    rng = np.random.default_rng(8)
    u = np.array([0.0, 1.0, 1.0])
    for _ in range(1000):
        x = rng.uniform(-2.0, 2.0, size=8)
        x[7] = rng.uniform(0.5, 1.5)
        y = plant.g_outputs_array(x, u)
        assert y[4] == pytest.approx(math.sqrt(x[2] ** 2 + x[3] ** 2), abs=1e-15)


def test_wrap_angle():
    assert wrap_angle(math.pi) == pytest.approx(math.pi)
    assert wrap_angle(-math.pi) == pytest.approx(math.pi)
    assert wrap_angle(3 * math.pi / 2) == pytest.approx(-math.pi / 2)
    assert wrap_angle(0.3) == pytest.approx(0.3)


def test_plant_equilibrium_fixed_point(params, setpoints, disturbance):
    x0, u0 = solve_plant_equilibrium(params, setpoints, disturbance)
    res = f_dynamics(x0, u0, disturbance, params)
    assert np.abs(res).max() < 1e-9
    y0 = g_outputs(x0, u0)
    assert y0.p == pytest.approx(setpoints.Pref, abs=1e-10)
    assert u0.wu == pytest.approx(disturbance.wg, abs=1e-12)
    assert x0.vdc == pytest.approx(setpoints.Vdcref, abs=1e-10)
    qv = (setpoints.Qref - y0.q) + (setpoints.Vref - y0.V) / params.Dq
    assert abs(qv) < 1e-9


def test_equilibrium_power_flow_sanity(params, setpoints, disturbance):
    # lossless power-flow relation p ~ E*Vg*sin(delta)/X as an independent
    # cross-check of the solved angle; delta spans the internal voltage to
    # the grid, i.e. across both the filter and the line reactance
    x0, u0 = solve_plant_equilibrium(params, setpoints, disturbance)
    X = params.Lf + params.Lg
    delta_pf = math.asin(setpoints.Pref * X / (u0.Eu * params.Vg))
    assert x0.delta == pytest.approx(delta_pf, rel=0.10)


def test_equilibrium_with_each_preset(params_bare, setpoints, disturbance):
    # resistance-free model: every preset pins p exactly (the DC-dispatch
    # preset would otherwise be short by the filter loss)
    for name in controllers.PRESET_NAMES:
        ctrl = controllers.realize_phi(controllers.preset(name, params_bare))
        eq = solve_equilibrium(params_bare, setpoints, ctrl, disturbance)
        assert eq.residual <= 1e-10
        y0 = eq.y0()
        assert y0.p == pytest.approx(setpoints.Pref, abs=1e-8)
        assert y0.wu == pytest.approx(disturbance.wg, abs=1e-8)


def test_equilibrium_integrator_condition(params, setpoints, disturbance):
    ctrl = controllers.realize_phi(controllers.preset("vsg-2", params))
    eq = solve_equilibrium(params, setpoints, ctrl, disturbance)
    y0 = eq.y0()
    qv = (setpoints.Qref - y0.q) + (setpoints.Vref - y0.V) / params.Dq
    assert abs(qv) < 1e-10


def test_equilibrium_nonconvergence(params):
    # a frequency-blind static controller cannot synchronize to an off-nominal
    # grid frequency: there is no equilibrium and Newton must report it
    ctrl = controllers.realize_phi(controllers.PhiSpec(
        tuple(tuple(controllers.ZERO for _ in range(5)) for _ in range(3)),
        Dp=params.Dp, Dq=params.Dq))
    sp = default_setpoints()
    with pytest.raises((ConvergenceError, plant.ConditioningError)):
        solve_equilibrium(params, sp, ctrl, Disturbance(wg=0.99), max_iter=30)


def test_linearize_delta_row(params, setpoints, disturbance):
    x0, u0 = solve_plant_equilibrium(params, setpoints, disturbance)
    sys = linearize(params, x0, u0, disturbance)
    i_wu = list(sys.input_names).index("wu")
    i_wg = list(sys.input_names).index("wg")
    assert sys.B[6, i_wu] == pytest.approx(params.omega_b)
    assert sys.B[6, i_wg] == pytest.approx(-params.omega_b)
    assert np.all(sys.A[6] == 0.0)


def test_linearize_output_gradient(params_bare):
    gx, gu = jac_g(np.array([0, 0, 1.0, 0.0, 0, 0, 0, 1.0]))
    assert gx[4, 2] == 1.0 and gx[4, 3] == 0.0
    assert gu[2, 1] == 1.0


def test_linearize_matches_finite_differences(params):
    rng = np.random.default_rng(9)
    h = 1e-6
    for _ in range(5):
        x = rng.uniform(-0.5, 0.5, size=8)
        x[7] = rng.uniform(0.8, 1.2)
        u = np.array([rng.uniform(0, 1), rng.uniform(0.95, 1.05),
                      rng.uniform(0.9, 1.1)])
        d = np.array([1.0, 1.0])
        fx, fu, fd = jac_f(x, u, d, params)
        gx, gu = jac_g(x)

        def check(col_analytic, plus, minus):
            fdcol = (plus - minus) / (2 * h)
            denom = np.maximum(np.abs(col_analytic), 1.0)
            assert np.abs(fdcol - col_analytic).max() <= 1e-5 * denom.max()

        for j in range(8):
            e = np.zeros(8)
            e[j] = h
            check(fx[:, j], f_dynamics_array(x + e, u, d, params),
                  f_dynamics_array(x - e, u, d, params))
            check(gx[:, j], plant.g_outputs_array(x + e, u),
                  plant.g_outputs_array(x - e, u))
        for j in range(3):
            e = np.zeros(3)
            e[j] = h
            check(fu[:, j], f_dynamics_array(x, u + e, d, params),
                  f_dynamics_array(x, u - e, d, params))
        for j in range(2):
            e = np.zeros(2)
            e[j] = h
            check(fd[:, j], f_dynamics_array(x, u, d + e, params),
                  f_dynamics_array(x, u, d - e, params))


def test_state_invariants():
    with pytest.raises(ValueError):
        PlantState(0, 0, 0, 0, 0, 0, 0.0, -1.0)
    with pytest.raises(ValueError):
        Disturbance(wg=-1.0)
    sp = Setpoints()
    assert sp.u0_array().shape == (3,)
    assert sp.yref_array().shape == (5,)
