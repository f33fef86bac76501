"""Human-readable key-value files for parameters, controllers and scenarios.

One format for all three: `key = value [tag]` lines, `#` comments, blank
lines ignored.  Dimensionful converter parameters carry an explicit `si` or
`pu` tag and are normalized onto the converter base when tagged `si`.
Controller files either name a preset plus its tuning or spell out the 3x5
element grid; scenario files give duration/dt, optional set-point overrides
and `event` lines.  Writers and parsers round-trip exactly.
"""

from __future__ import annotations

import re

from . import controllers as _ctl
from . import plant as _plant
from . import simkit as _sim
from .controllers import Element, GainVector, PhiSpec
from .plant import BaseValues, ConverterParams, Disturbance, Setpoints
from .simkit import Event, Scenario


class ConfigError(Exception):
    pass


def _read_pairs(path):
    """[(lineno, key, value-string)] with comments stripped."""
    pairs = []
    try:
        with open(path) as fh:
            for lineno, raw in enumerate(fh, 1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
                key, val = line.split("=", 1)
                pairs.append((lineno, key.strip(), val.strip()))
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    return pairs


def _split_tag(val, path, lineno):
    parts = val.split()
    if len(parts) == 1:
        return float(parts[0]), None
    if len(parts) == 2 and parts[1] in ("si", "pu"):
        return float(parts[0]), parts[1]
    raise ConfigError(f"{path}:{lineno}: expected '<number> [si|pu]', got {val!r}")


# ---------------------------------------------------------------------------
# converter parameters
# ---------------------------------------------------------------------------

PARAM_KEYS = ("omega_n", "Sn", "Vn", "Vdc_base", "omega_g", "Vg",
              "Lg", "Rg", "Cf", "Lf", "Rf", "Cdc", "Dp", "Dq",
              "Pref", "Qref", "Vref", "Vdcref")

_BASE_KEYS = ("omega_n", "Sn", "Vn", "Vdc_base")
_PU_ONLY = ("Dp", "Dq", "Pref", "Qref", "Vref")


def load_params(path):
    """Parse a parameter file into (ConverterParams, Setpoints, Disturbance).

    `si`-tagged circuit values are normalized on the base defined by Sn, Vn
    and Vdc_base; a nonzero Rf entry opts the filter resistance into the
    model.  Entries default to the reference nameplate when omitted.
    """
    raw = {}
    for lineno, key, val in _read_pairs(path):
        if key not in PARAM_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown parameter {key!r}")
        raw[key] = (_split_tag(val, path, lineno), lineno)

    defaults_si = _plant.default_si_params()
    base_def = _plant.default_base()

    def take(key, default, si_to_pu=None, pu_only=False):
        if key not in raw:
            return default
        (value, tag), lineno = raw[key]
        if tag == "si":
            if pu_only or si_to_pu is None:
                raise ConfigError(f"{path}:{lineno}: {key} must be 'pu'")
            return si_to_pu(value)
        return value

    omega_n = take("omega_n", defaults_si.omega_n, si_to_pu=lambda v: v)
    Sn = take("Sn", base_def.Sn, si_to_pu=lambda v: v)
    Vn = take("Vn", base_def.Vn, si_to_pu=lambda v: v)
    Vdc_base = take("Vdc_base", base_def.Vdc_base, si_to_pu=lambda v: v)
    base = BaseValues(Sn=Sn, Vn=Vn, Vdc_base=Vdc_base)
    Zb, Zdc = base.Zb, base.Zdc

    params = ConverterParams(
        omega_b=omega_n,
        Lf=take("Lf", omega_n * defaults_si.Lf / Zb, lambda v: omega_n * v / Zb),
        Cf=take("Cf", omega_n * defaults_si.Cf * Zb, lambda v: omega_n * v * Zb),
        Lg=take("Lg", omega_n * defaults_si.Lg / Zb, lambda v: omega_n * v / Zb),
        Rg=take("Rg", defaults_si.Rg / Zb, lambda v: v / Zb),
        Cdc=take("Cdc", omega_n * defaults_si.Cdc * Zdc, lambda v: omega_n * v * Zdc),
        Rf=take("Rf", defaults_si.Rf / Zb, lambda v: v / Zb),
        Dp=take("Dp", defaults_si.Dp, pu_only=True),
        Dq=take("Dq", defaults_si.Dq, pu_only=True),
        Vg=take("Vg", 1.0, lambda v: v / Vn),
        base=base,
    )
    wg = take("omega_g", 1.0, lambda v: v / omega_n)
    sp = _plant.default_setpoints(
        Pref=take("Pref", 0.5, pu_only=True),
        Qref=take("Qref", 0.0, pu_only=True),
        Vref=take("Vref", 1.0, pu_only=True),
        Vdcref=take("Vdcref", 1.0, lambda v: v / Vdc_base),
        omega_g=wg,
    )
    return params, sp, Disturbance(wg=wg, Vg=params.Vg)


def write_params_template(path):
    """Reference nameplate as a parameter file (edit and reload)."""
    si = _plant.default_si_params()
    base = _plant.default_base()
    lines = [
        "# converter parameter file: <key> = <value> <si|pu>",
        f"omega_n = {si.omega_n!r} si",
        f"Sn = {base.Sn!r} si",
        f"Vn = {base.Vn!r} si",
        f"Vdc_base = {base.Vdc_base!r} si",
        "omega_g = 1.0 pu",
        "Vg = 1.0 pu",
        f"Lg = {si.Lg!r} si",
        f"Rg = {si.Rg!r} si",
        f"Cf = {si.Cf!r} si",
        f"Lf = {si.Lf!r} si",
        f"Rf = {si.Rf!r} si   # set to 0 to drop the filter resistance",
        f"Cdc = {si.Cdc!r} si",
        f"Dp = {si.Dp!r} pu",
        f"Dq = {si.Dq!r} pu",
        "Pref = 0.5 pu",
        "Qref = 0.0 pu",
        "Vref = 1.0 pu",
        "Vdcref = 700.0 si",
    ]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


# ---------------------------------------------------------------------------
# controller files
# ---------------------------------------------------------------------------

_ELEMENT_RE = re.compile(
    r"^\s*(?P<kind>[A-Za-z]+)\s*\((?P<args>[^)]*)\)\s*"
    r"(?:\{\s*(?P<fkind>[A-Za-z]+)\s*\((?P<fargs>[^)]*)\)\s*\})?\s*$")


def _parse_kv_args(argstr, where):
    out = {}
    argstr = argstr.strip()
    if not argstr:
        return out
    for item in argstr.split(","):
        if "=" not in item:
            raise ConfigError(f"{where}: element arguments are 'name=value'")
        k, v = item.split("=", 1)
        k = k.strip()
        if k not in ("k", "T", "xi"):
            raise ConfigError(f"{where}: unknown element argument {k!r}")
        out[k] = float(v.strip())
    return out


def parse_element(text, where="element"):
    """Parse 'KIND(k=..,T=..,xi=..){KIND(..)}' (brace part optional)."""
    if text.strip() == "0":
        return _ctl.ZERO
    m = _ELEMENT_RE.match(text)
    if not m:
        raise ConfigError(f"{where}: cannot parse element {text!r}")
    fb = None
    if m.group("fkind"):
        fb = Element(m.group("fkind"), **_parse_kv_args(m.group("fargs"), where))
    return Element(m.group("kind"), feedback_only=fb,
                   **_parse_kv_args(m.group("args"), where))


def format_element(el: Element) -> str:
    if el.kind == "Zero":
        return "0"
    args = [f"k={el.k!r}"]
    if el.T is not None:
        args.append(f"T={el.T!r}")
    if el.xi is not None:
        args.append(f"xi={el.xi!r}")
    s = f"{el.kind}({', '.join(args)})"
    if el.feedback_only is not None:
        s += "{" + format_element(el.feedback_only) + "}"
    return s


def load_controller(path, params: ConverterParams) -> PhiSpec:
    """Controller spec file -> PhiSpec (preset form or explicit grid form)."""
    pairs = _read_pairs(path)
    keys = {k for _, k, _ in pairs}
    if "preset" in keys:
        name = None
        tuning = {}
        for lineno, key, val in pairs:
            if key == "preset":
                name = val.strip()
            elif key in ("Dp", "Dq"):
                raise ConfigError(f"{path}:{lineno}: droop slopes come from the "
                                  "parameter file, not the controller file")
            else:
                try:
                    tuning[key] = float(val)
                except ValueError as exc:
                    raise ConfigError(f"{path}:{lineno}: bad number {val!r}") from exc
        if name == "mimo-gfm" and tuning:
            missing = set(GainVector.FIELDS) - set(tuning)
            if missing:
                raise ConfigError(f"{path}: mimo-gfm needs all gains; missing "
                                  f"{sorted(missing)}")
            try:
                gains = GainVector(**tuning)
            except ValueError as exc:
                raise ConfigError(f"{path}: {exc}") from exc
            return _ctl.preset(name, params, {"gains": gains})
        try:
            return _ctl.preset(name, params, tuning or None)
        except (_ctl.ControllerError, ValueError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc

    grid = [[_ctl.ZERO] * 5 for _ in range(3)]
    for lineno, key, val in pairs:
        m = re.match(r"^phi_([123])_([12345])$", key)
        if not m:
            raise ConfigError(f"{path}:{lineno}: unknown controller key {key!r}")
        i, j = int(m.group(1)) - 1, int(m.group(2)) - 1
        grid[i][j] = parse_element(val, where=f"{path}:{lineno}")
    try:
        return PhiSpec(tuple(tuple(r) for r in grid), Dp=params.Dp, Dq=params.Dq,
                       name="custom")
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def write_controller(path, spec: PhiSpec = None, preset: str = None,
                     gains: GainVector = None, tuning: dict = None):
    """Serialize a controller to a spec file consumable by load_controller."""
    lines = ["# controller spec"]
    if preset is not None:
        lines.append(f"preset = {preset}")
        if gains is not None:
            for f in GainVector.FIELDS:
                lines.append(f"{f} = {float(getattr(gains, f))!r}")
        for k, v in (tuning or {}).items():
            lines.append(f"{k} = {float(v)!r}")
    elif spec is not None:
        for i in range(3):
            for j in range(5):
                el = spec.grid[i][j]
                if el.kind != "Zero":
                    lines.append(f"phi_{i + 1}_{j + 1} = {format_element(el)}")
    else:
        raise ValueError("write_controller needs a spec or a preset")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


# ---------------------------------------------------------------------------
# scenario files
# ---------------------------------------------------------------------------

def load_scenario(path, setpoints: Setpoints = None,
                  disturbance: Disturbance = None,
                  dt_override=None) -> Scenario:
    """Scenario file -> Scenario; initial conditions may override the params file."""
    sp = setpoints or _plant.default_setpoints()
    d = disturbance or Disturbance()
    duration = None
    dt = _sim.DEFAULT_DT
    overrides = {}
    events = []
    for lineno, key, val in _read_pairs(path):
        if key == "duration":
            duration = float(val)
        elif key == "dt":
            dt = float(val)
        elif key == "event":
            parts = val.split()
            if len(parts) != 3:
                raise ConfigError(f"{path}:{lineno}: event lines are "
                                  "'event = <time> <quantity> <value>'")
            try:
                events.append(Event(float(parts[0]), parts[1], float(parts[2])))
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: {exc}") from exc
        elif key in ("Pref", "Qref", "Vref", "Vdcref", "omega_g", "Vg"):
            overrides[key] = float(val.split()[0])
        else:
            raise ConfigError(f"{path}:{lineno}: unknown scenario key {key!r}")
    if duration is None:
        raise ConfigError(f"{path}: scenario needs a duration")
    if dt_override is not None:
        dt = dt_override
    if overrides:
        wg = overrides.get("omega_g", d.wg)
        sp = Setpoints(
            i0=overrides.get("Pref", sp.Pref), omega_0=wg, E0=sp.E0,
            Vdcref=overrides.get("Vdcref", sp.Vdcref),
            Pref=overrides.get("Pref", sp.Pref),
            omega_g_ref=wg,
            Qref=overrides.get("Qref", sp.Qref),
            Vref=overrides.get("Vref", sp.Vref))
        d = Disturbance(wg=wg, Vg=overrides.get("Vg", d.Vg))
    try:
        return Scenario(duration=duration, dt=dt, setpoints=sp, disturbance=d,
                        events=tuple(events), name=str(path))
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def write_scenario(path, scenario: Scenario):
    lines = ["# scenario", f"duration = {scenario.duration!r}",
             f"dt = {scenario.dt!r}",
             f"Pref = {scenario.setpoints.Pref!r}",
             f"Qref = {scenario.setpoints.Qref!r}",
             f"Vref = {scenario.setpoints.Vref!r}",
             f"Vdcref = {scenario.setpoints.Vdcref!r}",
             f"omega_g = {scenario.disturbance.wg!r}",
             f"Vg = {scenario.disturbance.Vg!r}"]
    for ev in scenario.events:
        lines.append(f"event = {ev.time!r} {ev.quantity} {ev.value!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return path
