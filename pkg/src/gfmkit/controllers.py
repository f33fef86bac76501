"""Control transfer matrices for grid-forming converters.

A controller is a 3x5 grid of SISO elements mapping the five output errors
(vdc, p, wu, q, V against their references) to the three control corrections
(iu, wu, Eu).  The element vocabulary covers proportional, integral,
derivative, PI, PD, first-order-lag ("inertia factor") and second-order-lag
("oscillatory factor") blocks; an element may carry a nested sub-element that
filters only the measured-feedback channel, leaving the reference path
untouched.

Shipped presets: the classical droop pair (static and power-filtered), power
synchronization control, a virtual-synchronous-generator design, DC-voltage
matching control, and the fully coupled gain-vector design whose eleven free
gains are the subject of the synthesis module.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .linsys import StateSpaceModel, siso_tf
from .plant import ConverterParams

KINDS = ("Zero", "P", "I", "D", "PI", "PD", "IF", "O")

# derivative action is realized with a first-order pole N times above the
# derivative corner so every element stays proper
DERIV_BANDLIMIT_N = 100.0

REF_INPUT_NAMES = ("Vdcref", "Pref", "wref", "Qref", "Vref")
FB_INPUT_NAMES = ("vdc", "p", "wu", "q", "V")
CTRL_OUTPUT_NAMES = ("d_iu", "d_wu", "d_Eu")

PRESET_NAMES = ("droop-1", "droop-5", "psc-1", "vsg-2", "matching-1", "mimo-gfm")


class ControllerError(Exception):
    pass


class RealizationError(ControllerError):
    pass


@dataclass(frozen=True)
class Element:
    """One SISO cell of the control transfer matrix.

    kind/params follow the standard vocabulary:
        P: k          I: k/(Ts)        D: kTs (band-limited)
        PI: k(1+1/(Ts))   PD: k(1+Ts) (band-limited)
        IF: k/(Ts+1)      O: k/(T^2 s^2 + 2 T xi s + 1)
    ``feedback_only`` multiplies the measured-feedback path only.
    """

    kind: str
    k: float = 1.0
    T: float = None
    xi: float = None
    feedback_only: "Element" = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown element kind {self.kind!r}")
        if self.kind in ("I", "D", "PD", "IF", "O"):
            if self.T is None or not self.T > 0:
                raise ValueError(f"{self.kind} element requires T > 0, got {self.T}")
        elif self.kind == "PI":
            # the PI pole sits at the origin for either sign of T; negative T
            # encodes a negative proportional part next to a positive integral
            if self.T is None or self.T == 0:
                raise ValueError(f"PI element requires nonzero T, got {self.T}")
        if self.kind == "O":
            if self.xi is None or not self.xi > 0:
                raise ValueError(f"O element requires xi > 0, got {self.xi}")
        if self.feedback_only is not None and self.feedback_only.feedback_only is not None:
            raise ValueError("feedback-only elements do not nest")

    @property
    def is_zero(self):
        return self.kind == "Zero" or (self.kind != "Zero" and self.k == 0.0)

    @property
    def has_integrator(self):
        return self.kind in ("I", "PI")

    def dc_gain(self):
        """Steady-state gain; inf for integrating elements, 0 for derivative."""
        if self.is_zero:
            return 0.0
        if self.has_integrator:
            return math.inf
        if self.kind == "D":
            return 0.0
        return self.k  # P, PD, IF, O

    def tf(self):
        """(num, den) of the realized (proper) transfer function."""
        k, T, xi = self.k, self.T, self.xi
        if self.kind == "Zero":
            return [0.0], [1.0]
        if self.kind == "P":
            return [k], [1.0]
        if self.kind == "I":
            return [k], [T, 0.0]
        if self.kind == "D":
            return [k * T, 0.0], [T / DERIV_BANDLIMIT_N, 1.0]
        if self.kind == "PI":
            return [k * T, k], [T, 0.0]
        if self.kind == "PD":
            return [k * T, k], [T / DERIV_BANDLIMIT_N, 1.0]
        if self.kind == "IF":
            return [k], [T, 1.0]
        if self.kind == "O":
            return [k], [T * T, 2.0 * T * xi, 1.0]
        raise RealizationError(f"no realization for kind {self.kind!r}")

    def response(self, s):
        """Realized transfer function evaluated at complex s."""
        num, den = self.tf()
        return np.polyval(num, s) / np.polyval(den, s)

    @property
    def strictly_proper(self):
        num, den = self.tf()
        num = np.trim_zeros(np.atleast_1d(num), "f")
        return self.is_zero or len(num) < len(den)


ZERO = Element("Zero")


def make_element(kind, k=1.0, T=None, xi=None, feedback_only=None) -> Element:
    return Element(kind, k=k, T=T, xi=xi, feedback_only=feedback_only)


@dataclass(frozen=True)
class PhiSpec:
    """3x5 grid of elements plus the droop slopes referenced by tied entries."""

    grid: tuple
    Dp: float
    Dq: float
    name: str = "custom"

    def __post_init__(self):
        if len(self.grid) != 3 or any(len(row) != 5 for row in self.grid):
            raise ValueError("grid must be 3 rows x 5 columns")
        g23 = self.grid[1][2]
        if not (g23.is_zero or g23.strictly_proper):
            raise ValueError("the (2,3) cell must be strictly proper or Zero "
                             "(frequency self-loop must be well-posed)")

    def element(self, i, j) -> Element:
        return self.grid[i][j]

    def n_dynamic_states(self):
        return realize_phi(self).n_states


def _grid_from_dict(cells) -> tuple:
    grid = [[ZERO] * 5 for _ in range(3)]
    for (i, j), el in cells.items():
        grid[i][j] = el
    return tuple(tuple(row) for row in grid)


@dataclass(frozen=True)
class GainVector:
    """The eleven free gains of the coupled MIMO design.

    They occupy thirteen diagonal slots in the extracted static-gain form;
    k24 and k34 are each tied across two slots (the q and V columns).
    """

    kpdc: float
    kidc: float
    k21: float
    k31: float
    k12: float
    k22: float
    k32: float
    k14: float
    k15: float
    k24: float
    k34: float

    FIELDS = ("kpdc", "kidc", "k21", "k31", "k12", "k22", "k32",
              "k14", "k15", "k24", "k34")

    def __post_init__(self):
        if not self.k22 > 0:
            raise ValueError(f"k22 must be positive (stable frequency-lag pole), "
                             f"got {self.k22}")
        if self.kidc < 0:
            raise ValueError(f"kidc must be non-negative, got {self.kidc}")

    def to_array(self):
        return np.array([getattr(self, f) for f in self.FIELDS])

    @classmethod
    def from_array(cls, v):
        v = np.asarray(v, dtype=float)
        return cls(*(float(x) for x in v[:11]))

    def diag13(self):
        """The thirteen-slot diagonal with the two tied pairs expanded."""
        return np.array([self.kpdc, self.kidc, self.k21, self.k31, self.k12,
                         self.k22, self.k32, self.k14, self.k15,
                         self.k24, self.k24, self.k34, self.k34])


def initial_gains() -> GainVector:
    """Default (uncoupled, droop-like) starting gains for synthesis."""
    return GainVector(kpdc=90.0, kidc=400.0, k21=0.0, k31=0.0, k12=0.0,
                      k22=20.0, k32=0.0, k14=0.0, k15=0.0, k24=0.0, k34=1.0)


def reference_gains() -> GainVector:
    """Reference tuning of the coupled design (the shipped preset default)."""
    return GainVector(kpdc=120.224, kidc=265.6217, k21=-0.8382, k31=-4.8977,
                      k12=-0.0019, k22=1.7622, k32=0.0, k14=0.1673,
                      k15=-0.8274, k24=0.0, k34=1.0844)


def reference_sparse_vsg_tuning() -> dict:
    """Reference tuning of the sparse VSG design (the shipped preset default)."""
    pole = 5.9801          # frequency-lag pole, rad/s
    return {"kpdc": 90.0, "kidc": 400.0, "pole22": pole, "kq": 1.9048}


def gains_to_phi(K: GainVector, p: ConverterParams) -> PhiSpec:
    """Assemble the coupled 3x5 matrix from the eleven free gains.

    Row 1 is a PI DC-voltage regulator with static couplings; row 2 keeps the
    prescribed p-f droop slope through a first-order lag Dp*k22/(s+k22) with
    static q/V couplings tied by 1/Dq; row 3 carries the integral q-V droop
    pair, also tied by 1/Dq.  The frequency-reference column is zero.
    """

    def P(k):
        return Element("P", k=k) if k != 0.0 else ZERO

    def I(k):
        return Element("I", k=k, T=1.0) if k != 0.0 else ZERO

    if K.kidc > 0.0:
        phi11 = Element("PI", k=K.kpdc, T=K.kpdc / K.kidc) if K.kpdc != 0.0 \
            else Element("I", k=K.kidc, T=1.0)
    else:
        phi11 = P(K.kpdc)
    cells = {
        (0, 0): phi11,
        (0, 1): P(K.k12), (0, 3): P(K.k14), (0, 4): P(K.k15),
        (1, 0): P(K.k21),
        (1, 1): Element("IF", k=p.Dp, T=1.0 / K.k22),
        (1, 3): P(K.k24), (1, 4): P(K.k24 / p.Dq),
        (2, 0): P(K.k31), (2, 1): P(K.k32),
        (2, 3): I(K.k34), (2, 4): I(K.k34 / p.Dq),
    }
    return PhiSpec(_grid_from_dict(cells), Dp=p.Dp, Dq=p.Dq, name="mimo-gfm")


# ---------------------------------------------------------------------------
# preset catalog
# ---------------------------------------------------------------------------

def _dc_pi(tuning):
    return Element("PI", k=tuning["kpdc"], T=tuning["kpdc"] / tuning["kidc"])


def _preset_droop1(p, t):
    cells = {
        (0, 0): _dc_pi(t),
        (1, 1): Element("P", k=p.Dp),
        (2, 3): Element("P", k=p.Dq),
    }
    return cells


def _preset_droop5(p, t):
    # power-filtered droop: static Dp on Pref, Dp/(T_lpf s + 1) on measured p.
    # The q/V rows reuse the integral law of the equivalent VSG design so the
    # two controllers share every feedback path (their responses to grid-side
    # disturbances coincide; only the reference channels differ).
    lpf = Element("IF", k=1.0, T=t["T_lpf"])
    cells = {
        (0, 0): _dc_pi(t),
        (1, 1): Element("P", k=p.Dp, feedback_only=lpf),
        (2, 3): Element("I", k=t["kq"], T=1.0),
        (2, 4): Element("I", k=t["kq"] / p.Dq, T=1.0),
    }
    return cells


def _preset_vsg2(p, t):
    cells = {
        (0, 0): _dc_pi(t),
        (1, 1): Element("IF", k=p.Dp, T=2.0 * t["H"] * p.Dp),
        (2, 3): Element("I", k=t["kq"], T=1.0),
        (2, 4): Element("I", k=t["kq"] / p.Dq, T=1.0),
    }
    return cells


def _preset_matching1(p, t):
    cells = {
        (0, 0): Element("P", k=t["ki"]),
        (1, 0): Element("P", k=t["kdc"]),
        (2, 4): Element("PI", k=t["kpv"], T=t["kpv"] / t["kiv"]),
    }
    return cells


def _preset_defaults(name, p: ConverterParams) -> dict:
    pole = reference_sparse_vsg_tuning()["pole22"]
    if name in ("droop-1", "psc-1"):
        return {"kpdc": 90.0, "kidc": 400.0}
    if name == "droop-5":
        return {"kpdc": 90.0, "kidc": 400.0, "T_lpf": 1.0 / pole,
                "kq": reference_sparse_vsg_tuning()["kq"]}
    if name == "vsg-2":
        t = reference_sparse_vsg_tuning()
        return {"kpdc": t["kpdc"], "kidc": t["kidc"],
                "H": 1.0 / (2.0 * p.Dp * t["pole22"]), "kq": t["kq"]}
    if name == "matching-1":
        return {"ki": 1.0 / p.Dp, "kdc": -1.0, "kpv": 0.5, "kiv": 10.0}
    if name == "mimo-gfm":
        return {"gains": reference_gains()}
    raise ControllerError(f"unknown preset {name!r}")


def preset(name: str, p: ConverterParams, tuning=None) -> PhiSpec:
    """Instantiate one of the cataloged controllers.

    ``tuning`` overrides the preset's named gains; unknown keys raise.  The
    power-filtered droop ("droop-5") accepts either the filter constant
    ``T_lpf`` directly or an inertia constant ``H`` (T_lpf = 2*H*Dp).
    """
    if name not in PRESET_NAMES:
        raise ControllerError(f"unknown preset {name!r}; choose from {PRESET_NAMES}")
    t = _preset_defaults(name, p)
    if tuning:
        extra = set(tuning) - set(t) - ({"H"} if name == "droop-5" else set())
        if extra:
            raise ControllerError(f"preset {name!r} does not take {sorted(extra)}")
        t.update(tuning)
        if name == "droop-5" and "H" in tuning:
            t["T_lpf"] = 2.0 * tuning["H"] * p.Dp
            t.pop("H", None)

    if name == "mimo-gfm":
        gains = t["gains"]
        if isinstance(gains, dict):
            gains = GainVector(**gains)
        spec = gains_to_phi(gains, p)
        return PhiSpec(spec.grid, Dp=p.Dp, Dq=p.Dq, name=name)

    builders = {"droop-1": _preset_droop1, "psc-1": _preset_droop1,
                "droop-5": _preset_droop5, "vsg-2": _preset_vsg2,
                "matching-1": _preset_matching1}
    missing = [k for k, v in t.items() if v is None]
    if missing:
        raise ControllerError(f"preset {name!r}: missing tuning {missing}")
    return PhiSpec(_grid_from_dict(builders[name](p, t)),
                   Dp=p.Dp, Dq=p.Dq, name=name)


# ---------------------------------------------------------------------------
# realization
# ---------------------------------------------------------------------------

def _element_block(el: Element):
    """(A, B_ref, B_fb, C, D_ref, D_fb) of one cell, reference/feedback split.

    The reference path realizes the element itself; the feedback path gets
    the extra feedback-only filter (if any) and the loop minus sign.
    """
    Ae_sys = siso_tf(*el.tf())
    Ae, Be, Ce, De = Ae_sys.A, Ae_sys.B, Ae_sys.C, float(Ae_sys.D[0, 0])
    if el.feedback_only is None:
        return Ae, Be, -Be, Ce, De, -De
    F_sys = siso_tf(*el.feedback_only.tf())
    Af, Bf, Cf, Df = F_sys.A, F_sys.B, F_sys.C, float(F_sys.D[0, 0])
    nf, ne = Af.shape[0], Ae.shape[0]
    A = np.block([[Af, np.zeros((nf, ne))],
                  [-Be @ Cf, Ae]]) if nf + ne else np.zeros((0, 0))
    B_ref = np.vstack([np.zeros((nf, 1)), Be])
    B_fb = np.vstack([Bf, -Be * Df])
    C = np.hstack([-De * Cf, Ce])
    return A, B_ref, B_fb, C, De, -De * Df


def realize_phi(spec: PhiSpec) -> StateSpaceModel:
    """State-space realization of the control transfer matrix.

    Inputs are the five references followed by the five measured outputs
    (the controller internally forms reference minus measurement, with any
    feedback-only sub-elements acting on the measurement path alone); outputs
    are the three control corrections.  Pure-integral cells within one output
    row share a single state, which realizes each SISO path exactly while
    keeping the combined q/V integral action as the single physical
    integrator it represents.
    """
    A_list = []
    n = 0
    D = np.zeros((3, 10))

    def add_states(A):
        nonlocal n
        k = A.shape[0]
        sl = slice(n, n + k)
        n += k
        A_list.append(A)
        return sl

    entries = []     # (slice, Bref (k,5), Bfb (k,5), out row, C (1,k))
    for i in range(3):
        # shared integrator for the pure-integral cells of this row
        int_cols = [j for j in range(5)
                    if spec.grid[i][j].kind == "I" and not spec.grid[i][j].is_zero
                    and spec.grid[i][j].feedback_only is None]
        if int_cols:
            sl = add_states(np.zeros((1, 1)))
            Br = np.zeros((1, 5))
            for j in int_cols:
                el = spec.grid[i][j]
                Br[0, j] = el.k / el.T
            entries.append((sl, Br, -Br, i, np.ones((1, 1))))
        for j in range(5):
            el = spec.grid[i][j]
            if el.is_zero or (j in int_cols):
                continue
            A, Bref, Bfb, C, Dref, Dfb = _element_block(el)
            if A.shape[0]:
                sl = add_states(A)
                Br = np.zeros((A.shape[0], 5))
                Bf = np.zeros((A.shape[0], 5))
                Br[:, [j]] = Bref
                Bf[:, [j]] = Bfb
                entries.append((sl, Br, Bf, i, C))
            D[i, j] += Dref
            D[i, 5 + j] += Dfb

    A = np.zeros((n, n))
    B = np.zeros((n, 10))
    C = np.zeros((3, n))
    for (sl, Br, Bf, i, Crow), Ablk in zip(entries, A_list):
        A[sl, sl] = Ablk
        B[sl, :5] = Br
        B[sl, 5:] = Bf
        C[i, sl] = Crow
    return StateSpaceModel(A, B, C, D,
                           input_names=REF_INPUT_NAMES + FB_INPUT_NAMES,
                           output_names=CTRL_OUTPUT_NAMES)
