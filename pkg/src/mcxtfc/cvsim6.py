"""Six-compartment lumped-parameter circulation model.

State ordering everywhere in this package is ``(P_l, P_a, P_v, P_r, P_pa, P_pv)``.
Pressures are in mmHg, flows in mL/s, volumes in mL; capacitances are
mL/Barye and resistances Barye*s/mL, so pressure differences are converted
with :data:`MMHG_TO_BARYE` before Ohm's law is applied.
"""

from __future__ import annotations

import csv
import math
import enum
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from scipy.integrate import solve_ivp

MMHG_TO_BARYE = 1333.22
LMIN_PER_MLS = 60.0 / 1000.0

PRESSURES = ("P_l", "P_a", "P_v", "P_r", "P_pa", "P_pv")
FLOWS = ("Q_l_in", "Q_l_out", "Q_a", "Q_r_in", "Q_r_out", "Q_pv")
VOLUMES = ("V_l", "V_a", "V_v", "V_r", "V_pa", "V_pv")
L, A, V, R, PA, PV = range(6)

DEFAULT_INITIAL = (5.0, 80.0, 5.0, 5.0, 15.0, 5.0)
WAVEFORMS = ("elastance", "raised_cosine")


class StiffnessError(RuntimeError):
    def __init__(self, t: float, message: str = ""):
        super().__init__(f"integration failed at t={t:.6g} s: {message}")
        self.t = t


class NumericalError(RuntimeError):
    pass


@dataclass(frozen=True)
class CvSimParams:
    hr: float = 72.0
    p_th: float = -4.0
    r_sys: float = 0.33
    c_l_dia: float = 7.50e-3
    c_l_sys: float = 3.00e-4
    c_a: float = 1.20e-3
    c_v: float = 7.50e-2
    c_r_dia: float = 1.50e-2
    c_r_sys: float = 9.00e-4
    c_pa: float = 3.23e-3
    c_pv: float = 6.30e-3
    r_l_in: float = 13.33
    r_l_out: float = 8.00
    r_a: float = 1333.22
    r_r_in: float = 66.66
    r_r_out: float = 4.00
    r_pv: float = 106.66
    v0_l: float = 15.0
    v0_a: float = 715.0
    v0_v: float = 2500.0
    v0_r: float = 15.0
    v0_pa: float = 90.0
    v0_pv: float = 490.0
    waveform: str = "elastance"

    def __post_init__(self):
        if self.waveform not in WAVEFORMS:
            raise ValueError(f"unknown ventricular waveform {self.waveform!r}")
        positive = [f.name for f in fields(self)
                    if f.name.startswith(("c_", "r_l", "r_a", "r_r", "r_pv"))]
        bad = [n for n in positive if not getattr(self, n) > 0]
        if bad or not self.hr > 0 or not 0 < self.r_sys < 1:
            raise ValueError(f"invalid CVSim-6 parameters: {bad or 'hr/r_sys'}")
        if not (self.c_l_sys < self.c_l_dia and self.c_r_sys < self.c_r_dia):
            raise ValueError("systolic capacitance must be below diastolic capacitance")

    @classmethod
    def default(cls) -> "CvSimParams":
        return cls()

    @property
    def period(self) -> float:
        return 60.0 / self.hr

    @property
    def t_systole(self) -> float:
        return self.r_sys * self.period

    def with_overrides(self, **kw) -> "CvSimParams":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return asdict(self)


class PulmVariant(str, enum.Enum):
    LINEAR = "linear"
    NONLINEAR = "nonlinear"


DEFAULT_PULM_POINTS = ((0.12, 13.0), (5.8, 104.9), (19.8, 327.8))


@dataclass(frozen=True)
class PulmResistanceModel:
    """Pulmonary venous resistance law.

    ``points`` are ``(flow in L/min, resistance in Barye*s/mL)`` pairs used by
    the nonlinear variant; outside the table the end resistances are held.
    """

    variant: PulmVariant = PulmVariant.LINEAR
    r_pv: float | None = None
    points: tuple[tuple[float, float], ...] = DEFAULT_PULM_POINTS

    def __post_init__(self):
        object.__setattr__(self, "variant", PulmVariant(self.variant))
        q = [p[0] for p in self.points]
        if any(b <= a for a, b in zip(q, q[1:])):
            raise ValueError("resistance table flows must be strictly increasing")
        if any(p[1] <= 0 for p in self.points):
            raise ValueError("resistances must be positive")

    @classmethod
    def linear(cls, r_pv: float | None = None) -> "PulmResistanceModel":
        return cls(PulmVariant.LINEAR, r_pv)

    @classmethod
    def nonlinear(cls, points=DEFAULT_PULM_POINTS) -> "PulmResistanceModel":
        return cls(PulmVariant.NONLINEAR, None, tuple(tuple(map(float, p)) for p in points))

    def resistance(self, q_mls):
        """R(q) and dR/dq (per mL/s) for the nonlinear table."""
        q = np.asarray(q_mls, dtype=float) * LMIN_PER_MLS
        xs = np.array([p[0] for p in self.points])
        ys = np.array([p[1] for p in self.points])
        r = np.interp(q, xs, ys)
        slopes = np.diff(ys) / np.diff(xs)
        idx = np.clip(np.searchsorted(xs, q, side="right") - 1, 0, len(slopes) - 1)
        dr = np.where((q < xs[0]) | (q > xs[-1]), 0.0, slopes[idx]) * LMIN_PER_MLS
        return r, dr


def pulmonary_flow(pulm: PulmResistanceModel, p_pa, p_pv, r_pv: float | None = None,
                   return_derivative: bool = False, rtol: float = 1e-10, max_iter: int = 200):
    """Flow through the pulmonary venous resistance in mL/s.

    The nonlinear variant solves ``q = dP / R(q)`` by a fixed-point iteration
    damped with ``1 / (1 - g'(q))``.  ``return_derivative`` adds ``dq/d(dP)``
    with ``dP`` in mmHg.
    """
    dp = (np.asarray(p_pa, dtype=float) - np.asarray(p_pv, dtype=float)) * MMHG_TO_BARYE
    if pulm.variant is PulmVariant.LINEAR:
        r = pulm.r_pv if pulm.r_pv is not None else r_pv
        if r is None:
            raise ValueError("linear pulmonary model needs r_pv")
        q = dp / r
        if return_derivative:
            return q, np.full_like(q, MMHG_TO_BARYE / r)
        return q

    r_mid = pulm.points[len(pulm.points) // 2][1]
    q = dp / r_mid
    for _ in range(max_iter):
        r, dr = pulm.resistance(q)
        g = dp / r
        dg = -q * dr / r
        q_new = q + (g - q) / (1.0 - dg)
        done = np.all(np.abs(q_new - q) <= rtol * np.maximum(np.abs(q_new), 1e-300))
        q = q_new
        if done:
            break
    else:
        raise NumericalError("pulmonary fixed point did not converge")
    if return_derivative:
        r, dr = pulm.resistance(q)
        return q, MMHG_TO_BARYE / (r + q * dr)
    return q


def _elastance_activation(tau, ts):
    # rises over [0, ts], relaxes over [ts, 1.5 ts], zero afterwards
    rise = tau <= ts
    fall = (tau > ts) & (tau <= 1.5 * ts)
    e = np.where(rise, 0.5 * (1.0 - np.cos(np.pi * tau / ts)),
                 np.where(fall, 0.5 * (1.0 + np.cos(2.0 * np.pi * (tau - ts) / ts)), 0.0))
    de = np.where(rise, 0.5 * np.pi / ts * np.sin(np.pi * tau / ts),
                  np.where(fall, -np.pi / ts * np.sin(2.0 * np.pi * (tau - ts) / ts), 0.0))
    return e, de


def ventricular_capacitance(params: CvSimParams, side: str, t):
    """Time-varying ventricular capacitance and its exact time derivative.

    Two C1-continuous, ``60/hr``-periodic waveforms are available through
    ``params.waveform``:

    ``"elastance"``
        Elastance ``E = 1/C`` moves from ``1/C_dia`` to ``1/C_sys`` along a
        half cosine over ``[0, r_sys*T]`` and relaxes back along a half cosine
        of half that length.
    ``"raised_cosine"``
        The capacitance itself dips from ``C_dia`` to ``C_sys`` at mid-systole
        and recovers by ``r_sys*T``.

    Returns ``(C, dC/dt)``.
    """
    side = side.lower()[0]
    if side == "l":
        c_dia, c_sys = params.c_l_dia, params.c_l_sys
    elif side == "r":
        c_dia, c_sys = params.c_r_dia, params.c_r_sys
    else:
        raise ValueError(f"side must be left or right, got {side!r}")
    t = np.asarray(t, dtype=float)
    ts = params.t_systole
    tau = np.mod(t, params.period)
    if params.waveform == "elastance":
        e, de = _elastance_activation(tau, ts)
        e_dia, e_sys = 1.0 / c_dia, 1.0 / c_sys
        el = e_dia + (e_sys - e_dia) * e
        return 1.0 / el, -(e_sys - e_dia) * de / (el * el)
    in_sys = tau < ts
    phase = 2.0 * np.pi * tau / ts
    c = np.where(in_sys, c_dia + (c_sys - c_dia) * 0.5 * (1.0 - np.cos(phase)), c_dia)
    dc = np.where(in_sys, (c_sys - c_dia) * 0.5 * np.sin(phase) * 2.0 * np.pi / ts, 0.0)
    return c, dc


@dataclass
class FlowSet:
    q_l_in: np.ndarray
    q_l_out: np.ndarray
    q_a: np.ndarray
    q_r_in: np.ndarray
    q_r_out: np.ndarray
    q_pv: np.ndarray

    def as_array(self) -> np.ndarray:
        return np.stack([self.q_l_in, self.q_l_out, self.q_a, self.q_r_in,
                         self.q_r_out, self.q_pv], axis=-1)


@dataclass
class VolumeSet:
    v_l: np.ndarray
    v_a: np.ndarray
    v_v: np.ndarray
    v_r: np.ndarray
    v_pa: np.ndarray
    v_pv: np.ndarray

    def as_array(self) -> np.ndarray:
        return np.stack([self.v_l, self.v_a, self.v_v, self.v_r, self.v_pa, self.v_pv], axis=-1)


def _valve(dp, r):
    return np.where(dp > 0, dp, 0.0) * (MMHG_TO_BARYE / r)


def compute_flows(params: CvSimParams, pulm: PulmResistanceModel, s,
                  r_pv: float | None = None) -> FlowSet:
    """Flows for pressures ``s`` (last axis of length 6, mmHg)."""
    s = np.asarray(s, dtype=float)
    p = [s[..., i] for i in range(6)]
    r_pv = params.r_pv if r_pv is None else r_pv
    return FlowSet(
        q_l_in=_valve(p[PV] - p[L], params.r_l_in),
        q_l_out=_valve(p[L] - p[A], params.r_l_out),
        q_a=(p[A] - p[V]) * (MMHG_TO_BARYE / params.r_a),
        q_r_in=_valve(p[V] - p[R], params.r_r_in),
        q_r_out=_valve(p[R] - p[PA], params.r_r_out),
        q_pv=pulmonary_flow(pulm, p[PA], p[PV], r_pv=r_pv),
    )


def rhs(params: CvSimParams, pulm: PulmResistanceModel, s, t, r_pv: float | None = None,
        c_a: float | None = None, q_pv_extra=0.0):
    """Time derivatives of the six pressures in mmHg/s.

    ``q_pv_extra`` is an additive pulmonary flow (mL/s) used by the
    discrepancy-augmented models.
    """
    s = np.asarray(s, dtype=float)
    f = compute_flows(params, pulm, s, r_pv=r_pv)
    q_pv = f.q_pv + q_pv_extra
    c_a = params.c_a if c_a is None else c_a
    cl, dcl = ventricular_capacitance(params, "left", t)
    cr, dcr = ventricular_capacitance(params, "right", t)
    k = MMHG_TO_BARYE
    out = np.empty(s.shape)
    out[..., L] = ((f.q_l_in - f.q_l_out) / k - (s[..., L] - params.p_th) * dcl) / cl
    out[..., A] = (f.q_l_out - f.q_a) / (k * c_a)
    out[..., V] = (f.q_a - f.q_r_in) / (k * params.c_v)
    out[..., R] = ((f.q_r_in - f.q_r_out) / k - (s[..., R] - params.p_th) * dcr) / cr
    out[..., PA] = (f.q_r_out - q_pv) / (k * params.c_pa)
    out[..., PV] = (q_pv - f.q_l_in) / (k * params.c_pv)
    return out


def rhs_jacobian(params: CvSimParams, pulm: PulmResistanceModel, s, t,
                 r_pv: float | None = None, c_a: float | None = None) -> np.ndarray:
    """d(rhs)/dP with valve states frozen at ``s`` (single state only)."""
    s = np.asarray(s, dtype=float)
    k = MMHG_TO_BARYE
    g_lin = 1.0 if s[PV] > s[L] else 0.0
    g_lout = 1.0 if s[L] > s[A] else 0.0
    g_rin = 1.0 if s[V] > s[R] else 0.0
    g_rout = 1.0 if s[R] > s[PA] else 0.0
    r_pv = params.r_pv if r_pv is None else r_pv
    _, dq_pv = pulmonary_flow(pulm, s[PA], s[PV], r_pv=r_pv, return_derivative=True)
    dq_pv = float(dq_pv)
    c_a = params.c_a if c_a is None else c_a
    cl, dcl = ventricular_capacitance(params, "left", t)
    cr, dcr = ventricular_capacitance(params, "right", t)
    # conductances in mL/(s*mmHg)
    a_lin = g_lin * k / params.r_l_in
    a_lout = g_lout * k / params.r_l_out
    a_a = k / params.r_a
    a_rin = g_rin * k / params.r_r_in
    a_rout = g_rout * k / params.r_r_out
    jac = np.zeros((6, 6))
    jac[L, PV] += a_lin / (k * cl)
    jac[L, L] += (-a_lin - a_lout) / (k * cl) - dcl / cl
    jac[L, A] += a_lout / (k * cl)
    jac[A, L] += a_lout / (k * c_a)
    jac[A, A] += (-a_lout - a_a) / (k * c_a)
    jac[A, V] += a_a / (k * c_a)
    jac[V, A] += a_a / (k * params.c_v)
    jac[V, V] += (-a_a - a_rin) / (k * params.c_v)
    jac[V, R] += a_rin / (k * params.c_v)
    jac[R, V] += a_rin / (k * cr)
    jac[R, R] += (-a_rin - a_rout) / (k * cr) - dcr / cr
    jac[R, PA] += a_rout / (k * cr)
    jac[PA, R] += a_rout / (k * params.c_pa)
    jac[PA, PA] += (-a_rout - dq_pv) / (k * params.c_pa)
    jac[PA, PV] += dq_pv / (k * params.c_pa)
    jac[PV, PA] += dq_pv / (k * params.c_pv)
    jac[PV, PV] += (-dq_pv - a_lin) / (k * params.c_pv)
    jac[PV, L] += a_lin / (k * params.c_pv)
    return jac


def rhs_batch(params: CvSimParams, pulm: PulmResistanceModel, x, t, r_pv: float | None = None,
              c_a: float | None = None, q_pv_extra=0.0, caps=None):
    """Right-hand side and frozen-valve state Jacobian at many states.

    ``x`` has shape ``(n, 6)`` and ``t`` shape ``(n,)``.  Returns
    ``(f, jac, q_pv)`` with ``f`` of shape ``(n, 6)`` in mmHg/s, ``jac`` of
    shape ``(n, 6, 6)`` and ``q_pv`` the resistive pulmonary flow (without
    ``q_pv_extra``).  ``caps`` may carry precomputed ``(C_l, dC_l, C_r, dC_r)``
    at ``t``.
    """
    x = np.asarray(x, dtype=float)
    k = MMHG_TO_BARYE
    pl, pa, pv, pr, ppa, ppv = (x[:, i] for i in range(6))
    r_pv = params.r_pv if r_pv is None else r_pv
    c_a = params.c_a if c_a is None else c_a
    a_lin = np.where(ppv > pl, k / params.r_l_in, 0.0)
    a_lout = np.where(pl > pa, k / params.r_l_out, 0.0)
    a_a = k / params.r_a
    a_rin = np.where(pv > pr, k / params.r_r_in, 0.0)
    a_rout = np.where(pr > ppa, k / params.r_r_out, 0.0)
    q_lin, q_lout, q_a = a_lin * (ppv - pl), a_lout * (pl - pa), a_a * (pa - pv)
    q_rin, q_rout = a_rin * (pv - pr), a_rout * (pr - ppa)
    q_pv, a_pv = pulmonary_flow(pulm, ppa, ppv, r_pv=r_pv, return_derivative=True)
    q_tot = q_pv + q_pv_extra
    if caps is None:
        caps = ventricular_capacitance(params, "l", t) + ventricular_capacitance(params, "r", t)
    cl, dcl, cr, dcr = caps
    kcl, kcr = k * cl, k * cr
    kc_a, kc_v, kc_pa, kc_pv = k * c_a, k * params.c_v, k * params.c_pa, k * params.c_pv

    f = np.empty_like(x)
    f[:, L] = ((q_lin - q_lout) / k - (pl - params.p_th) * dcl) / cl
    f[:, A] = (q_lout - q_a) / kc_a
    f[:, V] = (q_a - q_rin) / kc_v
    f[:, R] = ((q_rin - q_rout) / k - (pr - params.p_th) * dcr) / cr
    f[:, PA] = (q_rout - q_tot) / kc_pa
    f[:, PV] = (q_tot - q_lin) / kc_pv

    jac = np.zeros((x.shape[0], 6, 6))
    jac[:, L, L] = (-a_lin - a_lout) / kcl - dcl / cl
    jac[:, L, A] = a_lout / kcl
    jac[:, L, PV] = a_lin / kcl
    jac[:, A, L] = a_lout / kc_a
    jac[:, A, A] = (-a_lout - a_a) / kc_a
    jac[:, A, V] = a_a / kc_a
    jac[:, V, A] = a_a / kc_v
    jac[:, V, V] = (-a_a - a_rin) / kc_v
    jac[:, V, R] = a_rin / kc_v
    jac[:, R, V] = a_rin / kcr
    jac[:, R, R] = (-a_rin - a_rout) / kcr - dcr / cr
    jac[:, R, PA] = a_rout / kcr
    jac[:, PA, R] = a_rout / kc_pa
    jac[:, PA, PA] = (-a_rout - a_pv) / kc_pa
    jac[:, PA, PV] = a_pv / kc_pa
    jac[:, PV, L] = a_lin / kc_pv
    jac[:, PV, PA] = a_pv / kc_pv
    jac[:, PV, PV] = (-a_pv - a_lin) / kc_pv
    return f, jac, q_pv


def compute_volumes(params: CvSimParams, s, t) -> VolumeSet:
    s = np.asarray(s, dtype=float)
    cl, _ = ventricular_capacitance(params, "left", t)
    cr, _ = ventricular_capacitance(params, "right", t)
    k = MMHG_TO_BARYE
    pth = params.p_th
    return VolumeSet(
        v_l=params.v0_l + (s[..., L] - pth) * k * cl,
        v_a=params.v0_a + (s[..., A] - pth / 3.0) * k * params.c_a,
        v_v=params.v0_v + s[..., V] * k * params.c_v,
        v_r=params.v0_r + (s[..., R] - pth) * k * cr,
        v_pa=params.v0_pa + (s[..., PA] - pth) * k * params.c_pa,
        v_pv=params.v0_pv + (s[..., PV] - pth) * k * params.c_pv,
    )


@dataclass
class StateTrace:
    """Pressures sampled on a uniform grid; ``t`` in seconds, ``p`` shape (n, 6)."""

    t: np.ndarray
    p: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return self.t.size

    def window(self, t_start: float, t_end: float) -> "StateTrace":
        m = (self.t >= t_start - 1e-12) & (self.t <= t_end + 1e-12)
        return StateTrace(self.t[m], self.p[m], dict(self.meta))

    def shifted(self, dt: float) -> "StateTrace":
        return StateTrace(self.t - dt, self.p, dict(self.meta))

    def at(self, t) -> np.ndarray:
        """Linear interpolation of the pressures at times ``t``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return np.stack([np.interp(t, self.t, self.p[:, i]) for i in range(6)], axis=-1)


def state_trace_volumes(params: CvSimParams, trace: StateTrace) -> VolumeSet:
    return compute_volumes(params, trace.p, trace.t)


def state_trace_flows(params: CvSimParams, pulm: PulmResistanceModel, trace: StateTrace) -> FlowSet:
    return compute_flows(params, pulm, trace.p)


def _scalar_system(params: CvSimParams, pulm: PulmResistanceModel):
    """Pure-float right-hand side and Jacobian for the integrator hot loop."""
    k = MMHG_TO_BARYE
    pth = params.p_th
    g_lin, g_lout = k / params.r_l_in, k / params.r_l_out
    g_a, g_rin, g_rout = k / params.r_a, k / params.r_r_in, k / params.r_r_out
    kc_a, kc_v = k * params.c_a, k * params.c_v
    kc_pa, kc_pv = k * params.c_pa, k * params.c_pv
    linear = pulm.variant is PulmVariant.LINEAR
    g_pv = k / (pulm.r_pv if pulm.r_pv is not None else params.r_pv)

    xs = [p[0] / LMIN_PER_MLS for p in pulm.points]
    ys = [p[1] for p in pulm.points]

    def pulm_flow(dp):
        if linear:
            return dp * g_pv, g_pv
        dpb = dp * k
        q = dpb / ys[len(ys) // 2]
        for _ in range(200):
            if q <= xs[0]:
                r, dr = ys[0], 0.0
            elif q >= xs[-1]:
                r, dr = ys[-1], 0.0
            else:
                i = next(j for j in range(len(xs) - 1) if q < xs[j + 1])
                dr = (ys[i + 1] - ys[i]) / (xs[i + 1] - xs[i])
                r = ys[i] + dr * (q - xs[i])
            q_new = q + (dpb / r - q) / (1.0 + q * dr / r)
            if abs(q_new - q) <= 1e-12 * max(abs(q_new), 1e-300):
                return q_new, k / (r + q_new * dr)
            q = q_new
        raise NumericalError("pulmonary fixed point did not converge")

    ts, period = params.t_systole, params.period
    elastance = params.waveform == "elastance"
    sides = ((params.c_l_dia, params.c_l_sys), (params.c_r_dia, params.c_r_sys))

    def cap(t, c_dia, c_sys):
        tau = math.fmod(t, period)
        if tau < 0:
            tau += period
        if elastance:
            if tau <= ts:
                e = 0.5 * (1.0 - math.cos(math.pi * tau / ts))
                de = 0.5 * math.pi / ts * math.sin(math.pi * tau / ts)
            elif tau <= 1.5 * ts:
                e = 0.5 * (1.0 + math.cos(2.0 * math.pi * (tau - ts) / ts))
                de = -math.pi / ts * math.sin(2.0 * math.pi * (tau - ts) / ts)
            else:
                return c_dia, 0.0
            e_dia, e_sys = 1.0 / c_dia, 1.0 / c_sys
            el = e_dia + (e_sys - e_dia) * e
            return 1.0 / el, -(e_sys - e_dia) * de / (el * el)
        if tau >= ts:
            return c_dia, 0.0
        ph = 2.0 * math.pi * tau / ts
        return (c_dia + (c_sys - c_dia) * 0.5 * (1.0 - math.cos(ph)),
                (c_sys - c_dia) * math.pi / ts * math.sin(ph))

    def caps(t):
        return cap(t, *sides[0]) + cap(t, *sides[1])

    def fun(t, y):
        pl, pa, pv, pr, ppa, ppv = y
        cl, dcl, cr, dcr = caps(t)
        q_lin = (ppv - pl) * g_lin if ppv > pl else 0.0
        q_lout = (pl - pa) * g_lout if pl > pa else 0.0
        q_a = (pa - pv) * g_a
        q_rin = (pv - pr) * g_rin if pv > pr else 0.0
        q_rout = (pr - ppa) * g_rout if pr > ppa else 0.0
        q_pv, _ = pulm_flow(ppa - ppv)
        return np.array([
            ((q_lin - q_lout) / k - (pl - pth) * dcl) / cl,
            (q_lout - q_a) / kc_a,
            (q_a - q_rin) / kc_v,
            ((q_rin - q_rout) / k - (pr - pth) * dcr) / cr,
            (q_rout - q_pv) / kc_pa,
            (q_pv - q_lin) / kc_pv,
        ])

    def jac(t, y):
        pl, pa, pv, pr, ppa, ppv = y
        cl, dcl, cr, dcr = caps(t)
        a_lin = g_lin if ppv > pl else 0.0
        a_lout = g_lout if pl > pa else 0.0
        a_rin = g_rin if pv > pr else 0.0
        a_rout = g_rout if pr > ppa else 0.0
        _, a_pv = pulm_flow(ppa - ppv)
        kcl, kcr = k * cl, k * cr
        return np.array([
            [(-a_lin - a_lout) / kcl - dcl / cl, a_lout / kcl, 0, 0, 0, a_lin / kcl],
            [a_lout / kc_a, (-a_lout - g_a) / kc_a, g_a / kc_a, 0, 0, 0],
            [0, g_a / kc_v, (-g_a - a_rin) / kc_v, a_rin / kc_v, 0, 0],
            [0, 0, a_rin / kcr, (-a_rin - a_rout) / kcr - dcr / cr, a_rout / kcr, 0],
            [0, 0, 0, a_rout / kc_pa, (-a_rout - a_pv) / kc_pa, a_pv / kc_pa],
            [a_lin / kc_pv, 0, 0, 0, a_pv / kc_pv, (-a_pv - a_lin) / kc_pv],
        ], dtype=float)

    return fun, jac


def simulate(params: CvSimParams, pulm: PulmResistanceModel, initial, t_span,
             sample_dt: float = 0.005, rtol: float = 1e-8, atol: float = 1e-10,
             method: str = "Radau", t_eval=None) -> StateTrace:
    """Integrate the pressure ODEs and sample the dense output uniformly.

    ``t_span`` is either an end time (start at 0) or a ``(t0, t1)`` pair.
    Valve indicators are evaluated at every stage state, so switching is
    handled by step rejection in the error controller.  A step-size collapse
    inside the integrator is reported as :class:`StiffnessError`.
    """
    if np.ndim(t_span) == 0:
        t0, t1 = 0.0, float(t_span)
    else:
        t0, t1 = map(float, t_span)
    if not t1 > t0:
        raise ValueError("t_span must be positive")
    if t_eval is None:
        n = int(round((t1 - t0) / sample_dt))
        t_eval = t0 + sample_dt * np.arange(n + 1)
        t_eval = t_eval[t_eval <= t1 + 1e-12]
        t_eval[-1] = min(t_eval[-1], t1)

    fun, jac = _scalar_system(params, pulm)
    kw = {"jac": jac} if method in ("Radau", "BDF", "LSODA") else {}
    sol = solve_ivp(fun, (t0, t1), np.asarray(initial, dtype=float), method=method,
                    t_eval=t_eval, rtol=rtol, atol=atol, **kw)
    if sol.status != 0:
        t_fail = float(sol.t[-1]) if sol.t.size else t0
        raise StiffnessError(t_fail, sol.message)
    if sol.t.size and np.any(np.diff(sol.t) < 0):
        raise NumericalError("non-monotone output times")
    return StateTrace(sol.t.copy(), sol.y.T.copy(),
                      {"rtol": rtol, "atol": atol, "method": method})


def periodic_trace(params: CvSimParams | None = None, pulm: PulmResistanceModel | None = None,
                   cycles: int = 5, warmup_cycles: int = 30, sample_rate: float = 200.0,
                   initial=DEFAULT_INITIAL, rtol: float = 1e-8, atol: float = 1e-10,
                   method: str = "Radau") -> StateTrace:
    """Warm up for whole beats, then record ``cycles`` beats with time reset to 0.

    Because the warm-up covers an integer number of beats the recorded trace
    starts at the beginning of systole.
    """
    params = params or CvSimParams.default()
    pulm = pulm or PulmResistanceModel.linear()
    T = params.period
    state = np.asarray(initial, dtype=float)
    if warmup_cycles > 0:
        warm = simulate(params, pulm, state, warmup_cycles * T, rtol=rtol, atol=atol,
                        method=method, t_eval=np.array([warmup_cycles * T]))
        state = warm.p[-1]
    n = int(round(cycles * T * sample_rate))
    t_eval = np.linspace(0.0, cycles * T, n + 1)
    # phase of the capacitance only depends on t mod T, so restarting at 0 is exact
    tr = simulate(params, pulm, state, cycles * T, rtol=rtol, atol=atol, method=method,
                  t_eval=t_eval)
    tr.meta.update({"warmup_cycles": warmup_cycles, "cycles": cycles,
                    "sample_rate": sample_rate, "pulm": pulm.variant.value})
    return tr


def write_trace_csv(path, trace: StateTrace, params: CvSimParams | None = None,
                    pulm: PulmResistanceModel | None = None, extra: dict | None = None) -> Path:
    """Write ``t,P_l,...,P_pv`` plus optional flows and volumes (LF endings)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = {"t": trace.t}
    for i, n in enumerate(PRESSURES):
        cols[n] = trace.p[:, i]
    if params is not None:
        pulm = pulm or PulmResistanceModel.linear()
        fl = state_trace_flows(params, pulm, trace).as_array()
        vol = state_trace_volumes(params, trace).as_array()
        for i, n in enumerate(FLOWS):
            cols[n] = fl[:, i]
        for i, n in enumerate(VOLUMES):
            cols[n] = vol[:, i]
    for k, v in (extra or {}).items():
        cols[k] = np.asarray(v)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in zip(*cols.values()):
            w.writerow([repr(float(x)) for x in row])
    return path


def read_trace_csv(path) -> StateTrace:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    header, data = rows[0], np.array(rows[1:], dtype=float)
    idx = [header.index(n) for n in PRESSURES]
    return StateTrace(data[:, header.index("t")], data[:, idx])


def total_stressed_volume(params: CvSimParams, trace: StateTrace) -> np.ndarray:
    vol = state_trace_volumes(params, trace).as_array()
    v0 = np.array([params.v0_l, params.v0_a, params.v0_v, params.v0_r, params.v0_pa, params.v0_pv])
    return (vol - v0).sum(axis=-1)




