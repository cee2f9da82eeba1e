"""Subdomain least-squares estimation of CVSim-6 states and parameters.

Each pressure is written as a constrained expression over a short subdomain
``[t_k, t_k + h]`` whose initial value is the end value of the previous
subdomain.  The ODE residuals at ``p`` collocation points and the data misfits
inside the subdomain are stacked and minimised with Gauss-Newton steps.  All
subdomains share the same length and basis, so the feature matrices are
computed once.

Unknown vector layout: ``[beta_l beta_a beta_v beta_r beta_pa beta_pv | log theta | beta_delta]``.
"""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .basis import (ActivationKind, ConfigurationError, InitSpec, RandomBasis, TimeMap,
                    build_basis, eval_features)
from .cvsim6 import (FLOWS, MMHG_TO_BARYE, PA, PRESSURES, PV, VOLUMES, CvSimParams,
                     PulmResistanceModel, PulmVariant, compute_flows, compute_volumes, rhs_batch,
                     ventricular_capacitance)
from .rng import stream
from .synth import ObservationSet

PARAM_NAMES = ("r_pv", "c_a")


class EstimationError(RuntimeError):
    """Ill-posed problem or a failed subdomain."""

    def __init__(self, message: str, subdomain: int | None = None, diagnostics=None):
        if subdomain is not None:
            message = f"subdomain {subdomain}: {message}"
        super().__init__(message)
        self.subdomain = subdomain
        self.diagnostics = diagnostics


# ---------------------------------------------------------------------------
# least squares


@dataclass(frozen=True)
class LsqInfo:
    rank: int
    deficient: bool
    sv_max: float
    sv_min: float


def lsq_update(J, r, rcond: float = 1e-10):
    """Minimum-norm solution of ``J @ dx = -r`` (SVD, relative cutoff ``rcond``)."""
    J = np.asarray(J, dtype=float)
    r = np.asarray(r, dtype=float)
    if J.ndim != 2 or J.shape[0] != r.size:
        raise ValueError(f"shape mismatch: J {J.shape}, r {r.shape}")
    if J.shape[0] == 0 or not np.any(J):
        return np.zeros(J.shape[1]), LsqInfo(0, True, 0.0, 0.0)
    dx, _, rank, sv = np.linalg.lstsq(J, -r, rcond=rcond)
    return dx, LsqInfo(int(rank), int(rank) < min(J.shape), float(sv[0]), float(sv[-1]))


@dataclass
class NewtonDiagnostics:
    iterations: int = 0
    residual_norms: list = field(default_factory=list)
    converged: bool = False
    reason: str = ""
    non_monotone: bool = False
    rank_deficient: bool = False


def gauss_newton(fun, u0, max_iter: int = 50, step_tol: float = 1e-10,
                 stagnation_tol: float = 1e-12, rcond: float = 1e-10, max_halvings: int = 8):
    """Iterate ``u <- u + a * lsq_update(J, r)`` where ``fun(u) -> (r, J)``.

    The step length ``a`` starts at 1 and is halved while the residual norm
    grows.  Stops on a small step (max-norm), a stagnating residual norm or the
    iteration cap, and returns the iterate with the smallest residual norm.
    Residual growth by 10x over 5 iterations raises :class:`EstimationError`.
    """
    u = np.array(u0, dtype=float)
    diag = NewtonDiagnostics()
    r, J = fun(u)
    norm = float(np.linalg.norm(r))
    if not np.isfinite(norm):
        raise EstimationError("non-finite residual at the initial guess", diagnostics=diag)
    diag.residual_norms.append(norm)
    diag.reason = "max_iter"
    for it in range(max_iter):
        step, info = lsq_update(J, r, rcond)
        diag.rank_deficient |= info.deficient
        a = 1.0
        for _ in range(max_halvings + 1):
            u_try = u + a * step
            try:
                r_try, J_try = fun(u_try)
                n_try = float(np.linalg.norm(r_try))
            except (OverflowError, FloatingPointError):
                n_try = np.inf
            if np.isfinite(n_try) and n_try <= norm * (1.0 + 1e-12):
                break
            a *= 0.5
        else:
            diag.reason = "line_search"
            diag.converged = np.max(np.abs(step), initial=0.0) < step_tol
            break
        diag.iterations = it + 1
        prev, u, r, J, norm = norm, u_try, r_try, J_try, n_try
        diag.residual_norms.append(norm)
        n = len(diag.residual_norms)
        if n >= 6 and norm > 10.0 * diag.residual_norms[-6]:
            raise EstimationError("residual diverged", diagnostics=diag)
        if np.max(np.abs(a * step), initial=0.0) < step_tol:
            diag.converged, diag.reason = True, "step"
            break
        if abs(prev - norm) <= stagnation_tol * max(norm, 1e-300):
            diag.converged, diag.reason = True, "stagnation"
            break
    rn = diag.residual_norms
    diag.non_monotone = any(b > a_ * (1 + 1e-9) + 1e-14 for a_, b in zip(rn[1:], rn[2:]))
    return u, diag


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class LossWeights:
    lambda_eq: float = 1.0
    lambda_data: float = 1.0

    def __post_init__(self):
        if self.lambda_eq < 0 or self.lambda_data < 0:
            raise ConfigurationError("loss weights must be non-negative")
        if self.lambda_eq == 0 and self.lambda_data == 0:
            raise ConfigurationError("at least one loss weight must be positive")


@dataclass(frozen=True)
class CollocationGrid:
    """Equal subdomains of length ``h`` starting at ``t0``, ``p`` points each."""

    h: float = 0.001
    p: int = 5
    n_neurons: int = 5
    t0: float = 0.0
    z0: float = -1.0
    zf: float = 1.0

    def __post_init__(self):
        if not self.h > 0:
            raise ConfigurationError("subdomain length must be positive")
        if self.p < 2:
            raise ConfigurationError("need at least two collocation points per subdomain")
        if self.n_neurons < 1:
            raise ConfigurationError("need at least one neuron")

    def n_subdomains(self, t_end: float) -> int:
        return max(1, math.ceil((t_end - self.t0) / self.h - 1e-9))

    def start(self, k: int) -> float:
        return self.t0 + k * self.h

    def timemap(self, k: int = 0) -> TimeMap:
        return TimeMap(self.start(k), self.start(k) + self.h, self.z0, self.zf)

    def local_points(self) -> np.ndarray:
        return np.linspace(0.0, self.h, self.p)

    def points(self, k: int) -> np.ndarray:
        return self.start(k) + self.local_points()

    def subdomain_of(self, t) -> np.ndarray:
        """Index k with ``t`` in ``(t_k, t_k + h]``; times at ``t0`` map to -1."""
        t = np.asarray(t, dtype=float)
        return np.ceil((t - self.t0) / self.h - 1e-9).astype(int) - 1

    def to_dict(self) -> dict:
        return {"h": self.h, "p": self.p, "n_neurons": self.n_neurons, "t0": self.t0,
                "z0": self.z0, "zf": self.zf}


class DiscrepancyKind(str, enum.Enum):
    NONE = "none"
    ALGEBRAIC = "algebraic"
    INDUCTIVE = "inductive"


@dataclass(frozen=True)
class DiscrepancySpec:
    """Additive pulmonary-flow discrepancy.

    ``inductance`` defaults to ``10 * r_pv`` (Barye*s^2/mL); ``n_neurons``
    defaults to the grid's neuron count.
    """

    kind: DiscrepancyKind = DiscrepancyKind.NONE
    n_neurons: int | None = None
    inductance: float | None = None
    delta0: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", DiscrepancyKind(self.kind))
        if self.inductance is not None and not self.inductance > 0:
            raise ConfigurationError("inductance must be positive")

    @property
    def enabled(self) -> bool:
        return self.kind is not DiscrepancyKind.NONE

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "n_neurons": self.n_neurons,
                "inductance": self.inductance, "delta0": self.delta0}


@dataclass(frozen=True)
class EstimatorConfig:
    grid: CollocationGrid = field(default_factory=CollocationGrid)
    weights: LossWeights = field(default_factory=LossWeights)
    activation: ActivationKind = ActivationKind.TANH
    init: InitSpec = field(default_factory=lambda: InitSpec.uniform_symmetric(1.0))
    discrepancy: DiscrepancySpec = field(default_factory=DiscrepancySpec)
    theta_init: dict | None = None
    theta_anchor: float | dict = 0.0
    variable_scale: tuple[float, ...] | None = None
    max_iter: int = 50
    step_tol: float = 1e-10
    stagnation_tol: float = 1e-12
    rcond: float = 1e-10

    def to_dict(self) -> dict:
        return {"grid": self.grid.to_dict(),
                "weights": {"lambda_eq": self.weights.lambda_eq,
                            "lambda_data": self.weights.lambda_data},
                "activation": ActivationKind(self.activation).value,
                "init": self.init.to_dict(), "discrepancy": self.discrepancy.to_dict(),
                "theta_init": self.theta_init, "theta_anchor": self.theta_anchor,
                "variable_scale": None if self.variable_scale is None else list(self.variable_scale),
                "max_iter": self.max_iter, "step_tol": self.step_tol,
                "stagnation_tol": self.stagnation_tol, "rcond": self.rcond}

    @classmethod
    def from_dict(cls, d: dict) -> "EstimatorConfig":
        w = d.get("weights", {})
        vs = d.get("variable_scale")
        return cls(CollocationGrid(**d.get("grid", {})),
                   LossWeights(float(w.get("lambda_eq", 1.0)), float(w.get("lambda_data", 1.0))),
                   ActivationKind(d.get("activation", "tanh")),
                   InitSpec.from_dict(d["init"]) if "init" in d else InitSpec.uniform_symmetric(1.0),
                   DiscrepancySpec(**d.get("discrepancy", {})),
                   d.get("theta_init"), d.get("theta_anchor", 0.0),
                   None if vs is None else tuple(vs),
                   int(d.get("max_iter", 50)), float(d.get("step_tol", 1e-10)),
                   float(d.get("stagnation_tol", 1e-12)), float(d.get("rcond", 1e-10)))


PRESETS = {
    # parameters tied strongly to their previous values: unbiased estimates
    "estimation": {"weights": LossWeights(1.0, 300.0),
                   "theta_anchor": {"r_pv": 300.0, "c_a": 1000.0}},
    # reconstruction follows the measurements closely
    "tracking": {"weights": LossWeights(1.0, 2000.0), "theta_anchor": 2000.0},
}


def cvsim_config(preset: str = "estimation", **overrides) -> EstimatorConfig:
    """Estimator settings for CVSim-6 scenario runs.

    Data rows carry a heavy weight and each subdomain's parameters are tied to
    the previous subdomain's values.  ``"estimation"`` keeps measurement noise
    out of the parameters; ``"tracking"`` lets the reconstruction follow the
    data more closely at the cost of noisier parameter point values.
    """
    try:
        base = dict(PRESETS[preset])
    except KeyError:
        raise ConfigurationError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}") from None
    base.update(overrides)
    return EstimatorConfig(**base)


@dataclass(frozen=True)
class CvSimModel:
    """CVSim-6 right-hand side with a subset of parameters left unknown."""

    params: CvSimParams = field(default_factory=CvSimParams)
    pulm: PulmResistanceModel = field(default_factory=PulmResistanceModel.linear)
    unknowns: tuple[str, ...] = ()

    def __post_init__(self):
        bad = [u for u in self.unknowns if u not in PARAM_NAMES]
        if bad or len(set(self.unknowns)) != len(self.unknowns):
            raise ConfigurationError(f"unknowns must be distinct names from {PARAM_NAMES}")
        # canonical order r_pv, c_a
        object.__setattr__(self, "unknowns", tuple(n for n in PARAM_NAMES if n in self.unknowns))
        if "r_pv" in self.unknowns and self.pulm.variant is not PulmVariant.LINEAR:
            raise ConfigurationError("r_pv can only be estimated with the linear pulmonary model")


@dataclass(frozen=True)
class UnknownLayout:
    n_neurons: int
    params: tuple[str, ...] = ()
    n_delta: int = 0

    @property
    def n_state(self) -> int:
        return 6 * self.n_neurons

    @property
    def size(self) -> int:
        return self.n_state + len(self.params) + self.n_delta

    def beta(self, i: int) -> slice:
        return slice(i * self.n_neurons, (i + 1) * self.n_neurons)

    def theta_index(self, name: str) -> int:
        return self.n_state + self.params.index(name)

    @property
    def delta(self) -> slice:
        start = self.n_state + len(self.params)
        return slice(start, start + self.n_delta)


# ---------------------------------------------------------------------------
# per-subdomain problem


@dataclass
class SubdomainProblem:
    """Everything needed to evaluate residuals on one subdomain.

    ``obs_rows`` lists, per observed variable index, the feature rows
    ``sigma(t_j) - sigma_0`` and the observed values inside the subdomain.
    """

    model: CvSimModel
    layout: UnknownLayout
    t: np.ndarray
    S: np.ndarray
    D: np.ndarray
    x0: np.ndarray
    obs_rows: list
    weights: LossWeights
    kind: DiscrepancyKind = DiscrepancyKind.NONE
    Sd: np.ndarray | None = None
    Dd: np.ndarray | None = None
    delta0: float = 0.0
    inductance: float = 1.0
    scale: np.ndarray | None = None
    fixed_theta: dict = field(default_factory=dict)
    theta_prev: np.ndarray | None = None
    anchor: np.ndarray | None = None

    def __post_init__(self):
        prm = self.model.params
        self.caps = (ventricular_capacitance(prm, "l", self.t)
                     + ventricular_capacitance(prm, "r", self.t))

    @property
    def n_anchor(self) -> int:
        return 0 if self.anchor is None or self.theta_prev is None else self.anchor.shape[0]

    @property
    def n_rows(self) -> int:
        p = self.t.size
        extra = p if self.kind is DiscrepancyKind.INDUCTIVE else 0
        return (6 * p + extra + sum(rows.shape[0] for _, rows, _ in self.obs_rows)
                + self.n_anchor)

    def theta(self, u) -> dict:
        th = dict(self.fixed_theta)
        for name in self.layout.params:
            th[name] = math.exp(min(u[self.layout.theta_index(name)], 700.0))
        return th

    def states(self, u):
        B = u[:self.layout.n_state].reshape(6, -1)
        return self.S @ B.T + self.x0, self.D @ B.T

    def delta(self, u):
        if self.kind is DiscrepancyKind.NONE:
            return np.zeros(self.t.size), np.zeros(self.t.size)
        bd = u[self.layout.delta]
        d = self.Sd @ bd + (self.delta0 if self.kind is DiscrepancyKind.INDUCTIVE else 0.0)
        return d, self.Dd @ bd


def assemble(prob: SubdomainProblem, u, jacobian: bool = True):
    """Residual vector (and Jacobian) for one subdomain.

    Row order: ODE residuals variable-major (``i * p + n``), then the inductor
    rows when present, then data rows per observed variable.
    """
    u = np.asarray(u, dtype=float)
    lay, m, w = prob.layout, prob.model, prob.weights
    p = prob.t.size
    th = prob.theta(u)
    r_pv = th.get("r_pv", m.params.r_pv)
    c_a = th.get("c_a", m.params.c_a)
    X, Xd = prob.states(u)
    d, dd = prob.delta(u)
    f, jac, q_pv = rhs_batch(m.params, m.pulm, X, prob.t, r_pv=r_pv, c_a=c_a, q_pv_extra=d,
                             caps=prob.caps)
    scale = np.ones(6) if prob.scale is None else prob.scale
    lam1, lam2 = w.lambda_eq, w.lambda_data
    induct = prob.kind is DiscrepancyKind.INDUCTIVE
    k_over_l = MMHG_TO_BARYE / prob.inductance

    n_rows = prob.n_rows
    r = np.empty(n_rows)
    row_ode = (lam1 * scale)[:, None]
    r[:6 * p] = (row_ode * (Xd - f).T).ravel()
    pos = 6 * p
    if induct:
        r[pos:pos + p] = lam1 * (dd - (X[:, PA] - X[:, PV]) * k_over_l)
        pos += p
    for i, rows, vals in prob.obs_rows:
        n = rows.shape[0]
        x = rows @ u[lay.beta(i)] + prob.x0[i]
        r[pos:pos + n] = lam2 * scale[i] * (vals - x)
        pos += n
    na = prob.n_anchor
    th_sl = slice(lay.n_state, lay.n_state + len(lay.params))
    if na:
        r[pos:pos + na] = prob.anchor @ (u[th_sl] - prob.theta_prev)
    if not jacobian:
        return r

    J = np.zeros((n_rows, lay.size))
    blk = -np.einsum("nij,nl->injl", jac, prob.S)
    for i in range(6):
        blk[i, :, i, :] += prob.D
    J[:6 * p, :lay.n_state] = (row_ode[:, :, None, None] * blk).reshape(6 * p, lay.n_state)
    kc_pa = MMHG_TO_BARYE * m.params.c_pa
    kc_pv = MMHG_TO_BARYE * m.params.c_pv
    if "r_pv" in lay.params:
        j = lay.theta_index("r_pv")
        # q = dP/R  ->  dq/dlogR = -q
        J[PA * p:(PA + 1) * p, j] = -lam1 * scale[PA] * q_pv / kc_pa
        J[PV * p:(PV + 1) * p, j] = lam1 * scale[PV] * q_pv / kc_pv
    if "c_a" in lay.params:
        j = lay.theta_index("c_a")
        J[p:2 * p, j] = lam1 * scale[1] * f[:, 1]
    if prob.kind is not DiscrepancyKind.NONE:
        ds = lay.delta
        J[PA * p:(PA + 1) * p, ds] = lam1 * scale[PA] * prob.Sd / kc_pa
        J[PV * p:(PV + 1) * p, ds] = -lam1 * scale[PV] * prob.Sd / kc_pv
    pos = 6 * p
    if induct:
        J[pos:pos + p, lay.delta] = lam1 * prob.Dd
        J[pos:pos + p, lay.beta(PA)] = -lam1 * k_over_l * prob.S
        J[pos:pos + p, lay.beta(PV)] = lam1 * k_over_l * prob.S
        pos += p
    for i, rows, _ in prob.obs_rows:
        n = rows.shape[0]
        J[pos:pos + n, lay.beta(i)] = -lam2 * scale[i] * rows
        pos += n
    if na:
        J[pos:pos + na, th_sl] = prob.anchor
    return r, J


def assemble_residuals(prob: SubdomainProblem, u) -> np.ndarray:
    return assemble(prob, u, jacobian=False)


def assemble_jacobian(prob: SubdomainProblem, u) -> np.ndarray:
    return assemble(prob, u)[1]


def solve_subdomain(prob: SubdomainProblem, u_init, config: EstimatorConfig | None = None):
    """Gauss-Newton on one subdomain; returns ``(u, NewtonDiagnostics)``."""
    cfg = config or EstimatorConfig()
    return gauss_newton(lambda u: assemble(prob, u), u_init, cfg.max_iter, cfg.step_tol,
                        cfg.stagnation_tol, cfg.rcond)


# ---------------------------------------------------------------------------
# marching


@dataclass
class EstimationResult:
    t: np.ndarray
    p: np.ndarray
    theta: dict
    theta_points: np.ndarray
    theta_names: tuple[str, ...]
    params: CvSimParams
    pulm: PulmResistanceModel
    delta: np.ndarray | None = None
    iterations: np.ndarray | None = None
    residual_norms: np.ndarray | None = None
    flags: dict = field(default_factory=dict)

    def effective_params(self) -> CvSimParams:
        return replace(self.params, **self.theta)

    def flows(self) -> np.ndarray:
        prm = self.effective_params()
        q = compute_flows(prm, self.pulm, self.p, r_pv=prm.r_pv).as_array()
        if self.delta is not None:
            q[:, 5] = q[:, 5] + self.delta
        return q

    def volumes(self) -> np.ndarray:
        return compute_volumes(self.effective_params(), self.p, self.t).as_array()

    def summary(self) -> dict:
        return {"theta": {k: float(v) for k, v in self.theta.items()},
                "theta_points": {n: self.theta_points[:, j].tolist()
                                 for j, n in enumerate(self.theta_names)},
                "n_subdomains": int(0 if self.iterations is None else self.iterations.size),
                "iterations": None if self.iterations is None else self.iterations.tolist(),
                "residual_norms": None if self.residual_norms is None
                else self.residual_norms.tolist(),
                "flags": self.flags}

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        cols = {"t": self.t}
        for block, names in ((self.p, PRESSURES), (self.flows(), FLOWS), (self.volumes(), VOLUMES)):
            for j, n in enumerate(names):
                cols[n] = block[:, j]
        if self.delta is not None:
            cols["delta"] = self.delta
        with path.open("w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(cols)
            for row in zip(*cols.values()):
                wr.writerow([repr(float(x)) for x in row])
        return path

    def write_json(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.summary(), indent=2) + "\n")
        return path


def _observation_rows(grid: CollocationGrid, basis: RandomBasis, obs: ObservationSet, n_sub: int):
    """Per variable: subdomain ranges, feature rows and values."""
    tm = grid.timemap(0)
    sig0, _ = eval_features(basis, tm, tm.t0)
    out = []
    for name in obs.variables:
        i = PRESSURES.index(name)
        t = np.asarray(obs.times[name], dtype=float)
        k = grid.subdomain_of(t)
        keep = (k >= 0) & (k < n_sub)
        t, vals, k = t[keep], np.asarray(obs.values[name], dtype=float)[keep], k[keep]
        tau = t - (grid.t0 + k * grid.h)
        sig, _ = eval_features(basis, tm, tm.t0 + tau)
        rows = np.atleast_2d(sig) - sig0
        bounds = np.searchsorted(k, np.arange(n_sub + 1), side="left")
        out.append((i, rows, vals, bounds))
    return out


def _initial_theta(model: CvSimModel, cfg: EstimatorConfig) -> np.ndarray:
    init = cfg.theta_init or {}
    vals = []
    for name in model.unknowns:
        v = float(init.get(name, getattr(model.params, name)))
        if not v > 0:
            raise ConfigurationError(f"initial guess for {name} must be positive")
        vals.append(math.log(v))
    return np.array(vals)


def _anchor_weights(model: CvSimModel, cfg: EstimatorConfig) -> np.ndarray:
    a = cfg.theta_anchor
    w = np.array([float(a.get(n, 0.0)) if isinstance(a, dict) else float(a)
                  for n in model.unknowns])
    if np.any(w < 0):
        raise ConfigurationError("anchor weights must be non-negative")
    return w


def _anchor_matrix(weights: np.ndarray):
    return np.diag(weights) if np.any(weights > 0) else None


def build_bases(cfg: EstimatorConfig, seed: int | None = None):
    """State basis and (optional) discrepancy basis from independent streams."""
    init = cfg.init if seed is None else cfg.init.with_seed(seed)
    basis = build_basis(cfg.grid.n_neurons, cfg.activation, init, stream(init.seed, "basis", 0))
    dbasis = None
    if cfg.discrepancy.enabled:
        nd = cfg.discrepancy.n_neurons or cfg.grid.n_neurons
        dbasis = build_basis(nd, cfg.activation, init, stream(init.seed, "basis", 1))
    return basis, dbasis


def estimate(model: CvSimModel, obs: ObservationSet, config: EstimatorConfig | None = None,
             seed: int | None = None, t_end: float | None = None,
             output: str = "collocation") -> EstimationResult:
    """March over all subdomains covering ``[t0, t_end]``.

    ``output`` selects the reconstruction grid: ``"collocation"`` (every
    collocation point, shared endpoints once) or ``"boundaries"``.
    """
    cfg = config or EstimatorConfig()
    grid = cfg.grid
    if t_end is None:
        t_end = obs.t_end()
    if not t_end > grid.t0:
        raise EstimationError("no time span to estimate over")
    if cfg.weights.lambda_eq == 0 and obs.count() == 0:
        raise EstimationError("ill-posed: no observations and physics switched off")
    x0 = np.asarray(obs.initial, dtype=float)
    if x0.shape != (6,) or not np.all(np.isfinite(x0)):
        raise EstimationError("observation set needs a finite six-component initial state")

    basis, dbasis = build_bases(cfg, seed)
    disc = cfg.discrepancy
    layout = UnknownLayout(grid.n_neurons, model.unknowns, 0 if dbasis is None else dbasis.size)
    n_sub = grid.n_subdomains(t_end)
    tm = grid.timemap(0)
    tau = grid.local_points()
    sig, D = eval_features(basis, tm, tm.t0 + tau)
    S = sig - sig[0]
    Sd = Dd = None
    if dbasis is not None:
        sd, Dd = eval_features(dbasis, tm, tm.t0 + tau)
        Sd = sd - sd[0] if disc.kind is DiscrepancyKind.INDUCTIVE else sd
    inductance = disc.inductance or 10.0 * model.params.r_pv
    scale = None if cfg.variable_scale is None else np.asarray(cfg.variable_scale, dtype=float)
    obs_rows = _observation_rows(grid, basis, obs, n_sub)

    anchor = _anchor_matrix(_anchor_weights(model, cfg))
    u = np.zeros(layout.size)
    u[layout.n_state:layout.n_state + len(model.unknowns)] = _initial_theta(model, cfg)
    state = x0.copy()
    delta0 = disc.delta0
    p = grid.p
    keep = p - 1 if output == "collocation" else 1
    n_out = n_sub * keep + 1
    t_out = np.empty(n_out)
    p_out = np.empty((n_out, 6))
    d_out = np.empty(n_out) if dbasis is not None else None
    theta_pts = np.empty((n_sub, len(model.unknowns)))
    iters = np.empty(n_sub, dtype=int)
    norms = np.empty(n_sub)
    non_monotone = 0
    rank_def = 0
    for k in range(n_sub):
        t_col = grid.start(k) + tau
        rows = [(i, r[b[k]:b[k + 1]], v[b[k]:b[k + 1]]) for i, r, v, b in obs_rows if b[k + 1] > b[k]]
        th_sl = slice(layout.n_state, layout.n_state + len(model.unknowns))
        prob = SubdomainProblem(model, layout, t_col, S, D, state, rows, cfg.weights,
                                disc.kind, Sd, Dd, delta0, inductance, scale,
                                theta_prev=u[th_sl].copy(), anchor=anchor)
        try:
            u, diag = solve_subdomain(prob, u, cfg)
        except EstimationError as exc:
            raise EstimationError(str(exc), k, exc.diagnostics) from None
        X, _ = prob.states(u)
        d, _ = prob.delta(u)
        sl = slice(k * keep, (k + 1) * keep)
        idx = np.arange(0, p - 1) if keep == p - 1 else np.array([0])
        t_out[sl] = t_col[idx]
        p_out[sl] = X[idx]
        if d_out is not None:
            d_out[sl] = d[idx]
        state = X[-1].copy()
        if disc.kind is DiscrepancyKind.INDUCTIVE:
            delta0 = float(d[-1])
        theta_pts[k] = np.exp(u[layout.n_state:layout.n_state + len(model.unknowns)])
        iters[k] = diag.iterations
        norms[k] = diag.residual_norms[-1]
        non_monotone += diag.non_monotone
        rank_def += diag.rank_deficient
    t_out[-1] = grid.start(n_sub)
    p_out[-1] = state
    if d_out is not None:
        d_out[-1] = d[-1]
    theta = {n: float(theta_pts[:, j].mean()) for j, n in enumerate(model.unknowns)}
    return EstimationResult(t_out, p_out, theta, theta_pts, model.unknowns, model.params,
                            model.pulm, d_out, iters, norms,
                            {"non_monotone_subdomains": int(non_monotone),
                             "rank_deficient_subdomains": int(rank_def)})


def learn_discrepancy(params: CvSimParams, obs: ObservationSet, kind: DiscrepancyKind | str,
                      config: EstimatorConfig | None = None, seed: int | None = None,
                      t_end: float | None = None) -> EstimationResult:
    """Linear-resistance model plus a learned pulmonary-flow discrepancy."""
    kind = DiscrepancyKind(kind)
    if not {"P_a", "P_pa"} <= set(obs.variables):
        raise EstimationError("discrepancy learning needs P_a and P_pa observations")
    cfg = config or EstimatorConfig(grid=CollocationGrid(0.01, 10, 10))
    cfg = replace(cfg, discrepancy=replace(cfg.discrepancy, kind=kind))
    model = CvSimModel(params, PulmResistanceModel.linear(params.r_pv), ())
    return estimate(model, obs, cfg, seed=seed, t_end=t_end)


def forward_solve(model: CvSimModel, x0, config: EstimatorConfig | None = None,
                  seed: int | None = None, t_end: float = 1.0) -> EstimationResult:
    """Physics-only march from ``x0`` with all parameters known.

    With ``p * 6 == 6 * L`` rows the local systems are square, so the result
    solves the collocation equations exactly and sampling it gives data that
    the estimator's own model class reproduces without error.
    """
    known = CvSimModel(model.params, model.pulm, ())
    empty = ObservationSet({}, {}, {}, np.asarray(x0, dtype=float))
    return estimate(known, empty, config, seed=seed, t_end=t_end)


def sample_result(res: EstimationResult, names=PRESSURES, initial=None) -> ObservationSet:
    """Noiseless observation set taken from a reconstruction's output grid."""
    idx = [PRESSURES.index(n) for n in names]
    x0 = res.p[0].copy() if initial is None else np.asarray(initial, dtype=float)
    return ObservationSet({n: res.t.copy() for n in names},
                          {n: res.p[:, i].copy() for n, i in zip(names, idx)},
                          {n: 0.0 for n in names}, x0)
