"""Harmonic benchmark ``dx/dt = cos(k t) / k`` with closed-form oracles.

The fitter writes ``x`` as a constrained expression on one domain (or on
several marched subdomains), optionally treats ``log k`` as unknown and
optionally adds an algebraic discrepancy ``delta(t)`` to the right-hand side.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import partial

import numpy as np

from .basis import ActivationKind, ConfigurationError, InitSpec, TimeMap, build_basis, eval_features
from .rng import stream
from .uq import EnsembleResult, EnsembleSpec, Replicate, UncertaintyBands, decompose, run_ensemble
from .xtfc import EstimationError, LossWeights, gauss_newton


def oracle_linear(k: float, x0: float, t):
    _check_k(k)
    return np.sin(k * np.asarray(t, dtype=float)) / k**2 + x0


def oracle_nonlinear(k: float, x0: float, t):
    _check_k(k)
    return x0 * np.exp(np.sin(k * np.asarray(t, dtype=float)) / k**2)


def oracle_discrepancy(k: float, x0: float, t):
    """``delta`` that turns the linear right-hand side into the nonlinear one."""
    return (oracle_nonlinear(k, x0, t) - 1.0) * np.cos(k * np.asarray(t, dtype=float)) / k


def _check_k(k):
    if not k > 0:
        raise ConfigurationError(f"k must be positive, got {k}")


@dataclass(frozen=True)
class HarmonicProblem:
    """Data-generating setup.  ``model`` is ``"linear"`` or ``"nonlinear"``."""

    k: float = 1.0
    x0: float = 10.0
    t_span: tuple[float, float] = (0.0, 10.0)
    data_span: tuple[float, float] = (0.0, 5.0)
    n_obs: int = 40
    noise_std: float = 0.5
    model: str = "linear"
    gap: tuple[float, float] | None = None

    def __post_init__(self):
        _check_k(self.k)
        if self.model not in ("linear", "nonlinear"):
            raise ConfigurationError(f"unknown model {self.model!r}")
        if self.noise_std < 0:
            raise ConfigurationError("noise std must be non-negative")
        lo, hi = self.data_span
        if not (self.t_span[0] <= lo < hi <= self.t_span[1]):
            raise ConfigurationError("data span must lie inside the time span")

    def truth(self, t):
        f = oracle_linear if self.model == "linear" else oracle_nonlinear
        return f(self.k, self.x0, t)

    def to_dict(self) -> dict:
        return {"k": self.k, "x0": self.x0, "t_span": list(self.t_span),
                "data_span": list(self.data_span), "n_obs": self.n_obs,
                "noise_std": self.noise_std, "model": self.model,
                "gap": None if self.gap is None else list(self.gap)}

    @classmethod
    def from_dict(cls, d: dict) -> "HarmonicProblem":
        d = dict(d)
        for key in ("t_span", "data_span", "gap"):
            if d.get(key) is not None:
                d[key] = tuple(float(v) for v in d[key])
        return cls(**d)


@dataclass(frozen=True)
class HarmonicData:
    t: np.ndarray
    x: np.ndarray
    sigma: float
    x0: float


def make_data(problem: HarmonicProblem, seed: int, times_seed: int | None = None) -> HarmonicData:
    """``n_obs`` uniform-random times in the data span plus Gaussian noise.

    Times come from ``times_seed`` (default ``seed``) so that an ensemble can
    keep the sampling pattern fixed while resampling the noise.
    """
    lo, hi = problem.data_span
    ts = seed if times_seed is None else times_seed
    t = np.sort(stream(ts, "sampling").uniform(lo, hi, problem.n_obs))
    if problem.gap is not None:
        t = t[(t < problem.gap[0]) | (t >= problem.gap[1])]
    x = problem.truth(t) + problem.noise_std * stream(seed, "noise", 0).standard_normal(t.size)
    return HarmonicData(t, x, problem.noise_std, problem.x0)


def dense_data(problem: HarmonicProblem, n: int = 201) -> HarmonicData:
    """Noiseless samples on a uniform grid over the time span."""
    t = np.linspace(*problem.t_span, n)
    return HarmonicData(t, problem.truth(t), 0.0, problem.x0)


@dataclass(frozen=True)
class HarmonicConfig:
    """Fitter settings.

    ``z_range=None`` feeds physical time straight into the activations;
    otherwise every subdomain is mapped affinely onto ``z_range``.
    """

    n_neurons: int = 20
    activation: ActivationKind = ActivationKind.TANH
    init: InitSpec = field(default_factory=lambda: InitSpec.uniform_symmetric(1.0))
    weights: LossWeights = field(default_factory=LossWeights)
    n_collocation: int = 101
    n_subdomains: int = 1
    t_span: tuple[float, float] = (0.0, 10.0)
    z_range: tuple[float, float] | None = (-1.0, 1.0)
    estimate_k: bool = True
    k_init: float = 0.5
    k_fixed: float = 1.0
    discrepancy: bool = False
    n_delta_neurons: int = 20
    max_iter: int = 100
    step_tol: float = 1e-12
    stagnation_tol: float = 1e-14
    rcond: float = 1e-12

    def __post_init__(self):
        object.__setattr__(self, "activation", ActivationKind(self.activation))
        if self.n_neurons < 1 or self.n_delta_neurons < 1:
            raise ConfigurationError("need at least one neuron")
        if self.n_collocation < 2 or self.n_subdomains < 1:
            raise ConfigurationError("need two collocation points and one subdomain")
        if not self.t_span[0] < self.t_span[1]:
            raise ConfigurationError("empty time span")
        _check_k(self.k_init)
        _check_k(self.k_fixed)

    def timemap(self, j: int) -> TimeMap:
        h = (self.t_span[1] - self.t_span[0]) / self.n_subdomains
        a = self.t_span[0] + j * h
        if self.z_range is None:
            return TimeMap(a, a + h, a, a + h)
        return TimeMap(a, a + h, *self.z_range)

    def to_dict(self) -> dict:
        return {"n_neurons": self.n_neurons, "activation": self.activation.value,
                "init": self.init.to_dict(),
                "weights": {"lambda_eq": self.weights.lambda_eq,
                            "lambda_data": self.weights.lambda_data},
                "n_collocation": self.n_collocation, "n_subdomains": self.n_subdomains,
                "t_span": list(self.t_span),
                "z_range": None if self.z_range is None else list(self.z_range),
                "estimate_k": self.estimate_k, "k_init": self.k_init, "k_fixed": self.k_fixed,
                "discrepancy": self.discrepancy, "n_delta_neurons": self.n_delta_neurons,
                "max_iter": self.max_iter, "step_tol": self.step_tol,
                "stagnation_tol": self.stagnation_tol, "rcond": self.rcond}

    @classmethod
    def from_dict(cls, d: dict) -> "HarmonicConfig":
        d = dict(d)
        if "init" in d:
            d["init"] = InitSpec.from_dict(d["init"])
        if "weights" in d:
            d["weights"] = LossWeights(**d["weights"])
        for key in ("t_span", "z_range"):
            if d.get(key) is not None:
                d[key] = tuple(float(v) for v in d[key])
        return cls(**d)


@dataclass
class HarmonicFit:
    t: np.ndarray
    x: np.ndarray
    delta: np.ndarray | None
    k: float
    k_points: np.ndarray
    eq_norm: float
    data_norm: float
    iterations: np.ndarray

    def evaluate_error(self, problem: HarmonicProblem) -> float:
        return float(np.max(np.abs(self.x - problem.truth(self.t))))


def _rhs(k, t):
    """``cos(kt)/k`` and its derivative with respect to ``log k``."""
    c, s = np.cos(k * t), np.sin(k * t)
    return c / k, -(t * s + c / k)


def fit(data: HarmonicData, config: HarmonicConfig | None = None, seed: int = 0,
        t_eval=None) -> HarmonicFit:
    """Fit ``x`` (and ``k``, ``delta`` when enabled) to the data and the equation."""
    cfg = config or HarmonicConfig()
    init = cfg.init.with_seed(seed)
    basis = build_basis(cfg.n_neurons, cfg.activation, init, stream(init.seed, "basis", 0))
    dbasis = (build_basis(cfg.n_delta_neurons, cfg.activation, init, stream(init.seed, "basis", 1))
              if cfg.discrepancy else None)
    lam1, lam2 = cfg.weights.lambda_eq, cfg.weights.lambda_data
    t_obs = np.asarray(data.t, dtype=float)
    x_obs = np.asarray(data.x, dtype=float)
    if t_eval is None:
        t_eval = np.linspace(*cfg.t_span, 201)
    t_eval = np.asarray(t_eval, dtype=float)
    n_sub = cfg.n_subdomains
    h = (cfg.t_span[1] - cfg.t_span[0]) / n_sub

    def sub_index(t):
        # (t_j, t_j + h]; the left end of the span belongs to the first subdomain
        j = np.ceil((t - cfg.t_span[0]) / h - 1e-12).astype(int) - 1
        return np.clip(j, 0, n_sub - 1)

    if lam1 == 0 and t_obs.size == 0:
        raise EstimationError("ill-posed: no observations and physics switched off")
    L = basis.size
    Ld = 0 if dbasis is None else dbasis.size
    nk = 1 if cfg.estimate_k else 0
    u = np.zeros(L + nk + Ld)
    if nk:
        u[L] = np.log(cfg.k_init)
    x0 = float(data.x0)
    j_obs, j_eval = sub_index(t_obs), sub_index(t_eval)
    x_out = np.empty(t_eval.size)
    d_out = np.empty(t_eval.size) if dbasis is not None else None
    k_pts = np.empty(n_sub)
    iters = np.empty(n_sub, dtype=int)
    eq_sq = data_sq = 0.0
    for j in range(n_sub):
        tm = cfg.timemap(j)
        tc = np.linspace(tm.t0, tm.tf, cfg.n_collocation)
        sig0, _ = eval_features(basis, tm, tm.t0)
        _, D = eval_features(basis, tm, tc)
        to = t_obs[j_obs == j]
        xo = x_obs[j_obs == j]
        So = np.atleast_2d(eval_features(basis, tm, to)[0]) - sig0 if to.size else np.zeros((0, L))
        Sd = eval_features(dbasis, tm, tc)[0] if dbasis is not None else None
        nc, no = tc.size, to.size

        def residual(u, D=D, So=So, Sd=Sd, tc=tc, xo=xo, x0=x0, nc=nc, no=no):
            beta = u[:L]
            logk = u[L] if nk else np.log(cfg.k_fixed)
            f, df = _rhs(np.exp(logk), tc)
            r = np.empty(nc + no)
            J = np.zeros((nc + no, u.size))
            eq = D @ beta - f
            J[:nc, :L] = lam1 * D
            if nk:
                J[:nc, L] = -lam1 * df
            if Sd is not None:
                eq = eq - Sd @ u[L + nk:]
                J[:nc, L + nk:] = -lam1 * Sd
            r[:nc] = lam1 * eq
            r[nc:] = lam2 * (xo - (So @ beta + x0))
            J[nc:, :L] = -lam2 * So
            return r, J

        u, diag = gauss_newton(residual, u, cfg.max_iter, cfg.step_tol, cfg.stagnation_tol,
                               cfg.rcond)
        r, _ = residual(u)
        eq_sq += float(r[:nc] @ r[:nc])
        data_sq += float(r[nc:] @ r[nc:])
        iters[j] = diag.iterations
        k_pts[j] = np.exp(u[L]) if nk else cfg.k_fixed
        sel = j_eval == j
        if np.any(sel):
            sig, _ = eval_features(basis, tm, t_eval[sel])
            x_out[sel] = (np.atleast_2d(sig) - sig0) @ u[:L] + x0
            if d_out is not None:
                d_out[sel] = np.atleast_2d(eval_features(dbasis, tm, t_eval[sel])[0]) @ u[L + nk:]
        sig_end, _ = eval_features(basis, tm, tm.tf)
        x0 = float((sig_end - sig0) @ u[:L] + x0)
    return HarmonicFit(t_eval, x_out, d_out, float(k_pts.mean()), k_pts,
                       float(np.sqrt(eq_sq)), float(np.sqrt(data_sq)), iters)


def forward_solve(config: HarmonicConfig, k: float = 1.0, x0: float = 10.0, seed: int = 0,
                  t_eval=None) -> HarmonicFit:
    """Physics-only solution with ``k`` known, in the fitter's own function class."""
    cfg = replace(config, estimate_k=False, k_fixed=k, discrepancy=False)
    return fit(HarmonicData(np.zeros(0), np.zeros(0), 0.0, x0), cfg, seed, t_eval)


# ---------------------------------------------------------------------------
# ensembles


@dataclass
class HarmonicEnsemble:
    ensemble: EnsembleResult
    bands: UncertaintyBands

    @property
    def k_values(self) -> np.ndarray:
        return self.ensemble.param("k")

    @property
    def k_mean(self) -> float:
        return float(self.k_values.mean())

    @property
    def k_std(self) -> float:
        return float(self.k_values.std(ddof=1))

    def band_width(self, name: str = "x", window: tuple[float, float] | None = None) -> float:
        """Time-averaged 5-95% band width, optionally restricted to ``[lo, hi)``."""
        w = self.bands.column("q95", name) - self.bands.column("q05", name)
        return float(w[_window(self.bands.t, window)].mean())

    def mean_abs_error(self, truth, name: str = "x",
                       window: tuple[float, float] | None = None) -> float:
        sel = _window(self.bands.t, window)
        err = self.bands.column("mean", name)[sel] - truth(self.bands.t[sel])
        return float(np.mean(np.abs(err)))

    def data_norms(self) -> np.ndarray:
        return np.array([e["data_norm"] for e in self.ensemble.extras])


def _window(t, window):
    if window is None:
        return np.ones(t.size, dtype=bool)
    sel = (t >= window[0]) & (t < window[1])
    if not np.any(sel):
        raise ConfigurationError(f"window {window} contains no grid points")
    return sel


def harmonic_replicate(index: int, noise_seed: int, basis_seed: int, *,
                       problem: HarmonicProblem, config: HarmonicConfig, times_seed: int,
                       t_eval=None) -> Replicate:
    """Fresh noise on a fixed sampling pattern, fitted with a fresh basis."""
    data = make_data(problem, noise_seed, times_seed=times_seed)
    f = fit(data, config, basis_seed, t_eval)
    values = {"x": f.x}
    if f.delta is not None:
        values["delta"] = f.delta
    return Replicate(f.t, values, {"k": f.k},
                     {"data_norm": f.data_norm, "eq_norm": f.eq_norm,
                      "iterations": float(f.iterations.mean())})


def run_harmonic_ensemble(problem: HarmonicProblem, config: HarmonicConfig,
                          ensemble: EnsembleSpec, times_seed: int | None = None,
                          t_eval=None) -> HarmonicEnsemble:
    ensemble.require_spread()
    ts = ensemble.base_seed if times_seed is None else times_seed
    fn = partial(harmonic_replicate, problem=problem, config=config, times_seed=ts,
                 t_eval=t_eval)
    ens = run_ensemble(ensemble, fn)
    return HarmonicEnsemble(ens, decompose(ens, {"x": problem.noise_std}, assume_exact=("delta",)))


def estimate_k(problem: HarmonicProblem | None = None, weights: LossWeights | None = None,
               ensemble: EnsembleSpec | None = None, B: float = 1.0,
               config: HarmonicConfig | None = None, init: InitSpec | None = None,
               times_seed: int | None = None) -> HarmonicEnsemble:
    """Joint inference of ``x(t)`` on the full span and ``k`` over an ensemble.

    Each replicate draws new noise and a new random basis with weights from
    ``U[-B, B]`` (or ``init``); the sampling times stay fixed.
    """
    problem = problem or HarmonicProblem()
    cfg = config or HarmonicConfig(t_span=problem.t_span)
    cfg = replace(cfg, estimate_k=True,
                  init=init if init is not None else InitSpec.uniform_symmetric(B))
    if weights is not None:
        cfg = replace(cfg, weights=weights)
    return run_harmonic_ensemble(problem, cfg, ensemble or EnsembleSpec(200), times_seed)


@dataclass
class SweepPoint:
    lambda_eq: float
    result: HarmonicEnsemble
    gap_error: float
    gap_band: float
    band: float


def lambda_sweep(problem: HarmonicProblem, lambdas, ensemble: EnsembleSpec | None = None,
                 config: HarmonicConfig | None = None, lambda_data: float = 1.0) -> list[SweepPoint]:
    """Reconstruction bands for several equation weights with the data weight fixed.

    ``k`` is estimated jointly unless the config says otherwise.  Gap metrics
    use ``problem.gap`` (or the whole data span when there is no gap).
    """
    cfg = replace(config or HarmonicConfig(t_span=problem.t_span), discrepancy=False)
    window = problem.gap if problem.gap is not None else problem.data_span
    out = []
    for lam in lambdas:
        if lam < 0:
            raise ConfigurationError("equation weight must be non-negative")
        c = replace(cfg, weights=LossWeights(float(lam), lambda_data))
        res = run_harmonic_ensemble(problem, c, ensemble or EnsembleSpec(50))
        out.append(SweepPoint(float(lam), res, res.mean_abs_error(problem.truth, window=window),
                              res.band_width(window=window), res.band_width()))
    return out


DENSE_DISCREPANCY_CONFIG = HarmonicConfig(n_neurons=15, n_collocation=31, n_subdomains=10,
                                    estimate_k=False, k_fixed=1.0, discrepancy=True,
                                    n_delta_neurons=15)


def learn_harmonic_discrepancy(problem: HarmonicProblem | None = None,
                               ensemble: EnsembleSpec | None = None,
                               config: HarmonicConfig | None = None,
                               misspecified: bool = False) -> HarmonicEnsemble:
    """Linear equation plus algebraic ``delta(t)`` fitted to nonlinear-model data.

    ``k`` is fixed at 1.  ``misspecified=True`` switches the discrepancy off so
    that the linear equation alone has to explain the data.
    """
    problem = problem or HarmonicProblem(model="nonlinear", data_span=(0.0, 10.0), n_obs=100)
    cfg = config or HarmonicConfig(t_span=problem.t_span)
    cfg = replace(cfg, estimate_k=False, k_fixed=1.0, discrepancy=not misspecified)
    return run_harmonic_ensemble(problem, cfg, ensemble or EnsembleSpec(50))


def fit_discrepancy(data: HarmonicData, config: HarmonicConfig | None = None, seed: int = 0,
                    t_eval=None) -> HarmonicFit:
    """Single discrepancy fit (``k`` fixed at 1) on given data.

    The default marches ten subdomains, which resolves ``delta`` far more
    accurately than one global basis when the data are dense and exact.
    """
    cfg = replace(config or DENSE_DISCREPANCY_CONFIG, estimate_k=False, k_fixed=1.0, discrepancy=True)
    return fit(data, cfg, seed, t_eval)
