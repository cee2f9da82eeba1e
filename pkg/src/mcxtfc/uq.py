"""Monte-Carlo ensembles and uncertainty summaries.

An ensemble runs one estimation per replicate with its own noise seed and
basis seed.  Both are derived from the base seed and the replicate index, so
results do not depend on execution order or on the number of workers.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path

import numpy as np

from .basis import ConfigurationError
from .cvsim6 import FLOWS, PRESSURES, VOLUMES, CvSimParams, PulmResistanceModel, StateTrace
from .rng import derive_seed
from .synth import ScenarioSpec, corrupt
from .xtfc import CvSimModel, EstimationError, EstimatorConfig, estimate

# failures that count against the ensemble instead of aborting it
REPLICATE_ERRORS = (EstimationError, ArithmeticError, np.linalg.LinAlgError, ValueError)


class EnsembleError(RuntimeError):
    pass


@dataclass(frozen=True)
class EnsembleSpec:
    n_reps: int = 100
    base_seed: int = 0
    resample_noise: bool = True
    resample_basis: bool = True
    max_failure_fraction: float = 0.2
    parallel: int = 1

    def __post_init__(self):
        if self.n_reps < 1:
            raise ConfigurationError("need at least one replicate")
        if self.base_seed < 0:
            raise ConfigurationError("seed must be non-negative")
        if not 0 <= self.max_failure_fraction <= 1:
            raise ConfigurationError("failure fraction must be in [0, 1]")
        if self.parallel < 1:
            raise ConfigurationError("parallel degree must be positive")

    def require_spread(self):
        if self.n_reps < 2:
            raise ConfigurationError("a standard deviation needs at least two replicates")

    def seeds(self, index: int) -> tuple[int, int]:
        """(noise seed, basis seed) of replicate ``index``."""
        n = derive_seed(self.base_seed, "noise", index if self.resample_noise else 0)
        b = derive_seed(self.base_seed, "basis", index if self.resample_basis else 0)
        return n, b

    def to_dict(self) -> dict:
        return {"n_reps": self.n_reps, "base_seed": self.base_seed,
                "resample_noise": self.resample_noise, "resample_basis": self.resample_basis,
                "max_failure_fraction": self.max_failure_fraction, "parallel": self.parallel}

    @classmethod
    def from_dict(cls, d: dict) -> "EnsembleSpec":
        return cls(**d)


@dataclass
class Replicate:
    """One replicate: traces on a shared time grid plus scalar parameters."""

    t: np.ndarray
    values: dict[str, np.ndarray]
    params: dict[str, float] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


@dataclass
class EnsembleResult:
    t: np.ndarray
    names: tuple[str, ...]
    traces: np.ndarray            # (replicates, times, variables)
    param_names: tuple[str, ...]
    params: np.ndarray            # (replicates, parameters)
    indices: np.ndarray           # replicate index of each row
    failures: list = field(default_factory=list)
    extras: list = field(default_factory=list)
    n_requested: int = 0

    @property
    def n_ok(self) -> int:
        return int(self.indices.size)

    def column(self, name: str) -> np.ndarray:
        return self.traces[:, :, self.names.index(name)]

    def param(self, name: str) -> np.ndarray:
        return self.params[:, self.param_names.index(name)]

    def mean(self) -> np.ndarray:
        return self.traces.mean(axis=0)

    def std(self) -> np.ndarray:
        if self.n_ok < 2:
            raise ConfigurationError("a standard deviation needs at least two replicates")
        return self.traces.std(axis=0, ddof=1)

    def param_summary(self) -> dict:
        out = {}
        for j, n in enumerate(self.param_names):
            v = self.params[:, j]
            out[n] = {"mean": float(v.mean()),
                      "std": float(v.std(ddof=1)) if v.size > 1 else float("nan")}
        return out


def _collect(results, n_requested: int, max_fail: float) -> EnsembleResult:
    ok = [(i, r) for i, r in results if isinstance(r, Replicate)]
    failures = [(i, r) for i, r in results if not isinstance(r, Replicate)]
    if len(failures) > max_fail * n_requested or not ok:
        raise EnsembleError(f"{len(failures)} of {n_requested} replicates failed; "
                            f"first: {failures[0][1] if failures else 'none'}")
    t = ok[0][1].t
    names = tuple(ok[0][1].values)
    pnames = tuple(ok[0][1].params)
    for _, r in ok:
        if r.t.shape != t.shape or tuple(r.values) != names:
            raise EnsembleError("replicates returned incompatible traces")
    traces = np.stack([np.column_stack([r.values[n] for n in names]) for _, r in ok])
    params = np.array([[r.params[n] for n in pnames] for _, r in ok]).reshape(len(ok), len(pnames))
    return EnsembleResult(t.copy(), names, traces, pnames, params,
                          np.array([i for i, _ in ok], dtype=int), failures,
                          [r.extra for _, r in ok], n_requested)


def _run_one(fn, spec: EnsembleSpec, index: int):
    noise_seed, basis_seed = spec.seeds(index)
    try:
        return index, fn(index, noise_seed, basis_seed)
    except REPLICATE_ERRORS as exc:
        return index, f"{type(exc).__name__}: {exc}"


def run_ensemble(spec: EnsembleSpec, replicate_fn) -> EnsembleResult:
    """Run ``replicate_fn(index, noise_seed, basis_seed) -> Replicate`` for every index.

    With ``spec.parallel > 1`` the replicates run in worker processes, so the
    function must be picklable (a module-level function or a partial of one).
    Rows are ordered by replicate index either way.
    """
    job = partial(_run_one, replicate_fn, spec)
    if spec.parallel > 1 and spec.n_reps > 1:
        with ProcessPoolExecutor(max_workers=min(spec.parallel, spec.n_reps)) as pool:
            results = list(pool.map(job, range(spec.n_reps)))
    else:
        results = [job(i) for i in range(spec.n_reps)]
    results.sort(key=lambda x: x[0])
    return _collect(results, spec.n_reps, spec.max_failure_fraction)


# ---------------------------------------------------------------------------
# summaries


@dataclass
class UncertaintyBands:
    t: np.ndarray
    names: tuple[str, ...]
    mean: np.ndarray
    epistemic: np.ndarray
    aleatoric: np.ndarray
    total: np.ndarray
    q05: np.ndarray
    q95: np.ndarray

    def column(self, what: str, name: str) -> np.ndarray:
        return getattr(self, what)[:, self.names.index(name)]

    def normal_band(self, z: float = 1.6448536269514722):
        """``mean -/+ z * total`` (5-95% for a Gaussian by default)."""
        return self.mean - z * self.total, self.mean + z * self.total

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lo, hi = self.normal_band()
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "variable", "mean", "epistemic_std", "aleatoric_std", "total_std",
                        "q05", "q95", "normal_lo", "normal_hi"])
            for j, n in enumerate(self.names):
                for i, t in enumerate(self.t):
                    w.writerow([repr(float(t)), n] + [repr(float(a[i, j])) for a in
                               (self.mean, self.epistemic, self.aleatoric, self.total,
                                self.q05, self.q95, lo, hi)])
        return path


def decompose(ens: EnsembleResult, aleatoric: dict | None = None,
              assume_exact=()) -> UncertaintyBands:
    """Epistemic spread across replicates combined in quadrature with noise levels.

    ``aleatoric`` maps variable names to a noise standard deviation; missing
    names and names in ``assume_exact`` get zero.  The replicate quantile band
    is widened where needed so that it always contains the mean.
    """
    aleatoric = aleatoric or {}
    mean = ens.mean()
    epi = ens.std()
    alea = np.zeros_like(epi)
    for j, n in enumerate(ens.names):
        if n not in assume_exact:
            alea[:, j] = float(aleatoric.get(n, 0.0))
    total = np.sqrt(epi * epi + alea * alea)
    q05, q95 = np.quantile(ens.traces, [0.05, 0.95], axis=0)
    return UncertaintyBands(ens.t, ens.names, mean, epi, alea, total,
                            np.minimum(q05, mean), np.maximum(q95, mean))


@dataclass
class CovSummary:
    cov: dict[str, float]
    flagged: tuple[str, ...]
    window: tuple[float, float]

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["variable", "cov", "abs_mean_denominator"])
            for n, v in self.cov.items():
                w.writerow([n, repr(float(v)), int(n in self.flagged)])
        return path


def cov_summary(ens: EnsembleResult, window: tuple[float, float] | None = None,
                period: float | None = None, last_cycles: int = 2) -> CovSummary:
    """Time-averaged coefficient of variation over a window.

    The window is given directly or as the last ``last_cycles`` periods of the
    trace.  Where the mean changes sign (or touches zero) inside the window the
    ratio is replaced by ``mean(std) / mean(|mean|)`` and the variable is flagged.
    """
    if window is None:
        if period is None:
            window = (float(ens.t[0]), float(ens.t[-1]))
        else:
            window = (float(ens.t[-1]) - last_cycles * period, float(ens.t[-1]))
    lo, hi = window
    if lo < ens.t[0] - 1e-12 or hi > ens.t[-1] + 1e-12 or not lo < hi:
        raise ConfigurationError(f"window {window} is outside the trace")
    sel = (ens.t >= lo - 1e-12) & (ens.t <= hi + 1e-12)
    mean = ens.mean()[sel]
    std = ens.std()[sel]
    out, flagged = {}, []
    for j, n in enumerate(ens.names):
        m, s = mean[:, j], std[:, j]
        if np.all(m > 0) or np.all(m < 0):
            out[n] = float(np.mean(s / np.abs(m)))
        else:
            den = float(np.mean(np.abs(m)))
            out[n] = float(np.mean(s) / den) if den > 0 else (0.0 if not np.any(s) else math.inf)
            flagged.append(n)
    return CovSummary(out, tuple(flagged), (lo, hi))


@dataclass
class CorrelationSnapshot:
    t: float
    names: tuple[str, ...]
    matrix: np.ndarray
    zero_variance: tuple[str, ...] = ()

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f"t={self.t!r}"] + list(self.names))
            for n, row in zip(self.names, self.matrix):
                w.writerow([n] + [repr(float(v)) for v in row])
        return path


def correlation_snapshot(ens: EnsembleResult, t: float, names=PRESSURES) -> CorrelationSnapshot:
    """Pearson correlation across replicates at the grid time nearest ``t``."""
    if ens.n_ok < 3:
        raise ConfigurationError("a correlation snapshot needs at least three replicates")
    i = int(np.argmin(np.abs(ens.t - t)))
    X = np.column_stack([ens.traces[:, i, ens.names.index(n)] for n in names])
    Xc = X - X.mean(axis=0)
    s = np.sqrt(np.sum(Xc * Xc, axis=0))
    zero = s <= 1e-300 + 1e-14 * np.max(np.abs(X), axis=0)
    safe = np.where(zero, 1.0, s)
    C = (Xc.T @ Xc) / np.outer(safe, safe)
    C[zero, :] = 0.0
    C[:, zero] = 0.0
    C = np.clip(0.5 * (C + C.T), -1.0, 1.0)
    np.fill_diagonal(C, 1.0)
    return CorrelationSnapshot(float(ens.t[i]), tuple(names), C,
                               tuple(n for n, z in zip(names, zero) if z))


# ---------------------------------------------------------------------------
# CVSim-6 ensembles


def cvsim_replicate(index: int, noise_seed: int, basis_seed: int, *, truth: StateTrace,
                    scenario: ScenarioSpec, config: EstimatorConfig, params: CvSimParams,
                    pulm: PulmResistanceModel, model_pulm: PulmResistanceModel | None = None,
                    learn: str | None = None, t_end: float | None = None) -> Replicate:
    """Corrupt the truth, estimate and return pressures, flows and volumes.

    ``learn`` selects a pulmonary-flow discrepancy (``"algebraic"`` or
    ``"inductive"``), in which case the estimator runs the linear model with no
    unknown parameters.
    """
    from .xtfc import learn_discrepancy

    obs = corrupt(truth, scenario, noise_seed)
    if learn is not None:
        res = learn_discrepancy(params, obs, learn, config, seed=basis_seed, t_end=t_end)
    else:
        model = CvSimModel(params, model_pulm or pulm, scenario.unknown_params)
        res = estimate(model, obs, config, seed=basis_seed, t_end=t_end)
    q, v = res.flows(), res.volumes()
    values = {n: res.p[:, j] for j, n in enumerate(PRESSURES)}
    values.update({n: q[:, j] for j, n in enumerate(FLOWS)})
    values.update({n: v[:, j] for j, n in enumerate(VOLUMES)})
    if res.delta is not None:
        values["delta"] = res.delta
    extra = {"theta_points": res.theta_points, "iterations": float(res.iterations.mean())}
    return Replicate(res.t, values, dict(res.theta), extra)
