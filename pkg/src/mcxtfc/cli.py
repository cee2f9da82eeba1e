"""Batch experiment driver: ``simulate``, ``run`` and ``report`` subcommands.

A run is described by a :class:`RunConfig` stored as JSON.  Every run
directory holds the config it was produced from, so ``run --config
<dir>/config.json`` repeats it and rewrites identical CSV files.
"""

from __future__ import annotations

import argparse
import csv
import enum
import json
import os
import sys
import time
from dataclasses import dataclass, field, fields, replace
from functools import partial
from pathlib import Path

import numpy as np

from .basis import ConfigurationError, InitSpec
from .cvsim6 import (FLOWS, PRESSURES, VOLUMES, CvSimParams, PulmResistanceModel,
                     periodic_trace, state_trace_flows, write_trace_csv)
from .harmonic import (HarmonicConfig, HarmonicEnsemble, HarmonicProblem, estimate_k,
                       lambda_sweep, learn_harmonic_discrepancy, oracle_discrepancy)
from .synth import InputError, ScenarioSpec, corrupt, scenario, write_observations_csv
from .uq import (EnsembleError, EnsembleSpec, correlation_snapshot, cov_summary,
                 cvsim_replicate, decompose, run_ensemble)
from .xtfc import CollocationGrid, EstimatorConfig, LossWeights, cvsim_config

OUTPUT_ROOT_ENV = "MCXTFC_OUTPUT_ROOT"
SCHEMA = "mcxtfc-run/1"

UNITS = {**{n: "mmHg" for n in PRESSURES}, **{n: "mL/s" for n in FLOWS},
         **{n: "mL" for n in VOLUMES}, "delta": "mL/s", "x": "1", "r_pv": "Barye*s/mL",
         "c_a": "mL/Barye", "k": "1/s"}

EXIT_OK, EXIT_USAGE, EXIT_ENSEMBLE = 0, 2, 3


class Experiment(str, enum.Enum):
    SIMULATE_CVSIM = "simulate_cvsim"
    HARMONIC = "harmonic"
    HARMONIC_DISCREPANCY = "harmonic_discrepancy"
    LAMBDA_SWEEP = "lambda_sweep"
    ABLATION = "ablation"
    PULMONARY_DISCREPANCY = "pulmonary_discrepancy"
    INIT_ROBUSTNESS = "init_robustness"


PULMONARY_VARIANTS = ("linear", "algebraic", "inductive")

# initial-weight distributions compared in the robustness experiment
INIT_DISTRIBUTIONS = {
    "uniform(-1,0)": InitSpec.uniform_range(-1.0, 0.0),
    "normal(0,1)": InitSpec.normal(0.0, 1.0),
    "exponential(2)": InitSpec.exponential(2.0),
    "normal(0,10)": InitSpec.normal(0.0, 10.0),
}


@dataclass
class RunConfig:
    """Everything needed to repeat a run.

    ``grid``/``weights`` left as ``None`` select the experiment's defaults.
    ``harmonic`` holds the benchmark settings: ``problem`` (problem fields),
    ``B``, ``lambdas`` and ``misspecified``.
    """

    experiment: Experiment = Experiment.ABLATION
    params: dict = field(default_factory=dict)
    scenario: str = "Sc5"
    variant: str = "algebraic"
    preset: str = "estimation"
    grid: dict | None = None
    weights: dict | None = None
    ensemble: EnsembleSpec = field(default_factory=lambda: EnsembleSpec(20))
    cycles: int = 3
    sample_rate: float | None = None
    theta_init_scale: float = 1.2
    harmonic: dict = field(default_factory=dict)
    output: str | None = None

    def __post_init__(self):
        self.experiment = Experiment(self.experiment)

    def validate(self) -> None:
        """Reject bad settings before any computation starts."""
        if self.experiment is not Experiment.SIMULATE_CVSIM:
            self.ensemble.require_spread()
        if self.cycles < 1:
            raise ConfigurationError("cycles must be at least 1")
        if not self.theta_init_scale > 0:
            raise ConfigurationError("theta_init_scale must be positive")
        if self.variant not in PULMONARY_VARIANTS:
            raise ConfigurationError(f"variant must be one of {PULMONARY_VARIANTS}")
        try:
            scenario(self.scenario)
        except InputError as exc:
            raise ConfigurationError(str(exc)) from None
        self.cvsim_params()
        self.collocation_grid()
        self.loss_weights()
        self.harmonic_problem()
        for lam in self.harmonic.get("lambdas", ()):
            if float(lam) < 0:
                raise ConfigurationError("lambdas must be non-negative")

    def cvsim_params(self) -> CvSimParams:
        known = {f.name for f in fields(CvSimParams)}
        bad = set(self.params) - known
        if bad:
            raise ConfigurationError(f"unknown model parameters {sorted(bad)}")
        try:
            return CvSimParams(**self.params)
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(str(exc)) from None

    def collocation_grid(self) -> CollocationGrid | None:
        if self.grid is None:
            return None
        g = dict(self.grid)
        if "L" in g:
            g["n_neurons"] = g.pop("L")
        try:
            return CollocationGrid(**g)
        except TypeError as exc:
            raise ConfigurationError(f"grid: {exc}") from None

    def loss_weights(self) -> LossWeights | None:
        if self.weights is None:
            return None
        try:
            return LossWeights(**self.weights)
        except TypeError as exc:
            raise ConfigurationError(f"weights: {exc}") from None

    def harmonic_problem(self, **defaults) -> HarmonicProblem:
        d = {**defaults, **self.harmonic.get("problem", {})}
        try:
            return HarmonicProblem.from_dict(d)
        except TypeError as exc:
            raise ConfigurationError(f"harmonic.problem: {exc}") from None

    def to_dict(self) -> dict:
        return {"experiment": self.experiment.value, "params": dict(self.params),
                "scenario": self.scenario, "variant": self.variant, "preset": self.preset,
                "grid": self.grid, "weights": self.weights, "ensemble": self.ensemble.to_dict(),
                "cycles": self.cycles, "sample_rate": self.sample_rate,
                "theta_init_scale": self.theta_init_scale, "harmonic": self.harmonic,
                "output": self.output}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        bad = sorted(set(d) - known)
        if bad:
            raise ConfigurationError(f"unknown config field(s) {bad}")
        d = dict(d)
        try:
            if "experiment" in d:
                d["experiment"] = Experiment(d["experiment"])
            if "ensemble" in d:
                d["ensemble"] = EnsembleSpec.from_dict(d["ensemble"])
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(str(exc)) from None
        return cls(**d)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "RunConfig":
        text = Path(path).read_text()
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
        if not isinstance(d, dict):
            raise ConfigurationError(f"{path}: top level must be an object")
        return cls.from_dict(d)

    def default_output(self) -> Path:
        root = Path(os.environ.get(OUTPUT_ROOT_ENV, "results"))
        tag = {Experiment.ABLATION: self.scenario,
               Experiment.PULMONARY_DISCREPANCY: self.variant}.get(self.experiment)
        name = self.experiment.value + (f"-{tag}" if tag else "")
        return root / f"{name}-seed{self.ensemble.base_seed}"


# ---------------------------------------------------------------------------
# output helpers


def _write_rows(path: Path, header, rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return path


def _write_bands(path: Path, bands) -> Path:
    lo, hi = bands.normal_band()
    rows = []
    for j, n in enumerate(bands.names):
        for i, t in enumerate(bands.t):
            rows.append([float(t), n, UNITS.get(n, "")] +
                        [float(a[i, j]) for a in (bands.mean, bands.epistemic, bands.aleatoric,
                                                  bands.total, bands.q05, bands.q95, lo, hi)])
    return _write_rows(path, ["t [s]", "variable", "unit", "mean", "epistemic_std",
                              "aleatoric_std", "total_std", "q05", "q95", "normal_lo",
                              "normal_hi"], rows)


def _plot_bands(path: Path, bands, names, truth: dict | None = None, title: str = "") -> Path:
    """Mean line with a shaded 5-95% band per variable, one panel each."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "mcxtfc"
    n = len(names)
    cols = min(n, 3)
    rows = -(-n // cols)
    fig, axes = plt.subplots(rows, cols, figsize=(4 * cols, 2.8 * rows), squeeze=False)
    for ax, name in zip(axes.flat, names):
        ax.fill_between(bands.t, bands.column("q05", name), bands.column("q95", name),
                        alpha=0.3, label="5-95%")
        ax.plot(bands.t, bands.column("mean", name), lw=1.2, label="mean")
        if truth and name in truth:
            tt, xx = truth[name]
            ax.plot(tt, xx, "k--", lw=0.8, label="truth")
        ax.set_xlabel("t [s]")
        ax.set_ylabel(f"{name} [{UNITS.get(name, '')}]")
    for ax in list(axes.flat)[n:]:
        ax.set_visible(False)
    axes.flat[0].legend(fontsize=7)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def _plot_lines(path: Path, x, series: dict, xlabel: str, ylabel: str) -> Path:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "mcxtfc"
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for label, y in series.items():
        ax.plot(x, y, marker="o", ms=3, label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=7)
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def _summary(out: Path, cfg: RunConfig, kind: str, metrics: dict, runtime: float) -> dict:
    s = {"schema": SCHEMA, "kind": kind, "experiment": cfg.experiment.value,
         "label": out.name, "metrics": metrics, "runtime_s": runtime}
    (out / "summary.json").write_text(json.dumps(s, indent=2, sort_keys=True) + "\n")
    return s


# ---------------------------------------------------------------------------
# experiments


def _cvsim_scenario(cfg: RunConfig) -> ScenarioSpec:
    sc = scenario(cfg.scenario)
    if cfg.sample_rate is not None:
        sc = replace(sc, sample_rate=float(cfg.sample_rate))
    return sc


def run_simulate(cfg: RunConfig, out: Path) -> dict:
    """Noise-free periodic trace, plus one noisy observation set for the scenario."""
    prm = cfg.cvsim_params()
    rate = cfg.sample_rate or 1000.0
    t0 = time.perf_counter()
    trace = periodic_trace(prm, PulmResistanceModel.linear(), cycles=cfg.cycles, sample_rate=rate)
    write_trace_csv(out / "trace.csv", trace, prm)
    sc = replace(_cvsim_scenario(cfg), sample_rate=cfg.sample_rate or 200.0)
    obs = corrupt(trace, sc, cfg.ensemble.base_seed)
    write_observations_csv(out / "observations.csv", obs)
    flows = state_trace_flows(prm, PulmResistanceModel.linear(), trace).as_array()
    metrics = {"sigmas": obs.sigmas, "peak": {n: float(trace.p[:, j].max())
                                              for j, n in enumerate(PRESSURES)},
               "mean_flow": {n: float(flows[:, j].mean()) for j, n in enumerate(FLOWS)}}
    _plot_lines(out / "trace.svg", trace.t,
                {n: trace.p[:, j] for j, n in enumerate(PRESSURES)}, "t [s]", "pressure [mmHg]")
    return _summary(out, cfg, "simulate", metrics, time.perf_counter() - t0)


def _write_theta_series(path: Path, ens, names) -> None:
    pts = np.stack([np.asarray(e["theta_points"], dtype=float) for e in ens.extras])
    mean, std = pts.mean(axis=0), pts.std(axis=0, ddof=1)
    header = ["subdomain"] + [f"{n}_{s} [{UNITS[n]}]" for n in names for s in ("mean", "std")]
    rows = [[k] + [float(v) for j in range(len(names)) for v in (mean[k, j], std[k, j])]
            for k in range(pts.shape[1])]
    _write_rows(path, header, rows)


def run_ablation(cfg: RunConfig, out: Path) -> dict:
    prm = cfg.cvsim_params()
    pulm = PulmResistanceModel.linear()
    sc = _cvsim_scenario(cfg)
    truth = periodic_trace(prm, pulm, cycles=cfg.cycles, sample_rate=max(sc.sample_rate, 1000.0))
    theta_init = {n: cfg.theta_init_scale * getattr(prm, n) for n in sc.unknown_params}
    over = {"theta_init": theta_init}
    if cfg.collocation_grid() is not None:
        over["grid"] = cfg.collocation_grid()
    if cfg.loss_weights() is not None:
        over["weights"] = cfg.loss_weights()
    est = cvsim_config(cfg.preset, **over)
    fn = partial(cvsim_replicate, truth=truth, scenario=sc, config=est, params=prm, pulm=pulm,
                 t_end=float(truth.t[-1]))
    t0 = time.perf_counter()
    ens = run_ensemble(cfg.ensemble, fn)
    runtime = time.perf_counter() - t0
    sel = ens.t <= truth.t[-1] + 1e-12
    ens = replace(ens, t=ens.t[sel], traces=ens.traces[:, sel])
    bands = decompose(ens, {n: sc.noise.resolve(truth).sigmas[j] for j, n in enumerate(PRESSURES)
                            if sc.observed[j]})
    _write_bands(out / "bands.csv", bands)
    span = min(2, cfg.cycles) * prm.period
    cov = cov_summary(ens, window=(max(float(ens.t[0]), float(ens.t[-1]) - span), float(ens.t[-1])))
    cov.write_csv(out / "cov.csv")
    if ens.n_ok >= 3:
        correlation_snapshot(ens, prm.t_systole, PRESSURES).write_csv(out / "correlation.csv")
    _write_rows(out / "params.csv", ["replicate"] + [f"{n} [{UNITS[n]}]" for n in ens.param_names],
                [[int(i)] + [float(v) for v in row] for i, row in zip(ens.indices, ens.params)])
    if ens.param_names:
        _write_theta_series(out / "theta_series.csv", ens, ens.param_names)
    truth_cols = {n: (truth.t, truth.p[:, j]) for j, n in enumerate(PRESSURES)}
    _plot_bands(out / "pressures.svg", bands, PRESSURES, truth_cols, cfg.scenario)
    _plot_bands(out / "flows.svg", bands, FLOWS)
    metrics = {"scenario": cfg.scenario, "n_ok": ens.n_ok, "n_failed": len(ens.failures),
               "cov": cov.cov, "cov_flagged": list(cov.flagged),
               "params": ens.param_summary(),
               "true_params": {n: getattr(prm, n) for n in ens.param_names},
               "seconds_per_replicate": runtime / cfg.ensemble.n_reps}
    return _summary(out, cfg, "ablation", metrics, runtime)


def run_pulmonary(cfg: RunConfig, out: Path) -> dict:
    """Nonlinear pulmonary truth explained by the linear model with(out) a discrepancy."""
    prm = cfg.cvsim_params()
    nl = PulmResistanceModel.nonlinear()
    rate = cfg.sample_rate or 1000.0
    truth = periodic_trace(prm, nl, cycles=cfg.cycles, sample_rate=rate)
    sc = ScenarioSpec("pulmonary", scenario("Sc5").observed, (), rate)
    est = EstimatorConfig(grid=cfg.collocation_grid() or CollocationGrid(0.01, 10, 10),
                          weights=cfg.loss_weights() or LossWeights(1.0, 1.0))
    learn = None if cfg.variant == "linear" else cfg.variant
    fn = partial(cvsim_replicate, truth=truth, scenario=sc, config=est, params=prm,
                 pulm=nl, model_pulm=PulmResistanceModel.linear(), learn=learn,
                 t_end=float(truth.t[-1]))
    t0 = time.perf_counter()
    ens = run_ensemble(cfg.ensemble, fn)
    runtime = time.perf_counter() - t0
    sel = ens.t <= truth.t[-1] + 1e-12
    ens = replace(ens, t=ens.t[sel], traces=ens.traces[:, sel])
    bands = decompose(ens)
    _write_bands(out / "bands.csv", bands)
    q_true = state_trace_flows(prm, nl, truth).as_array()[:, 5]
    p_true = truth.at(ens.t)
    bias = {n: float(np.mean(bands.column("mean", n) - p_true[:, j]))
            for j, n in enumerate(PRESSURES)}
    width = bands.column("q95", "Q_pv") - bands.column("q05", "Q_pv")
    truth_cols = {n: (truth.t, truth.p[:, j]) for j, n in enumerate(PRESSURES)}
    truth_cols["Q_pv"] = (truth.t, q_true)
    _plot_bands(out / "pressures.svg", bands, PRESSURES, truth_cols, cfg.variant)
    _plot_bands(out / "pulmonary_flow.svg", bands, ("Q_pv",), truth_cols, cfg.variant)
    metrics = {"variant": cfg.variant, "n_ok": ens.n_ok, "n_failed": len(ens.failures),
               "mean_bias": bias, "q_pv_band_width": float(width.mean())}
    return _summary(out, cfg, "pulmonary", metrics, runtime)


def _harmonic_config(cfg: RunConfig, problem: HarmonicProblem) -> HarmonicConfig:
    hc = HarmonicConfig.from_dict(cfg.harmonic.get("config", {}))
    hc = replace(hc, t_span=problem.t_span)
    w = cfg.loss_weights()
    return replace(hc, weights=w) if w is not None else hc


def _k_metrics(res: HarmonicEnsemble) -> dict:
    return {"k_mean": res.k_mean, "k_std": res.k_std, "n_ok": res.ensemble.n_ok}


def _harmonic_outputs(out: Path, res: HarmonicEnsemble, problem: HarmonicProblem, names=("x",)):
    _write_bands(out / "bands.csv", res.bands)
    truth = {"x": (res.bands.t, problem.truth(res.bands.t))}
    if "delta" in names:
        truth["delta"] = (res.bands.t, oracle_discrepancy(problem.k, problem.x0, res.bands.t))
    _plot_bands(out / "harmonic.svg", res.bands, names, truth)


def run_harmonic(cfg: RunConfig, out: Path) -> dict:
    problem = cfg.harmonic_problem()
    t0 = time.perf_counter()
    res = estimate_k(problem, ensemble=cfg.ensemble, B=float(cfg.harmonic.get("B", 1.0)),
                     config=_harmonic_config(cfg, problem))
    runtime = time.perf_counter() - t0
    _harmonic_outputs(out, res, problem)
    _write_rows(out / "k_values.csv", ["replicate", "k [1/s]"],
                [[int(i), float(k)] for i, k in zip(res.ensemble.indices, res.k_values)])
    label = f"B={cfg.harmonic.get('B', 1.0)}"
    return _summary(out, cfg, "k_table", {"rows": {label: _k_metrics(res)}}, runtime)


def run_init_robustness(cfg: RunConfig, out: Path) -> dict:
    problem = cfg.harmonic_problem()
    hc = _harmonic_config(cfg, problem)
    rows = {}
    t0 = time.perf_counter()
    for label, init in INIT_DISTRIBUTIONS.items():
        res = estimate_k(problem, ensemble=cfg.ensemble, config=hc, init=init)
        rows[label] = _k_metrics(res)
    runtime = time.perf_counter() - t0
    _write_rows(out / "k_table.csv", ["init", "k_mean [1/s]", "k_std [1/s]", "n_ok"],
                [[k, v["k_mean"], v["k_std"], v["n_ok"]] for k, v in rows.items()])
    return _summary(out, cfg, "k_table", {"rows": rows}, runtime)


def run_lambda_sweep(cfg: RunConfig, out: Path) -> dict:
    problem = cfg.harmonic_problem(gap=(2.0, 3.5))
    lambdas = [float(v) for v in cfg.harmonic.get("lambdas", (0.0, 0.1, 1.0, 10.0, 100.0))]
    t0 = time.perf_counter()
    pts = lambda_sweep(problem, lambdas, cfg.ensemble, _harmonic_config(cfg, problem))
    runtime = time.perf_counter() - t0
    _write_rows(out / "sweep.csv", ["lambda_eq", "gap_mae", "gap_band_width", "band_width"],
                [[p.lambda_eq, p.gap_error, p.gap_band, p.band] for p in pts])
    for p in pts:
        _write_bands(out / f"bands_lambda_{p.lambda_eq:g}.csv", p.result.bands)
    _plot_lines(out / "sweep.svg", [p.lambda_eq for p in pts],
                {"gap MAE": [p.gap_error for p in pts], "gap band": [p.gap_band for p in pts]},
                "lambda_eq", "value")
    metrics = {"points": [{"lambda_eq": p.lambda_eq, "gap_mae": p.gap_error,
                           "gap_band_width": p.gap_band, "band_width": p.band} for p in pts]}
    return _summary(out, cfg, "lambda_sweep", metrics, runtime)


def run_harmonic_discrepancy(cfg: RunConfig, out: Path) -> dict:
    problem = cfg.harmonic_problem(model="nonlinear", data_span=(0.0, 10.0), n_obs=100)
    misspecified = bool(cfg.harmonic.get("misspecified", False))
    hc = _harmonic_config(cfg, problem) if cfg.harmonic.get("config") or cfg.weights else None
    t0 = time.perf_counter()
    res = learn_harmonic_discrepancy(problem, cfg.ensemble, hc, misspecified)
    runtime = time.perf_counter() - t0
    names = ("x",) if misspecified else ("x", "delta")
    _harmonic_outputs(out, res, problem, names)
    metrics = {"misspecified": misspecified, "n_ok": res.ensemble.n_ok,
               "median_data_residual": float(np.median(res.data_norms())),
               "x_mae": res.mean_abs_error(problem.truth)}
    if not misspecified:
        metrics["delta_mae"] = res.mean_abs_error(
            lambda t: oracle_discrepancy(problem.k, problem.x0, t), "delta")
    return _summary(out, cfg, "harmonic_discrepancy", metrics, runtime)


RUNNERS = {
    Experiment.SIMULATE_CVSIM: run_simulate,
    Experiment.ABLATION: run_ablation,
    Experiment.PULMONARY_DISCREPANCY: run_pulmonary,
    Experiment.HARMONIC: run_harmonic,
    Experiment.INIT_ROBUSTNESS: run_init_robustness,
    Experiment.LAMBDA_SWEEP: run_lambda_sweep,
    Experiment.HARMONIC_DISCREPANCY: run_harmonic_discrepancy,
}


def execute(cfg: RunConfig, out: Path | None = None) -> tuple[Path, dict]:
    """Validate, run and persist one experiment; returns the run directory and summary."""
    cfg.validate()
    out = Path(out or cfg.output or cfg.default_output())
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    return out, RUNNERS[cfg.experiment](cfg, out)


# ---------------------------------------------------------------------------
# report


def collect_summaries(root) -> list[tuple[Path, dict]]:
    """All run summaries below ``root``; mixed or foreign schemas raise."""
    if not Path(root).is_dir():
        raise ConfigurationError(f"{root} is not a directory")
    found, bad = [], []
    for p in sorted(Path(root).rglob("summary.json")):
        try:
            s = json.loads(p.read_text())
        except json.JSONDecodeError:
            bad.append(str(p))
            continue
        if not isinstance(s, dict) or s.get("schema") != SCHEMA:
            bad.append(str(p))
        else:
            found.append((p, s))
    if bad:
        raise ConfigurationError("incompatible result files: " + ", ".join(bad))
    return found


def _format_table(header, rows) -> str:
    cells = [list(map(str, header))] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def report(root) -> str:
    summaries = collect_summaries(root)
    if not summaries:
        return "no results"
    parts = []
    ablations = [s for _, s in summaries if s["kind"] == "ablation"]
    if ablations:
        ablations.sort(key=lambda s: (s["metrics"]["scenario"], s["label"]))
        cols = [s["metrics"]["scenario"] for s in ablations]
        names = [n for n in PRESSURES + FLOWS + VOLUMES if n in ablations[0]["metrics"]["cov"]]
        rows = [[n] + [f"{100 * s['metrics']['cov'].get(n, float('nan')):.2f}" for s in ablations]
                for n in names]
        parts.append("CoV [%]\n" + _format_table(["variable"] + cols, rows))
        prow = []
        for s in ablations:
            for n, v in s["metrics"]["params"].items():
                prow.append([s["metrics"]["scenario"], n, f"{v['mean']:.6g}", f"{v['std']:.3g}",
                             f"{s['metrics']['true_params'][n]:.6g}"])
        if prow:
            parts.append("parameters\n" + _format_table(
                ["scenario", "param", "mean", "std", "true"], prow))
    ktab = [s for _, s in summaries if s["kind"] == "k_table"]
    if ktab:
        rows = [[s["label"], label, f"{r['k_mean']:.4f}", f"{r['k_std']:.4f}", r["n_ok"]]
                for s in ktab for label, r in s["metrics"]["rows"].items()]
        parts.append("k estimates\n" + _format_table(["run", "method", "mean", "std", "M"], rows))
    other = [s for _, s in summaries if s["kind"] not in ("ablation", "k_table")]
    if other:
        parts.append("other runs\n" + _format_table(
            ["run", "kind", "runtime [s]"],
            [[s["label"], s["kind"], f"{s['runtime_s']:.1f}"] for s in other]))
    return "\n\n".join(parts)


# ---------------------------------------------------------------------------
# argument parsing


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mcxtfc", description="Monte-Carlo X-TFC experiments")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, help="run config (JSON)")
        p.add_argument("--seed", type=int, help="base seed")
        p.add_argument("--out", type=Path, help=f"output directory (default under ${OUTPUT_ROOT_ENV})")
        p.add_argument("--parallel", type=int, default=None,
                       help="worker processes (default: number of hardware threads)")

    sim = sub.add_parser("simulate", help="simulate the circulation model")
    common(sim)
    sim.add_argument("--cycles", type=int)
    sim.add_argument("--scenario")

    run = sub.add_parser("run", help="run an experiment")
    run.add_argument("experiment", nargs="?", help="; ".join(e.value for e in Experiment))
    common(run)
    run.add_argument("--reps", type=int, help="Monte-Carlo replicates")
    run.add_argument("--scenario")
    run.add_argument("--variant", choices=PULMONARY_VARIANTS)
    run.add_argument("--preset")
    run.add_argument("--cycles", type=int)
    run.add_argument("--B", type=float, dest="B", help="uniform weight bound")

    rep = sub.add_parser("report", help="summarise result directories")
    rep.add_argument("results", type=Path)
    return ap


def _config_from_args(args, experiment: Experiment | None) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if experiment is not None and (not args.config or args.command == "simulate"):
        cfg.experiment = experiment
    elif experiment is not None and experiment is not cfg.experiment:
        raise ConfigurationError(f"config is for {cfg.experiment.value}, not {experiment.value}")
    ens = cfg.ensemble
    if getattr(args, "reps", None) is not None:
        ens = replace(ens, n_reps=args.reps)
    if args.seed is not None:
        ens = replace(ens, base_seed=args.seed)
    if args.parallel is not None:
        ens = replace(ens, parallel=args.parallel)
    elif not args.config:
        ens = replace(ens, parallel=os.cpu_count() or 1)
    cfg.ensemble = ens
    for key in ("scenario", "variant", "preset", "cycles"):
        v = getattr(args, key, None)
        if v is not None:
            setattr(cfg, key, v)
    if getattr(args, "B", None) is not None:
        cfg.harmonic = {**cfg.harmonic, "B": args.B}
    return cfg


def main(argv=None) -> int:
    ap = _parser()
    args = ap.parse_args(argv)
    try:
        if args.command == "report":
            print(report(args.results))
            return EXIT_OK
        if args.command == "simulate":
            experiment = Experiment.SIMULATE_CVSIM
        elif args.experiment is not None:
            try:
                experiment = Experiment(args.experiment)
            except ValueError:
                raise ConfigurationError(f"unknown experiment {args.experiment!r}") from None
        elif args.config is not None:
            experiment = None
        else:
            raise ConfigurationError("give an experiment name or --config")
        cfg = _config_from_args(args, experiment)
        out, summary = execute(cfg, args.out)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except EnsembleError as exc:
        print(f"ensemble failed: {exc}", file=sys.stderr)
        return EXIT_ENSEMBLE
    print(json.dumps({"output": str(out), **summary["metrics"]}, indent=2, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
