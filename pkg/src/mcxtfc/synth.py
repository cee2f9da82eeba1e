"""Synthetic observations: noise model, observation masks and ablation scenarios."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .cvsim6 import PRESSURES, StateTrace
from .rng import stream


class InputError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseModel:
    """Per-variable noise standard deviations.

    ``rule`` is ``"fraction_of_max"`` (sigma = fraction * max|x|) or
    ``"explicit"``.  ``sigmas`` is filled in once the rule has been applied to
    a trace; for the explicit rule it is given directly.
    """

    rule: str = "fraction_of_max"
    fraction: float = 0.02
    sigmas: tuple[float, ...] | None = None

    @classmethod
    def fraction_of_max(cls, fraction: float = 0.02) -> "NoiseModel":
        return cls("fraction_of_max", float(fraction))

    @classmethod
    def explicit(cls, sigmas) -> "NoiseModel":
        return cls("explicit", 0.0, tuple(float(s) for s in sigmas))

    def resolve(self, trace: StateTrace) -> "NoiseModel":
        if self.sigmas is not None:
            return self
        return derive_sigmas(trace, self)

    def as_array(self) -> np.ndarray:
        if self.sigmas is None:
            raise InputError("noise model has not been applied to a trace yet")
        return np.asarray(self.sigmas, dtype=float)

    def to_dict(self) -> dict:
        return {"rule": self.rule, "fraction": self.fraction,
                "sigmas": None if self.sigmas is None else list(self.sigmas)}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseModel":
        s = d.get("sigmas")
        return cls(d.get("rule", "fraction_of_max"), float(d.get("fraction", 0.02)),
                   None if s is None else tuple(float(v) for v in s))


def derive_sigmas(trace: StateTrace, rule: NoiseModel | float = 0.02) -> NoiseModel:
    """sigma_i = fraction * max_t |x_i(t)| for every column of the trace."""
    if len(trace) == 0:
        raise InputError("cannot derive noise levels from an empty trace")
    if not isinstance(rule, NoiseModel):
        rule = NoiseModel.fraction_of_max(rule)
    if rule.rule == "explicit":
        return rule
    sig = rule.fraction * np.max(np.abs(trace.p), axis=0)
    return replace(rule, sigmas=tuple(float(s) for s in sig))


@dataclass(frozen=True)
class ScenarioSpec:
    name: str
    observed: tuple[bool, ...]
    unknown_params: tuple[str, ...] = ("r_pv",)
    sample_rate: float = 200.0
    noise: NoiseModel = field(default_factory=NoiseModel.fraction_of_max)
    perturb_initial_conditions: bool = True

    def __post_init__(self):
        if len(self.observed) != 6:
            raise InputError("observation mask needs six entries")
        bad = set(self.unknown_params) - {"r_pv", "c_a"}
        if bad:
            raise InputError(f"unsupported unknown parameters {sorted(bad)}")
        if self.sample_rate <= 0:
            raise InputError("sample rate must be positive")

    @property
    def observed_names(self) -> tuple[str, ...]:
        return tuple(n for n, m in zip(PRESSURES, self.observed) if m)

    def to_dict(self) -> dict:
        return {"name": self.name, "observed": list(self.observed_names),
                "unknown_params": list(self.unknown_params), "sample_rate": self.sample_rate,
                "noise": self.noise.to_dict(),
                "perturb_initial_conditions": self.perturb_initial_conditions}

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        obs = d["observed"]
        mask = tuple(n in obs for n in PRESSURES) if obs and isinstance(obs[0], str) else tuple(obs)
        return cls(d.get("name", "custom"), mask, tuple(d.get("unknown_params", ("r_pv",))),
                   float(d.get("sample_rate", 200.0)),
                   NoiseModel.from_dict(d.get("noise", {})),
                   bool(d.get("perturb_initial_conditions", True)))


def _mask(*names):
    return tuple(n in names for n in PRESSURES)


SCENARIOS = {
    "Sc1": ScenarioSpec("Sc1", _mask(*PRESSURES)),
    "Sc2": ScenarioSpec("Sc2", _mask("P_l", "P_a", "P_v", "P_r", "P_pa")),
    "Sc3": ScenarioSpec("Sc3", _mask("P_a", "P_v", "P_r", "P_pa")),
    "Sc4": ScenarioSpec("Sc4", _mask("P_a", "P_v", "P_pa")),
    "Sc5": ScenarioSpec("Sc5", _mask("P_a", "P_pa")),
    "Sc6": ScenarioSpec("Sc6", _mask("P_a", "P_pa"), ("r_pv", "c_a")),
}


def scenario(name: str, **overrides) -> ScenarioSpec:
    try:
        base = SCENARIOS[name]
    except KeyError:
        raise InputError(f"unknown scenario {name!r}; expected one of {sorted(SCENARIOS)}") from None
    return replace(base, **overrides) if overrides else base


@dataclass
class ObservationSet:
    """Noisy samples per observed pressure plus the (perturbed) initial state."""

    times: dict[str, np.ndarray]
    values: dict[str, np.ndarray]
    sigmas: dict[str, float]
    initial: np.ndarray
    seed: int = 0

    @property
    def variables(self) -> tuple[str, ...]:
        return tuple(self.times)

    def t_end(self) -> float:
        return max(float(t[-1]) for t in self.times.values()) if self.times else 0.0

    def count(self) -> int:
        return sum(t.size for t in self.times.values())


def observation_times(t_start: float, t_end: float, rate: float) -> np.ndarray:
    n = int(np.floor((t_end - t_start) * rate + 1e-9))
    return t_start + np.arange(n + 1) / rate


def corrupt(trace: StateTrace, spec: ScenarioSpec, seed: int, noise: NoiseModel | None = None,
            times=None) -> ObservationSet:
    """Sample the observed pressures at ``spec.sample_rate`` and add Gaussian noise.

    Every variable gets its own noise stream, so dropping a variable from the
    mask does not change the noise on the others.  With
    ``perturb_initial_conditions`` the initial values of the observed
    pressures are perturbed with the same standard deviations; unobserved ones
    keep their nominal value.
    """
    noise = (noise or spec.noise).resolve(trace)
    sig = noise.as_array()
    if not np.all(np.isfinite(sig)):
        raise InputError("noise standard deviations must be finite")
    if times is None:
        times = observation_times(float(trace.t[0]), float(trace.t[-1]), spec.sample_rate)
    times = np.asarray(times, dtype=float)
    truth = trace.at(times)
    obs_t, obs_v, obs_s = {}, {}, {}
    for i, name in enumerate(PRESSURES):
        if not spec.observed[i]:
            continue
        eps = stream(seed, "noise", i).standard_normal(times.size)
        obs_t[name] = times.copy()
        obs_v[name] = truth[:, i] + sig[i] * eps
        obs_s[name] = float(sig[i])
    x0 = trace.at(trace.t[0])[0].copy()
    if spec.perturb_initial_conditions:
        x0 = x0 + np.where(spec.observed, sig, 0.0) * stream(seed, "ic").standard_normal(6)
    return ObservationSet(obs_t, obs_v, obs_s, x0, seed)


def write_observations_csv(path, obs: ObservationSet) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variable", "t", "value"])
        for name in obs.variables:
            for t, v in zip(obs.times[name], obs.values[name]):
                w.writerow([name, repr(float(t)), repr(float(v))])
    return path


def read_observations_csv(path, initial=None, sigmas=None) -> ObservationSet:
    times: dict[str, list] = {}
    values: dict[str, list] = {}
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            times.setdefault(row["variable"], []).append(float(row["t"]))
            values.setdefault(row["variable"], []).append(float(row["value"]))
    t = {k: np.asarray(v) for k, v in times.items()}
    x = {k: np.asarray(v) for k, v in values.items()}
    for k, v in t.items():
        if np.any(np.diff(v) <= 0):
            raise InputError(f"observation times for {k} must be strictly increasing")
    init = np.full(6, np.nan) if initial is None else np.asarray(initial, dtype=float)
    return ObservationSet(t, x, dict(sigmas or {}), init)
