"""Random-projection feature maps and constrained expressions.

A :class:`RandomBasis` holds frozen input weights and biases for a single
hidden layer.  A :class:`ConstrainedExpression` combines a basis with output
weights so that the represented function hits its initial value exactly for
any choice of weights.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .rng import stream


class ConfigurationError(ValueError):
    """Invalid basis or sampling configuration."""


class ActivationKind(str, enum.Enum):
    TANH = "tanh"
    SOFTPLUS = "softplus"
    LOGISTIC = "logistic"
    SINE = "sine"
    ARCTAN = "arctan"
    SWISH = "swish"


def _logistic(x):
    # split on sign so exp never overflows
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation(kind: ActivationKind, x):
    """Return ``(value, first derivative)`` of the activation at ``x``."""
    x = np.asarray(x, dtype=float)
    kind = ActivationKind(kind)
    if kind is ActivationKind.TANH:
        v = np.tanh(x)
        return v, 1.0 - v * v
    if kind is ActivationKind.SOFTPLUS:
        return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x))), _logistic(x)
    if kind is ActivationKind.LOGISTIC:
        s = _logistic(x)
        return s, s * (1.0 - s)
    if kind is ActivationKind.SINE:
        return np.sin(x), np.cos(x)
    if kind is ActivationKind.ARCTAN:
        xc = np.clip(x, -1e150, 1e150)           # x*x would overflow beyond this
        return np.arctan(x), 1.0 / (1.0 + xc * xc)
    if kind is ActivationKind.SWISH:
        s = _logistic(x)
        return x * s, s + x * s * (1.0 - s)
    raise ConfigurationError(f"unknown activation {kind!r}")


class Distribution(str, enum.Enum):
    UNIFORM_SYMMETRIC = "uniform_symmetric"
    UNIFORM_RANGE = "uniform_range"
    NORMAL = "normal"
    EXPONENTIAL = "exponential"


@dataclass(frozen=True)
class InitSpec:
    """Distribution used to draw input weights and biases.

    ``params`` holds the distribution parameters: ``(B,)`` for
    ``UNIFORM_SYMMETRIC``, ``(lo, hi)`` for ``UNIFORM_RANGE``, ``(mean, std)``
    for ``NORMAL`` and ``(mean,)`` for ``EXPONENTIAL``.
    """

    distribution: Distribution = Distribution.UNIFORM_SYMMETRIC
    params: tuple[float, ...] = (1.0,)
    seed: int = 0

    @classmethod
    def uniform_symmetric(cls, bound: float, seed: int = 0) -> "InitSpec":
        return cls(Distribution.UNIFORM_SYMMETRIC, (float(bound),), seed)

    @classmethod
    def uniform_range(cls, lo: float, hi: float, seed: int = 0) -> "InitSpec":
        return cls(Distribution.UNIFORM_RANGE, (float(lo), float(hi)), seed)

    @classmethod
    def normal(cls, mean: float, std: float, seed: int = 0) -> "InitSpec":
        return cls(Distribution.NORMAL, (float(mean), float(std)), seed)

    @classmethod
    def exponential(cls, mean: float, seed: int = 0) -> "InitSpec":
        return cls(Distribution.EXPONENTIAL, (float(mean),), seed)

    def with_seed(self, seed: int) -> "InitSpec":
        return InitSpec(self.distribution, self.params, int(seed))

    def validate(self) -> None:
        d = Distribution(self.distribution)
        p = self.params
        expected = {
            Distribution.UNIFORM_SYMMETRIC: 1,
            Distribution.UNIFORM_RANGE: 2,
            Distribution.NORMAL: 2,
            Distribution.EXPONENTIAL: 1,
        }[d]
        if len(p) != expected:
            raise ConfigurationError(f"{d.value} needs {expected} parameter(s), got {len(p)}")
        if not all(np.isfinite(p)):
            raise ConfigurationError(f"non-finite parameters {p}")
        if d is Distribution.UNIFORM_SYMMETRIC and p[0] <= 0:
            raise ConfigurationError(f"uniform bound must be positive, got {p[0]}")
        if d is Distribution.UNIFORM_RANGE and not p[0] < p[1]:
            raise ConfigurationError(f"uniform range needs lo < hi, got {p}")
        if d is Distribution.NORMAL and p[1] <= 0:
            raise ConfigurationError(f"normal std must be positive, got {p[1]}")
        if d is Distribution.EXPONENTIAL and p[0] <= 0:
            raise ConfigurationError(f"exponential mean must be positive, got {p[0]}")

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        d = Distribution(self.distribution)
        p = self.params
        if d is Distribution.UNIFORM_SYMMETRIC:
            return rng.uniform(-p[0], p[0], n)
        if d is Distribution.UNIFORM_RANGE:
            return rng.uniform(p[0], p[1], n)
        if d is Distribution.NORMAL:
            return rng.normal(p[0], p[1], n)
        return rng.exponential(p[0], n)

    def to_dict(self) -> dict:
        return {"distribution": Distribution(self.distribution).value,
                "params": list(self.params), "seed": int(self.seed)}

    @classmethod
    def from_dict(cls, d: dict) -> "InitSpec":
        return cls(Distribution(d["distribution"]), tuple(float(v) for v in d["params"]),
                   int(d.get("seed", 0)))


@dataclass(frozen=True)
class RandomBasis:
    weights: np.ndarray
    biases: np.ndarray
    activation: ActivationKind = ActivationKind.TANH

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        b = np.array(self.biases, dtype=float)
        if w.ndim != 1 or w.shape != b.shape or w.size < 1:
            raise ConfigurationError("weights and biases must be equal-length 1-D arrays")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ConfigurationError("basis entries must be finite")
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "biases", b)
        object.__setattr__(self, "activation", ActivationKind(self.activation))

    @property
    def size(self) -> int:
        return self.weights.size


def build_basis(n_neurons: int, kind: ActivationKind, init: InitSpec,
                rng: np.random.Generator | None = None) -> RandomBasis:
    """Draw ``n_neurons`` weights followed by ``n_neurons`` biases.

    Without an explicit generator the draws come from the basis stream keyed
    by ``init.seed``.
    """
    if int(n_neurons) < 1:
        raise ConfigurationError(f"need at least one neuron, got {n_neurons}")
    init.validate()
    if rng is None:
        rng = stream(init.seed, "basis")
    w = init.sample(int(n_neurons), rng)
    b = init.sample(int(n_neurons), rng)
    return RandomBasis(w, b, kind)


@dataclass(frozen=True)
class TimeMap:
    """Affine map from physical time ``[t0, tf]`` onto ``[z0, zf]``."""

    t0: float
    tf: float
    z0: float = -1.0
    zf: float = 1.0

    def __post_init__(self):
        if not self.t0 < self.tf:
            raise ConfigurationError(f"need t0 < tf, got {self.t0}, {self.tf}")
        if self.z0 == self.zf:
            raise ConfigurationError("degenerate activation domain")

    @property
    def c(self) -> float:
        return (self.zf - self.z0) / (self.tf - self.t0)

    def __call__(self, t):
        return self.z0 + self.c * (np.asarray(t, dtype=float) - self.t0)


def eval_features(basis: RandomBasis, timemap: TimeMap, t):
    """Features and their physical-time derivatives.

    For scalar ``t`` returns two vectors of length L; for an array of times
    returns two ``(n, L)`` matrices.
    """
    z = timemap(t)
    arg = np.multiply.outer(z, basis.weights) + basis.biases
    sig, dsig = activation(basis.activation, arg)
    return sig, timemap.c * basis.weights * dsig


@dataclass(frozen=True)
class ConstrainedExpression:
    basis: RandomBasis
    timemap: TimeMap
    beta: np.ndarray
    x0: float
    _sigma0: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        beta = np.array(self.beta, dtype=float)
        if beta.shape != (self.basis.size,):
            raise ConfigurationError(f"beta must have length {self.basis.size}")
        beta.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        sig0, _ = eval_features(self.basis, self.timemap, self.timemap.t0)
        object.__setattr__(self, "_sigma0", sig0)

    def value(self, t):
        sig, _ = eval_features(self.basis, self.timemap, t)
        return (sig - self._sigma0) @ self.beta + self.x0

    def derivative(self, t):
        _, dsig = eval_features(self.basis, self.timemap, t)
        return dsig @ self.beta


def ce_value(ce: ConstrainedExpression, t):
    return ce.value(t)


def ce_derivative(ce: ConstrainedExpression, t):
    return ce.derivative(t)
