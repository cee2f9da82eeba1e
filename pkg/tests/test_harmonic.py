import json
from dataclasses import replace

import numpy as np
import pytest

from mcxtfc.basis import ConfigurationError
from mcxtfc.harmonic import (DENSE_DISCREPANCY_CONFIG, HarmonicConfig, HarmonicData,
                             HarmonicProblem, dense_data, estimate_k, fit, fit_discrepancy,
                             forward_solve, lambda_sweep, learn_harmonic_discrepancy, make_data,
                             oracle_discrepancy, oracle_linear, oracle_nonlinear)
from mcxtfc.uq import EnsembleSpec
from mcxtfc.xtfc import EstimationError, LossWeights

# eighth-order central difference weights for offsets 1..4
FD8 = np.array([4 / 5, -1 / 5, 4 / 105, -1 / 280])


def d_dt(f, t, h=1e-2):
    return sum(w * (f(t + j * h) - f(t - j * h)) for j, w in enumerate(FD8, 1)) / h


def test_oracle_initial_values():
    assert oracle_linear(1.0, 10.0, 0.0) == 10.0
    assert oracle_nonlinear(1.0, 10.0, 0.0) == 10.0
    assert d_dt(lambda t: oracle_nonlinear(1.0, 10.0, t), 0.0) == pytest.approx(10.0, rel=1e-10)
    assert oracle_discrepancy(1.0, 10.0, 0.0) == 9.0


def test_oracles_reject_bad_k():
    with pytest.raises(ConfigurationError):
        oracle_linear(0.0, 1.0, 0.0)
    with pytest.raises(ConfigurationError):
        HarmonicProblem(k=-1.0)


@pytest.mark.parametrize("k", [1.0, 0.7, 2.0])
def test_discrepancy_oracle_consistency(k):
    t = np.linspace(0.05, 9.95, 100)
    fd = d_dt(lambda s: oracle_nonlinear(k, 10.0, s), t, h=1e-4) - np.cos(k * t) / k
    d = oracle_discrepancy(k, 10.0, t)
    assert np.max(np.abs(fd - d) / np.maximum(np.abs(d), 1.0)) < 1e-6


@pytest.mark.parametrize("k", [1.0, 0.7, 2.0])
def test_oracles_satisfy_equations(k):
    t = np.linspace(0, 10, 2001)
    lin = d_dt(lambda s: oracle_linear(k, 10.0, s), t) - np.cos(k * t) / k
    x = oracle_nonlinear(k, 10.0, t)
    nl = d_dt(lambda s: oracle_nonlinear(k, 10.0, s), t) - x * np.cos(k * t) / k
    assert np.max(np.abs(lin)) < 1e-10
    assert np.max(np.abs(nl) / np.maximum(x, 1.0)) < 1e-10


def test_make_data_sampling():
    p = HarmonicProblem(gap=(2.0, 3.5))
    d = make_data(p, seed=3)
    assert np.all(np.diff(d.t) > 0) and d.t.min() >= 0 and d.t.max() < 5
    assert not np.any((d.t >= 2.0) & (d.t < 3.5))
    a, b = make_data(p, 1, times_seed=9), make_data(p, 2, times_seed=9)
    assert np.array_equal(a.t, b.t) and not np.array_equal(a.x, b.x)
    exact = make_data(replace(p, noise_std=0.0), 1)
    assert np.array_equal(exact.x, p.truth(exact.t))


def test_forward_solve_matches_oracle():
    f = forward_solve(HarmonicConfig())
    assert f.evaluate_error(HarmonicProblem()) < 1e-6
    assert f.x[0] == 10.0


@pytest.mark.parametrize("sub", [1, 10])
def test_dense_noiseless_k_exact(sub):
    p = HarmonicProblem(noise_std=0.0)
    cfg = HarmonicConfig(n_subdomains=sub, n_neurons=20 if sub == 1 else 15,
                         n_collocation=101 if sub == 1 else 31)
    f = fit(dense_data(p, 201), cfg, seed=0)
    assert abs(f.k - 1.0) < 1e-6
    assert f.evaluate_error(p) < 1e-5


def test_fit_ill_posed():
    empty = HarmonicData(np.zeros(0), np.zeros(0), 0.0, 10.0)
    with pytest.raises(EstimationError):
        fit(empty, HarmonicConfig(weights=LossWeights(0.0, 1.0)))


def test_k_ensemble_statistics_and_coverage():
    res = estimate_k(ensemble=EnsembleSpec(100))
    assert 0.93 <= res.k_mean <= 1.03
    assert 0.03 <= res.k_std <= 0.09
    b = res.bands
    err = np.abs(b.column("mean", "x") - HarmonicProblem().truth(b.t))
    assert np.mean(err <= 2 * b.column("total", "x")) >= 0.9


def test_wider_initialisation_spreads_k():
    a = estimate_k(ensemble=EnsembleSpec(100), B=1.0)
    b = estimate_k(ensemble=EnsembleSpec(100), B=15.0)
    assert b.k_std > a.k_std


def test_ensemble_reproducible():
    a = estimate_k(ensemble=EnsembleSpec(5, 2))
    b = estimate_k(ensemble=EnsembleSpec(5, 2))
    assert a.k_values.tobytes() == b.k_values.tobytes()
    assert a.ensemble.traces.tobytes() == b.ensemble.traces.tobytes()


def test_lambda_sweep_gap_band():
    p = HarmonicProblem(gap=(2.0, 3.5))
    pts = lambda_sweep(p, [0.0, 1.0, 10.0, 100.0], EnsembleSpec(20))
    zero = pts[0]
    assert all(zero.gap_band > q.gap_band for q in pts[1:])
    assert all(np.isfinite(q.gap_error) for q in pts)


def test_lambda_sweep_no_gap_bands_comparable():
    pts = lambda_sweep(HarmonicProblem(), [1.0, 10.0, 100.0], EnsembleSpec(20))
    bands = [q.band for q in pts]
    assert max(bands) <= 2 * min(bands)


def test_strong_physics_fills_gap_with_known_k():
    p = HarmonicProblem(gap=(2.0, 3.5))
    cfg = HarmonicConfig(estimate_k=False, k_fixed=1.0)
    (pt,) = lambda_sweep(p, [100.0], EnsembleSpec(20), config=cfg)
    assert pt.gap_error < 1e-2


def test_lambda_sweep_rejects_negative():
    with pytest.raises(ConfigurationError):
        lambda_sweep(HarmonicProblem(), [-1.0], EnsembleSpec(2))


@pytest.mark.parametrize("n", [201, 1001])
def test_dense_discrepancy_matches_oracle(n):
    p = HarmonicProblem(model="nonlinear", noise_std=0.0)
    t = np.linspace(0, 10, 1001)
    f = fit_discrepancy(dense_data(p, n), t_eval=t)
    assert np.max(np.abs(f.delta - oracle_discrepancy(1.0, 10.0, t))) < 1e-3
    assert np.max(np.abs(f.x - p.truth(t))) < 1e-4


def test_misspecified_model_fails_to_fit():
    p = HarmonicProblem(model="nonlinear", data_span=(0.0, 10.0), n_obs=100, noise_std=0.25)
    with_d = learn_harmonic_discrepancy(p, EnsembleSpec(10))
    without = learn_harmonic_discrepancy(p, EnsembleSpec(10), misspecified=True)
    assert without.data_norms().mean() >= 10 * with_d.data_norms().mean()
    assert "delta" in with_d.ensemble.names and "delta" not in without.ensemble.names
    assert np.all(with_d.bands.column("aleatoric", "delta") == 0)


def test_fewer_observations_widen_gap_band():
    widths = []
    for n in (100, 50, 20):
        p = HarmonicProblem(model="nonlinear", data_span=(0.0, 10.0), n_obs=n, gap=(4.0, 6.0))
        widths.append(learn_harmonic_discrepancy(p, EnsembleSpec(20)).band_width(window=p.gap))
    assert widths[0] <= widths[1] <= widths[2]


def test_config_and_problem_roundtrip():
    cfg = replace(DENSE_DISCREPANCY_CONFIG, weights=LossWeights(2.0, 3.0), z_range=None)
    assert HarmonicConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    p = HarmonicProblem(k=1.5, gap=(1.0, 2.0), model="nonlinear")
    assert HarmonicProblem.from_dict(json.loads(json.dumps(p.to_dict()))) == p


def test_config_validation():
    with pytest.raises(ConfigurationError):
        HarmonicConfig(n_collocation=1)
    with pytest.raises(ConfigurationError):
        HarmonicConfig(k_init=0.0)
    with pytest.raises(ConfigurationError):
        HarmonicProblem(data_span=(0.0, 11.0))
    with pytest.raises(ConfigurationError):
        HarmonicProblem(model="cubic")
