import numpy as np
import pytest

from mcxtfc.cvsim6 import PRESSURES, StateTrace
from mcxtfc.synth import (SCENARIOS, InputError, NoiseModel, ScenarioSpec, corrupt, derive_sigmas,
                          observation_times, read_observations_csv, scenario,
                          write_observations_csv)

TABLE = (2.07, 2.06, 0.14, 0.41, 0.40, 0.24)


def test_sigmas_match_table(trace):
    sig = derive_sigmas(trace, 0.02).as_array()
    np.testing.assert_allclose(sig, TABLE, atol=0.05)


def test_sigma_linearity(trace):
    a = derive_sigmas(trace, 0.02).as_array()
    b = derive_sigmas(trace, 0.04).as_array()
    assert np.array_equal(b, 0.04 * np.max(np.abs(trace.p), axis=0))
    np.testing.assert_allclose(b, 2 * a, rtol=1e-15)


def test_zero_variable_sigma_zero():
    tr = StateTrace(np.linspace(0, 1, 5), np.zeros((5, 6)))
    assert derive_sigmas(tr).as_array().tolist() == [0.0] * 6


def test_empty_trace_rejected():
    with pytest.raises(InputError):
        derive_sigmas(StateTrace(np.zeros(0), np.zeros((0, 6))))


def test_scenario_table():
    obs = {k: set(v.observed_names) for k, v in SCENARIOS.items()}
    assert obs["Sc1"] == set(PRESSURES)
    assert obs["Sc2"] == set(PRESSURES) - {"P_pv"}
    assert obs["Sc3"] == obs["Sc2"] - {"P_l"}
    assert obs["Sc4"] == obs["Sc3"] - {"P_r"}
    assert obs["Sc5"] == {"P_a", "P_pa"} == obs["Sc6"]
    for k in ("Sc1", "Sc2", "Sc3", "Sc4", "Sc5"):
        assert SCENARIOS[k].unknown_params == ("r_pv",)
    assert set(SCENARIOS["Sc6"].unknown_params) == {"r_pv", "c_a"}


def test_scenario_validation():
    with pytest.raises(InputError):
        scenario("Sc9")
    with pytest.raises(InputError):
        ScenarioSpec("x", (True,) * 5)
    with pytest.raises(InputError):
        ScenarioSpec("x", (True,) * 6, ("r_a",))
    with pytest.raises(InputError):
        ScenarioSpec("x", (True,) * 6, sample_rate=0.0)


def test_scenario_roundtrip():
    for sc in SCENARIOS.values():
        assert ScenarioSpec.from_dict(sc.to_dict()) == sc


def test_zero_sigma_exact(short_trace):
    sc = scenario("Sc1", noise=NoiseModel.explicit([0.0] * 6), perturb_initial_conditions=False)
    obs = corrupt(short_trace, sc, seed=3)
    truth = short_trace.at(obs.times["P_l"])
    for i, n in enumerate(PRESSURES):
        assert np.array_equal(obs.values[n], truth[:, i])
    assert np.array_equal(obs.initial, short_trace.p[0])


def test_masking_sc5(short_trace):
    obs = corrupt(short_trace, scenario("Sc5"), seed=0)
    assert set(obs.variables) == {"P_a", "P_pa"}


def test_times_inside_span_and_increasing(short_trace):
    obs = corrupt(short_trace, scenario("Sc2"), seed=0)
    for t in obs.times.values():
        assert t[0] >= short_trace.t[0] and t[-1] <= short_trace.t[-1]
        assert np.all(np.diff(t) > 0)


def test_reproducible(short_trace):
    a = corrupt(short_trace, scenario("Sc1"), seed=5)
    b = corrupt(short_trace, scenario("Sc1"), seed=5)
    c = corrupt(short_trace, scenario("Sc1"), seed=6)
    for n in PRESSURES:
        assert a.values[n].tobytes() == b.values[n].tobytes()
        assert not np.array_equal(a.values[n], c.values[n])
    assert a.initial.tobytes() == b.initial.tobytes()


def test_noise_per_variable_stream(short_trace):
    full = corrupt(short_trace, scenario("Sc1"), seed=9)
    part = corrupt(short_trace, scenario("Sc5"), seed=9)
    assert np.array_equal(full.values["P_a"], part.values["P_a"])


def test_only_observed_initial_conditions_perturbed(short_trace):
    obs = corrupt(short_trace, scenario("Sc5"), seed=1)
    moved = obs.initial != short_trace.p[0]
    assert moved.tolist() == [n in ("P_a", "P_pa") for n in PRESSURES]


def test_noise_statistics():
    n = 100_000
    t = np.linspace(0, 1, n)
    tr = StateTrace(t, np.column_stack([np.sin(5 * t)] * 6))
    sig = [0.5, 1.0, 2.0, 0.1, 0.3, 1.5]
    sc = ScenarioSpec("stat", (True,) * 6, (), sample_rate=n - 1, noise=NoiseModel.explicit(sig))
    obs = corrupt(tr, sc, seed=2, times=t)
    for i, name in enumerate(PRESSURES):
        r = obs.values[name] - tr.p[:, i]
        # chi-square: relative sd of the variance estimate is sqrt(2/n) = 0.45%
        assert abs(r.var() / sig[i] ** 2 - 1) < 0.03
        assert abs(np.corrcoef(r[:-1], r[1:])[0, 1]) < 0.02


def test_non_finite_sigma_rejected(short_trace):
    sc = scenario("Sc1", noise=NoiseModel.explicit([np.nan] * 6))
    with pytest.raises(InputError):
        corrupt(short_trace, sc, seed=0)


def test_observation_times_rate():
    t = observation_times(0.0, 1.0, 200.0)
    assert t.size == 201 and t[-1] == 1.0


def test_observation_csv_roundtrip(tmp_path, short_trace):
    obs = corrupt(short_trace, scenario("Sc4"), seed=4)
    path = write_observations_csv(tmp_path / "obs.csv", obs)
    assert path.read_text().splitlines()[0] == "variable,t,value"
    back = read_observations_csv(path, initial=obs.initial)
    for n in obs.variables:
        assert np.array_equal(back.times[n], obs.times[n])
        assert np.array_equal(back.values[n], obs.values[n])


def test_observation_csv_rejects_unsorted(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("variable,t,value\nP_a,0.1,1\nP_a,0.05,2\n")
    with pytest.raises(InputError):
        read_observations_csv(p)
