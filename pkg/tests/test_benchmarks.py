import json

import numpy as np
import pytest

from magix.benchmarks import (
    EvalReport,
    ExperimentSpec,
    ReplicateRecord,
    fit_dataset,
    fit_grid,
    generate_dataset,
    inferred_trajectory,
    is_divergent,
    observation_indices,
    reconstructed_trajectory,
    rmse,
    run_experiment,
)
from magix.dynamics import get_system
from magix.inference import MagixConfig
from magix.integrate import TimeGrid, Trajectory

SMALL = MagixConfig(hidden=(16,), n_iter=10, pretrain_iter=10)


def test_full_pattern_counts():
    truth, obs = generate_dataset(ExperimentSpec("fn"), 0)
    assert truth.values.shape == (321, 2)
    assert obs.counts == [41, 41]
    assert obs.tau[0][-1] == pytest.approx(20.0)


def test_partial_patterns():
    fn = observation_indices("fn", "partial", 2)
    assert [i.size for i in fn] == [41, 40]
    assert not set(fn[0]) & set(fn[1])
    # one-based t1, t5, ... and t3, t7, ..., t159
    assert list(fn[0][:3] + 1) == [1, 5, 9] and list(fn[1][[0, 1, -1]] + 1) == [3, 7, 159]
    hes = observation_indices("hes1", "partial", 3)
    assert list(hes[0][:4] + 1) == [5, 9, 17, 21] and hes[0][-1] + 1 == 161
    assert list(hes[1][:4] + 1) == [1, 9, 13, 21] and hes[1][-1] + 1 == 157
    assert list(hes[2][:4] + 1) == [1, 5, 13, 17] and hes[2][-1] + 1 == 161
    assert all(27 <= i.size <= 28 for i in hes)
    with pytest.raises(ValueError):
        observation_indices("hamiltonian:10", "partial", 10)


def test_noise_free_observations_equal_truth():
    truth, obs = generate_dataset(ExperimentSpec("lv", noise=0.0), 1)
    for d in range(2):
        np.testing.assert_array_equal(obs.y[d], truth.values[::4][:41, d])


def test_dataset_deterministic_per_seed():
    a = generate_dataset(ExperimentSpec("hamiltonian:10"), 5)
    b = generate_dataset(ExperimentSpec("hamiltonian:10"), 5)
    c = generate_dataset(ExperimentSpec("hamiltonian:10"), 6)
    assert a[0].values.tobytes() == b[0].values.tobytes()
    assert a[1].y[3].tobytes() == b[1].y[3].tobytes()
    assert not np.array_equal(a[0].values, c[0].values)


def test_fit_grid():
    times = np.linspace(0, 40, 321)
    np.testing.assert_array_equal(fit_grid(times), times[:161])
    assert fit_grid(times, 8).size == 321


class TestRmse:
    def grid(self, n=5):
        return TimeGrid(np.arange(n, dtype=float))

    def test_identical(self):
        a = Trajectory(self.grid(), np.ones((5, 2)))
        np.testing.assert_array_equal(rmse(a, a), 0.0)

    def test_offset(self):
        a = Trajectory(self.grid(), np.zeros((5, 2)))
        b = Trajectory(self.grid(), np.full((5, 2), 0.3))
        np.testing.assert_allclose(rmse(a, b), 0.3)

    def test_hand_computed(self):
        rng = np.random.default_rng(0)
        v, w = rng.normal(size=(5, 1)), rng.normal(size=(5, 1))
        a, b = Trajectory(self.grid(), v), Trajectory(self.grid(), w)
        by_hand = (sum((v[i, 0] - w[i, 0]) ** 2 for i in range(5)) / 5) ** 0.5
        assert rmse(a, b)[0] == pytest.approx(by_hand, rel=1e-14)
        mask = np.array([True, False, True, False, False])
        by_hand = (((v[0, 0] - w[0, 0]) ** 2 + (v[2, 0] - w[2, 0]) ** 2) / 2) ** 0.5
        assert rmse(a, b, mask)[0] == pytest.approx(by_hand, rel=1e-14)

    def test_grid_mismatch(self):
        a = Trajectory(self.grid(), np.zeros((5, 1)))
        b = Trajectory(TimeGrid(np.arange(5) + 0.5), np.zeros((5, 1)))
        with pytest.raises(ValueError):
            rmse(a, b)


def test_divergence_threshold():
    assert not is_divergent([0.3, 0.3])
    assert is_divergent([0.3, 5.1])
    assert not is_divergent([5.0, 0.1])
    assert is_divergent([np.nan, 0.1])


@pytest.fixture(scope="module")
def small_fit():
    spec = ExperimentSpec("fn", config=SMALL)
    truth, obs = generate_dataset(spec, 0)
    return truth, fit_dataset(obs, truth.times, SMALL)


def test_inferred_without_horizon_is_x(small_fit):
    truth, res = small_fit
    traj, div = inferred_trajectory(res, truth.times[:161])
    assert not div
    np.testing.assert_array_equal(traj.values, res.x)


def test_true_field_forecast_matches_truth(small_fit, monkeypatch):
    import magix.benchmarks as bm

    truth, res = small_fit
    sys = get_system("fn")
    # the true field in standardized time, started from the true last state
    monkeypatch.setattr(bm, "_vector_field", lambda r: (lambda x, t: sys.f(x, t) / r.scale))
    rows, div = bm._forecast(res, truth.values[160], truth.times[160:] * res.scale, 10)
    assert not div
    np.testing.assert_allclose(rows, truth.values[160:], atol=1e-8)


def test_reconstructed_starts_at_inferred_x0(small_fit):
    truth, res = small_fit
    traj, _ = reconstructed_trajectory(res, truth.times)
    assert traj.values.shape == (321, 2)
    np.testing.assert_array_equal(traj.values[0], res.x[0])
    with pytest.raises(ValueError):
        reconstructed_trajectory(res, truth.times[1:])


def test_report_excludes_divergent_and_failed():
    recs = [
        ReplicateRecord(0, 1.0, [0.1, 0.2], [0.3, 0.4], [0.1, 0.2], [0.3, 0.4]),
        ReplicateRecord(1, 1.0, [0.3, 0.4], [0.5, 0.6], [0.3, 0.4], [0.5, 0.6]),
        ReplicateRecord(2, 1.0, [9.0, 9.0], [9.0, 9.0], [9.0, 9.0], [9.0, 9.0], divergent=True),
        ReplicateRecord(3, error="NumericalDivergence: boom"),
    ]
    rep = EvalReport(ExperimentSpec(), recs)
    np.testing.assert_allclose(rep.mean("inferred_fit"), [0.2, 0.3])
    np.testing.assert_allclose(rep.sd("inferred_forecast"), np.std([[0.3, 0.4], [0.5, 0.6]], axis=0, ddof=1))
    assert rep.divergent == 1 and rep.failed == 1
    s = rep.summary()
    assert set(s["rmse"]) == {"fit", "forecast"}
    assert set(s["rmse"]["fit"]) == {"inferred", "reconstructed"}
    rows = rep.table_rows()
    assert rows[0][:5] == ["seed", "phase", "type", "component", "rmse"]
    assert len(rows) == 1 + 3 * 4 * 2 + 1


def test_run_experiment_small():
    spec = ExperimentSpec("fn", replicates=2, seed=4, config=SMALL)
    rep = run_experiment(spec)
    assert [r.seed for r in rep.records] == [4, 5]
    assert all(r.seconds > 0 for r in rep.records)
    again = run_experiment(spec)
    assert json.dumps(rep.to_dict(timings=False)) == json.dumps(again.to_dict(timings=False))


def test_spec_validation_and_round_trip():
    with pytest.raises(ValueError):
        ExperimentSpec(pattern="some")
    with pytest.raises(ValueError):
        ExperimentSpec(system="pendulum")
    spec = ExperimentSpec("hes1", "partial", config=SMALL)
    assert ExperimentSpec.from_dict(spec.to_dict()) == spec
