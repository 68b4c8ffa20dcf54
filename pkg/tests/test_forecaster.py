from datetime import datetime, timezone

import numpy as np
import pytest

from lavaheat.building import SimConfig, simulate
from lavaheat.errors import ConfigError, DataError
from lavaheat.estimator import EmOptions, new_state
from lavaheat.features import LatentConfig, NominalConfig, build_design
from lavaheat.forecaster import (
    Forecast, ModelConfig, aggregate, aggregate_tables, predict, predict_horizon, train, walk_forward,
)
from lavaheat.timeseries import HOUR, ConsumerDataset, HourlySeries

T0 = datetime(2019, 1, 1, tzinfo=timezone.utc)
SMALL = ModelConfig(NominalConfig(n_b=3), LatentConfig(M=2, periodic_inputs=("t_d",), binary_inputs=("wk",)),
                    EmOptions(selection="bic", max_iters=200))


def dataset(load, temp, start=T0):
    return ConsumerDataset("c", HourlySeries.from_values(start, load, "kW"), HourlySeries.from_values(start, temp, "°C"))


@pytest.fixture(scope="module")
def sim():
    return simulate(cfg=SimConfig(duration=24 * 70, seed=2)).dataset


@pytest.fixture(scope="module")
def sim_run(sim):
    return walk_forward(sim, sim.start + 24 * 42 * HOUR, 24, SMALL)


class TestPredict:
    def test_null_model(self):
        s = new_state(2, 1)
        s.sigma2 = 0.7
        f = predict(s, [1.0, 4.0], [2.0])
        assert (f.y_hat, f.y_nom, f.y_res) == (0.0, 0.0, 0.0)
        assert f.variance == pytest.approx(0.7 + 4.0 * s.P[0, 0])

    def test_dot_products(self):
        s = new_state(2, 1)
        s.theta = np.array([1.0, 2.0])
        s.z_hat = np.array([1.0])
        f = predict(s, [1.0, 3.0], [0.5])
        assert f.y_hat == 7.5 and f.y_nom == 7.0 and f.y_res == 0.5

    def test_components_add_up_exactly(self, rng):
        s = new_state(4, 6)
        s.theta, s.z_hat = rng.normal(size=4), rng.normal(size=6)
        for _ in range(50):
            f = predict(s, rng.normal(size=4), rng.normal(size=6))
            assert f.y_hat == f.y_nom + f.y_res and f.variance >= 0.0  # bitwise, no re-rounding

    def test_dimension_mismatch(self):
        with pytest.raises(DataError):
            predict(new_state(2, 1), [1.0], [1.0])


class TestHorizon:
    def test_single_step_equals_predict(self, sim):
        design = build_design(sim, SMALL.nominal, SMALL.latent)
        state = train(design, 24 * 30, SMALL)
        issue = sim.start + 24 * 30 * HOUR
        [f] = predict_horizon(state, sim, issue, 1, SMALL)
        g = predict(state, design.phi[24 * 30 + 1], design.gamma[24 * 30 + 1])
        assert (f.y_hat, f.variance) == (g.y_hat, g.variance)
        assert f.horizon == 1 and f.target_time == issue + HOUR

    def test_constant_temperature_constant_nominal(self):
        n = 24 * 20
        rng = np.random.default_rng(1)
        ds = dataset(50 + rng.normal(size=n), np.full(n, -5.0))
        design = build_design(ds, SMALL.nominal, SMALL.latent)
        state = train(design, 24 * 14, SMALL)
        wednesday = datetime(2019, 1, 16, tzinfo=timezone.utc)  # forecasts stay mid-week
        fc = predict_horizon(state, ds, wednesday, 24, SMALL, design)
        assert len({f.y_nom for f in fc}) == 1

    def test_weekend_selector_flips_at_saturday_midnight(self, sim):
        cfg = ModelConfig(latent=LatentConfig(M=1, periodic_inputs=("t_d",), binary_inputs=("wk",)))
        design = build_design(sim, cfg.nominal, cfg.latent)
        friday_noon = datetime(2019, 1, 18, 12, tzinfo=timezone.utc)
        i = (friday_noon - sim.start) // HOUR
        gam = design.gamma[i + 1:i + 25]
        weekend_block = np.abs(gam[:, :2]).sum(axis=1) > 0
        hours = [(friday_noon + h * HOUR).hour for h in range(1, 25)]
        assert not weekend_block[:hours.index(0)].any() and weekend_block[hours.index(0):].all()
        assert (friday_noon + (hours.index(0) + 1) * HOUR).weekday() == 5

    def test_missing_future_temperature(self, sim):
        state = new_state(SMALL.nominal.p, SMALL.latent.n_gamma)
        with pytest.raises(DataError, match="temperature"):
            predict_horizon(state, sim, sim.load.end - 3 * HOUR, 24, SMALL)

    def test_gap_in_future_temperature(self):
        temp = np.zeros(100)
        temp[60] = np.nan
        ds = dataset(np.ones(100), temp)
        state = new_state(SMALL.nominal.p, SMALL.latent.n_gamma)
        with pytest.raises(DataError, match="lag window"):
            predict_horizon(state, ds, T0 + 50 * HOUR, 24, SMALL)


class TestWalkForward:
    def test_perfect_oracle(self):
        rng = np.random.default_rng(0)
        n = 24 * 50
        temp = 3.0 + 8.0 * np.sin(np.arange(n) / 40.0) + rng.normal(0, 2, n)
        ds0 = dataset(np.ones(n), temp)
        design = build_design(ds0, SMALL.nominal, SMALL.latent)
        theta = np.array([30.0, 2.0, 1.0, 0.5, 0.25])
        y = design.phi @ theta
        ds = dataset(np.where(np.isnan(y), 30.0, y), temp)
        res = walk_forward(ds, T0 + 24 * 30 * HOUR, 24, SMALL)
        assert res.report.rrmse < 1e-6
        np.testing.assert_allclose(res.state.theta, theta, rtol=1e-6)

    def test_beats_validation_mean(self, sim_run):
        actual = sim_run.actual[sim_run.scored]
        cv = actual.std() / actual.mean()
        # predicting the mean of the scored actuals scores exactly their coefficient of variation
        from lavaheat.metrics import rrmse
        assert rrmse(actual, np.full_like(actual, actual.mean())) == pytest.approx(cv, rel=1e-12)
        assert sim_run.report.rrmse < cv

    def test_baseline_is_seasonal_naive(self, sim, sim_run):
        y = sim.load.values
        first = (sim_run.timestamps[0] - sim.start) // HOUR
        np.testing.assert_array_equal(sim_run.baseline, y[first - 168:len(y) - 168])
        from lavaheat.metrics import rrmse
        assert sim_run.report.baseline_rrmse == pytest.approx(rrmse(sim_run.actual, sim_run.baseline), rel=1e-12)

    def test_first_target_and_shapes(self, sim, sim_run):
        split = sim.start + 24 * 42 * HOUR
        assert sim_run.timestamps[0] == split - HOUR + 24 * HOUR
        assert sim_run.timestamps[-1] == sim.load.end
        assert len(sim_run.y_hat) == len(sim_run.timestamps) == sim_run.report.n_scored
        np.testing.assert_array_equal(sim_run.y_hat, sim_run.y_nom + sim_run.y_res)

    def test_no_leakage(self, sim, sim_run):
        """Loads after t - H never influence the forecast recorded for t."""
        j = (sim.start + 24 * 50 * HOUR - sim.start) // HOUR
        load = sim.load.values.copy()
        load[j:] += 1000.0
        perturbed = dataset(load, sim.temperature.values, sim.start)
        res = walk_forward(perturbed, sim.start + 24 * 42 * HOUR, 24, SMALL)
        first = (sim_run.timestamps[0] - sim.start) // HOUR
        untouched = slice(0, j + 24 - first)
        np.testing.assert_array_equal(res.y_hat[untouched], sim_run.y_hat[untouched])
        assert res.y_hat[j + 24 - first] != sim_run.y_hat[j + 24 - first]

    def test_deterministic(self, sim, sim_run):
        again = walk_forward(sim, sim.start + 24 * 42 * HOUR, 24, SMALL)
        assert again.y_hat.tobytes() == sim_run.y_hat.tobytes()

    def test_clamp_only_touches_negatives(self):
        rng = np.random.default_rng(4)
        n = 24 * 40
        ds = dataset(rng.normal(0.5, 3.0, n), rng.normal(0, 5, n))
        plain = walk_forward(ds, T0 + 24 * 20 * HOUR, 24, SMALL)
        clamped = walk_forward(ds, T0 + 24 * 20 * HOUR, 24, ModelConfig(SMALL.nominal, SMALL.latent, SMALL.em,
                                                                          clamp=True))
        neg = plain.y_hat < 0
        assert neg.any()
        np.testing.assert_array_equal(clamped.y_hat[~neg], plain.y_hat[~neg])
        assert np.all(clamped.y_hat[neg] == 0.0)

    def test_missing_loads_not_scored(self, sim):
        load = sim.load.values.copy()
        load[24 * 50:24 * 50 + 10] = np.nan
        res = walk_forward(dataset(load, sim.temperature.values, sim.start), sim.start + 24 * 42 * HOUR, 24, SMALL)
        assert res.report.n_scored == len(res.timestamps) - 10

    @pytest.mark.parametrize("split_h", [0, 24 * 70 - 10])
    def test_bad_split(self, sim, split_h):
        with pytest.raises(DataError):
            walk_forward(sim, sim.start + split_h * HOUR, 24, SMALL)

    def test_forgetting_factor_validated(self):
        with pytest.raises(ConfigError):
            ModelConfig(lam=0.0)
        with pytest.raises(ConfigError):
            ModelConfig(lam=1.01)


class TestAggregate:
    @staticmethod
    def fc(y, v, issue=T0, h=24):
        return Forecast(issue, h, y, y, 0.0, v, v)

    def test_example(self):
        tot = aggregate([self.fc(3.0, 1.0), self.fc(4.0, 2.0)])
        assert (tot.y_tot, tot.variance_tot) == (7.0, 3.0)

    def test_single_is_identity(self):
        tot = aggregate([self.fc(3.25, 0.5)])
        assert (tot.y_tot, tot.variance_tot) == (3.25, 0.5)

    def test_empty(self):
        tot = aggregate([])
        assert (tot.y_tot, tot.variance_tot) == (0.0, 0.0)

    def test_timeline_mismatch(self):
        with pytest.raises(DataError):
            aggregate([self.fc(1, 1), self.fc(1, 1, h=23)])

    def test_exactly_rounded(self):
        vals = [1e16, 1.0, -1e16, 1.0]
        assert aggregate([self.fc(v, 0.0) for v in vals]).y_tot == 2.0

    def test_tables(self):
        stamps = ["a", "b"]
        out = aggregate_tables([{"timestamp": stamps, "y_hat": [1, 2], "variance": [0.5, 0.5]},
                                {"timestamp": stamps, "y_hat": [3, 4], "variance": [1, 1]}])
        np.testing.assert_array_equal(out["y_tot"], [4, 6])
        np.testing.assert_array_equal(out["variance_tot"], [1.5, 1.5])
        with pytest.raises(DataError):
            aggregate_tables([])
        with pytest.raises(DataError):
            aggregate_tables([{"timestamp": ["a"], "y_hat": [1], "variance": [1]},
                              {"timestamp": ["b"], "y_hat": [1], "variance": [1]}])
