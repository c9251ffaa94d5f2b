import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from birdflux import evaluation as ev
from birdflux.obsmap import SensorFrame


def test_rmse_examples():
    assert ev.rmse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert ev.rmse(np.full(7, 3.5), np.full(7, 1.0)) == pytest.approx(2.5)
    assert ev.rmse([3.0, 4.0], [0.0, 0.0]) == pytest.approx(5 / math.sqrt(2))
    assert ev.rmse([1.0], [2.0], mask=[False]) is None


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_rmse_symmetric_and_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    p, o = rng.normal(size=(5, 6)), rng.normal(size=(5, 6))
    m = rng.random((5, 6)) > 0.3
    perm = rng.permutation(6)
    a = ev.rmse(p, o, m)
    assert a == ev.rmse(o, p, m)
    b = ev.rmse(p[:, perm], o[:, perm], m[:, perm])
    assert (a is None and b is None) or a == pytest.approx(b, rel=1e-12)


def test_precision_recall_examples():
    obs = np.array([10.0, 200.0, 300.0, 50.0])
    assert ev.precision_recall(obs, obs, 150.0) == (1.0, 1.0)
    assert ev.precision_recall(np.zeros(4), obs, 150.0) == (None, 0.0)
    p, r = ev.precision_recall(np.array([160.0, 200.0, 10.0, 10.0]), obs, 150.0)
    assert (p, r) == (0.5, 0.5)


def test_event_threshold_is_quantile():
    d = np.arange(101, dtype=float)
    assert ev.event_threshold(d) == pytest.approx(95.0)
    mask = d < 50
    assert ev.event_threshold(d, mask) == pytest.approx(np.quantile(d[:50], 0.95))


def vec(speed, deg):
    r = np.radians(deg)
    return np.array([speed * np.cos(r), speed * np.sin(r)])


def test_velocity_metric_examples():
    v = np.array([[3.0, 4.0], [-1.0, 2.0]])
    assert ev.velocity_metrics(v, v) == (0.0, 0.0)
    s, d = ev.velocity_metrics(vec(10.0, 359.0)[None], vec(10.0, 1.0)[None])
    assert d == pytest.approx(2.0) and s == pytest.approx(0.0, abs=1e-12)
    s, d = ev.velocity_metrics(np.array([[10.0, 0.0], [20.0, 0.0]]),
                               np.array([[13.0, 0.0], [24.0, 0.0]]))
    assert s == pytest.approx(3.54, abs=0.01) and d == 0.0
    assert ev.heading_error(359.0, 1.0) == pytest.approx(2.0)


def test_velocity_filter_on_observed_density():
    pred = np.array([[10.0, 0.0], [0.0, 10.0]])
    obs = np.array([[10.0, 0.0], [10.0, 0.0]])
    s, d = ev.velocity_metrics(pred, obs, obs_density=np.array([6.0, 5.0]))
    assert (s, d) == (0.0, 0.0)  # the second radar-hour sits at 5 and is dropped
    assert ev.velocity_metrics(pred, obs, obs_density=np.array([1.0, 2.0])) == (None, None)
    obs_nan = obs.copy()
    obs_nan[0] = np.nan
    s, d = ev.velocity_metrics(pred, obs_nan)
    assert d == pytest.approx(90.0)


def ha_season(values, n_days=3, M=2, start="2013-08-01T00", vel=(4.0, -3.0)):
    T = n_days * 24
    times = np.datetime64(start, "h") + np.arange(T).astype("timedelta64[h]")
    dens = np.broadcast_to(np.asarray(values, dtype=float), (T, M)).copy()
    v = np.broadcast_to(np.asarray(vel, dtype=float), (T, M, 2)).copy()
    return SimpleNamespace(times=times, frames=SensorFrame(dens, v, np.ones((T, M), bool)))


def test_historical_average_examples():
    ha = ev.historical_average([ha_season(7.0)])
    rho, vel = ha.predict(np.array([0, 2]), np.array([5, 23]))
    np.testing.assert_allclose(rho, 7.0)
    np.testing.assert_allclose(vel, np.tile([4.0, -3.0], (2, 2, 1)))
    ha2 = ev.historical_average([ha_season(10.0, start="2013-08-01T00"),
                                 ha_season(30.0, start="2014-08-01T00")])
    rho, _ = ha2.predict(np.array([1]), np.array([3]))
    np.testing.assert_allclose(rho, 20.0)


def test_historical_average_fallback_and_velocity_filter():
    s = ha_season(np.array([2.0, 40.0]), n_days=2)
    s.frames.valid[:24, 1] = False  # radar 1 unseen on day 0
    ha = ev.historical_average([s], window_days=0)
    rho, vel = ha.predict(np.array([0, 5]), np.array([12, 12]))
    assert rho[0, 1] == pytest.approx(40.0)  # radar mean over the season
    np.testing.assert_allclose(rho[1], [2.0, 40.0])  # day beyond the climatology
    # radar 0 is always below 5 birds/km^2, so it has no velocity average
    np.testing.assert_allclose(vel[:, 0], 0.0)
    np.testing.assert_allclose(vel[:, 1], [[4.0, -3.0], [4.0, -3.0]])


def test_historical_average_window():
    T = 20 * 24
    times = np.datetime64("2013-08-01T00", "h") + np.arange(T).astype("timedelta64[h]")
    dens = np.repeat(np.arange(20, dtype=float), 24)[:, None]
    s = SimpleNamespace(times=times, frames=SensorFrame(dens, np.zeros((T, 1, 2)), np.ones((T, 1), bool)))
    ha = ev.historical_average([s], window_days=7)
    rho, _ = ha.predict(np.array([10, 0]), np.array([0, 0]))
    assert rho[0, 0] == pytest.approx(np.mean(np.arange(3, 18)))
    assert rho[1, 0] == pytest.approx(np.mean(np.arange(0, 8)))


def test_relative_rmse_change():
    assert ev.relative_rmse_change({"a": 12.0}, {"a": [10.0]}) == {"a": pytest.approx(0.2)}
    assert ev.relative_rmse_change({"a": 10.0}, {"a": [10.0, 10.0]}) == {"a": 0.0}
    assert ev.relative_rmse_change({"a": 12.0}, {"b": [10.0]}) == {}
    assert ev.relative_rmse_change({}, {"a": [10.0]}) == {}


def test_binned_reports_uniform_error_and_partition():
    rng = np.random.default_rng(0)
    obs = rng.uniform(0, 300, (4, 72, 5))
    mask = rng.random(obs.shape) > 0.2
    hb, db = ev.binned_reports(obs + 3.0, obs, mask)
    assert [b["rmse"] for b in hb] == pytest.approx([3.0] * 3)
    assert [b["rmse"] for b in db] == pytest.approx([3.0] * 3)
    assert sum(b["count"] for b in hb) == mask.sum()
    assert sum(b["count"] for b in db) == mask.sum()


def test_density_bins_monotone_on_heavy_tail():
    rng = np.random.default_rng(1)
    obs = rng.lognormal(3.0, 1.2, (20, 72, 6))
    pred = obs * (1 + 0.2 * rng.standard_normal(obs.shape))
    _, db = ev.binned_reports(pred, obs, np.ones(obs.shape, bool))
    r = [b["rmse"] for b in db]
    assert r[0] < r[1] < r[2]


def fixture_forecasts():
    S, K, M, N = 2, 72, 3, 4
    obs = np.full((S, K, M), 100.0)
    mask = np.ones((S, K, M), bool)
    mask[0, :10] = False  # daytime / invalid
    pred = obs + 2.0
    ov = np.tile([10.0, 0.0], (S, K, M, 1))
    ov[1, :, 0] = np.nan  # no velocity target there
    return ev.SequenceForecasts(pred, ov * 1.0, obs, ov, mask, np.zeros((S, K + 1, N)),
                                np.zeros((S, K, N, 2)), np.zeros((S, K, N)))


def test_report_counts_and_json():
    fc = fixture_forecasts()
    rep = ev.report(fc, ("a", "b", "c"))
    assert rep.count == 2 * 72 * 3 - 10 * 3
    assert rep.rmse == pytest.approx(2.0)
    assert rep.speed_rmse == 0.0 and rep.direction_error == 0.0
    assert [b["count"] for b in rep.horizon_bins] == [24 * 6 - 30, 24 * 6, 24 * 6]
    assert set(rep.per_radar) == {"a", "b", "c"}
    import json
    assert json.loads(rep.to_json())["count"] == rep.count


def test_oracle_recovery_on_perfect_prediction():
    rng = np.random.default_rng(2)
    T, N, K = 60, 5, 10
    truth = SimpleNamespace(velocity=rng.normal(size=(T, N, 2)), source=rng.normal(size=(T, N)),
                            rho=np.full((T, N), 50.0))
    night = np.ones(T, bool)
    seasons = [SimpleNamespace(night=night)]
    seqs = [SimpleNamespace(season=0, origin=o) for o in (5, 20, 40)]
    vt = np.stack([truth.velocity[o + 1:o + 1 + K] for o in (5, 20, 40)])
    st_ = np.stack([truth.source[o + 1:o + 1 + K] for o in (5, 20, 40)])
    fc = SimpleNamespace(cell_velocity=vt, cell_source=st_)
    res = ev.oracle_recovery(fc, seqs, seasons, [truth], K)
    assert res["pearson_vx"] == pytest.approx(1.0) and res["pearson_vy"] == pytest.approx(1.0)
    assert res["sign_agreement"] == 1.0
    assert res["n_cell_hours"] == 3 * K * N
    fc_bad = SimpleNamespace(cell_velocity=vt, cell_source=-st_)
    assert ev.oracle_recovery(fc_bad, seqs, seasons, [truth], K)["sign_agreement"] == 0.0
    # daytime steps are excluded
    seasons_day = [SimpleNamespace(night=np.zeros(T, bool) | (np.arange(T) % 2 == 0))]
    assert ev.oracle_recovery(fc, seqs, seasons_day, [truth], K)["n_cell_hours"] == 3 * 5 * N
    # velocities over an empty sky carry no information and are not correlated
    truth.rho[:, 0] = 0.0
    noisy = vt.copy()
    noisy[..., 0, :] = rng.normal(scale=100.0, size=noisy[..., 0, :].shape)
    res = ev.oracle_recovery(SimpleNamespace(cell_velocity=noisy, cell_source=st_), seqs, seasons,
                             [truth], K)
    assert res["pearson_vx"] == pytest.approx(1.0) and res["pearson_vy"] == pytest.approx(1.0)
    assert res["n_occupied"] == 3 * K * (N - 1)


def test_cv_result_mean():
    r = ev.CVResult([], [], {"a": 12.0, "b": 9.0}, {"a": [10.0], "b": [10.0]},
                    ev.relative_rmse_change({"a": 12.0, "b": 9.0}, {"a": [10.0], "b": [10.0]}))
    assert r.mean_relative_change == pytest.approx(0.05)
    assert r.to_dict()["mean_relative_change"] == pytest.approx(0.05)


def test_long_and_per_radar_csv(tmp_path):
    fc = fixture_forecasts()
    ev.write_long_csv(tmp_path / "long.csv", fc, ("a", "b", "c"))
    lines = open(tmp_path / "long.csv").read().splitlines()
    assert len(lines) == 1 + 2 * 72 * 3
    ev.write_per_radar_csv(tmp_path / "pr.csv", {"b": 1.0, "a": None}, {"b": 0.5})
    assert open(tmp_path / "pr.csv").read().splitlines() == [
        "radar_id,rmse,relative_rmse_change", "a,,", "b,1.0,0.5"]
