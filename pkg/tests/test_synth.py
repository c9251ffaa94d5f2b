import math

import numpy as np
import pytest

from birdflux import synth
from birdflux.synth import ScenarioConfig


@pytest.fixture(scope="module")
def small():
    cfg = ScenarioConfig(seasons=(2013, 2014), n_days=3)
    return cfg, synth.generate(cfg)


def test_config_round_trip():
    cfg = ScenarioConfig(n_days=5, seasons=(2013,))
    assert ScenarioConfig.from_dict(cfg.to_dict()) == cfg


def test_zero_wind_zero_source_stays_constant():
    cfg = ScenarioConfig(seasons=(2013,), n_days=2, mean_wind_kmh=0.0, mode_wind_kmh=0.0,
                         heading_kmh=(0.0, 0.0), takeoff_rate=0.0, night_landing_rate=0.0,
                         dawn_landing_rate=0.0)
    sc = synth.build_scenario(cfg)
    truth, _, _ = synth.simulate_ground_truth(sc, 2013)
    assert np.all(truth.fine_rho == 0.0)
    assert np.all(truth.fine_velocity == 0.0)


def test_refinement_ratio_first_order():
    errs = [synth.uniform_advection_error(d, (int(1600 / d), int(1600 / d)), (30.0, 10.0), 8.0)
            for d in (200.0, 100.0, 50.0)]
    ratios = [a / b for a, b in zip(errs, errs[1:])]
    assert all(1.5 <= r <= 2.5 for r in ratios), (errs, ratios)


def test_cfl_violation_rejected():
    cfg = ScenarioConfig(seasons=(2013,), n_days=1, mean_wind_kmh=400.0)
    sc = synth.build_scenario(cfg)
    with pytest.raises(synth.CFLError, match="km/h"):
        synth.simulate_ground_truth(sc, 2013)


def test_fine_ledger_identity(small):
    _, ds = small
    for s in ds.seasons.values():
        led = s.truth.ledger
        fine = ds.scenario and synth.build_scenario(ds.scenario).fine
        interior = ~fine.boundary
        prev = (s.truth.fine_rho[0] * fine.areas)[interior].sum()
        for m, out, src, reset in led:
            assert abs(m - (prev - out + src - reset)) <= 1e-9 * max(abs(prev), abs(m), 1.0)
            prev = m


def test_densities_nonnegative_and_daytime_reset(small):
    cfg, ds = small
    for s in ds.seasons.values():
        assert s.truth.fine_rho.min() >= -1e-12
        hod = synth.hour_of_day(s.times)
        after_reset = hod == (cfg.dawn_hour + 2) % 24
        assert np.all(s.truth.fine_rho[after_reset] == 0.0)
        assert s.truth.rho[~s.night].max() < s.truth.rho[s.night].max()


def test_reproducible_bit_exact(small):
    cfg, ds = small
    again = synth.generate(cfg)
    for label in cfg.seasons:
        a, b = ds.seasons[label], again.seasons[label]
        np.testing.assert_array_equal(a.truth.fine_rho, b.truth.fine_rho)
        np.testing.assert_array_equal(a.frames.density, b.frames.density)
        np.testing.assert_array_equal(a.frames.velocity, b.frames.velocity)
        np.testing.assert_array_equal(a.env, b.env)


def test_env_features(small):
    cfg, ds = small
    sc = synth.build_scenario(cfg)
    truth, wind, phase = synth.simulate_ground_truth(sc, 2013)
    U = ds.seasons[2013].env
    assert U.shape == (cfg.n_days * 24, ds.tess.n_cells, len(synth.FEATURE_NAMES))
    assert np.abs(U).max() <= 1.0 + 1e-12
    w = wind(ds.tess.centers, truth.hours)
    np.testing.assert_allclose(U[..., 0] * cfg.wind_norm, w[..., 0], atol=1e-9, rtol=0)
    np.testing.assert_allclose(U[..., 1] * cfg.wind_norm, w[..., 1], atol=1e-9, rtol=0)
    hod = synth.hour_of_day(truth.times)
    day = (hod >= cfg.dawn_hour) & (hod < cfg.dusk_hour)
    np.testing.assert_array_equal(U[:, 0, 5], day.astype(float))
    np.testing.assert_array_equal(U[:, 0, 6] == 1, hod == cfg.dusk_hour)
    np.testing.assert_array_equal(U[:, 0, 7] == 1, hod == cfg.dawn_hour)


def test_day_of_year_normalisation():
    t = np.array(["2013-01-01T05", "2013-12-31T20", "2020-12-31T00"], dtype="datetime64[h]")
    doy, n = synth.day_of_year(t)
    frac = (doy - 1) / (n - 1)
    np.testing.assert_allclose(frac, [0.0, 1.0, 1.0])
    assert list(n) == [365, 365, 366]


def test_wind_field_analytic():
    cfg = ScenarioConfig()
    w = synth.WindField.random(cfg, np.random.default_rng(0))
    xy = np.array([[10.0, -20.0]])
    t = 7.0
    manual = w.mean(t) + np.cos(xy @ w.wavevec.T + w.mode_phase - w.mode_freq * t) @ w.mode_amp
    np.testing.assert_allclose(w(xy, t)[0], manual, rtol=1e-14)


def night_truth(sc, value, n_hours):
    """Synthetic constant fine field at 23:00 every sample."""
    t = np.full(n_hours, np.datetime64("2013-08-01T23", "h"))
    F = sc.fine.n_cells
    rho = np.full((n_hours, F), value)
    vel = np.tile([10.0, -20.0], (n_hours, F, 1))
    z = np.zeros((n_hours, sc.tess.n_cells))
    return synth.GroundTruth(t, np.arange(n_hours, dtype=float), rho, vel, np.zeros((n_hours, F)),
                             np.zeros((n_hours - 1, 4)), z, np.zeros(z.shape + (2,)), z, z, z)


def test_noise_free_constant_readings():
    cfg = ScenarioConfig(noise_std=0.0, velocity_noise_std=0.0, missing_rate=0.0)
    sc = synth.build_scenario(cfg)
    fr = synth.sample_radars(sc, night_truth(sc, 42.0, 3), np.random.default_rng(0))
    np.testing.assert_allclose(fr.density, 42.0, rtol=1e-12)
    np.testing.assert_allclose(fr.velocity[..., 0], 10.0, rtol=1e-12)
    assert fr.valid.all()


def test_noise_std_monte_carlo():
    cfg = ScenarioConfig(noise_std=5.0, velocity_noise_std=2.0, missing_rate=0.0)
    sc = synth.build_scenario(cfg)
    fr = synth.sample_radars(sc, night_truth(sc, 100.0, 1000), np.random.default_rng(3))
    assert fr.density.size >= 10_000
    assert abs(np.std(fr.density - 100.0) / 5.0 - 1) < 0.05
    assert abs(np.std(fr.velocity[..., 1] + 20.0) / 2.0 - 1) < 0.05


def test_disk_inside_one_fine_cell():
    cfg = ScenarioConfig(radar_radius_km=2.0, noise_std=0.0, velocity_noise_std=0.0,
                         missing_rate=0.0)
    sc = synth.build_scenario(cfg)
    tr = night_truth(sc, 0.0, 1)
    tr.fine_rho[0] = np.arange(sc.fine.n_cells, dtype=float) + 1.0
    fr = synth.sample_radars(sc, tr, np.random.default_rng(0))
    single = np.flatnonzero((sc.observe_fine > 0).sum(axis=1) == 1)
    assert len(single) > 0
    for m in single:
        c = int(np.flatnonzero(sc.observe_fine[m])[0])
        assert fr.density[0, m] == pytest.approx(c + 1.0)


def test_sampling_rules(small):
    cfg, ds = small
    sc = synth.build_scenario(cfg)
    s = ds.seasons[2013]
    day = ~s.night
    assert np.all(s.frames.density[day] == 0.0)
    noiseless = s.truth.fine_rho @ sc.observe_fine.T
    assert np.all(np.isnan(s.frames.velocity[noiseless < 5.0]))
    assert np.all(np.isfinite(s.frames.velocity[noiseless >= 5.0]))
    assert 0.0 < 1 - s.frames.valid.mean() < 0.05
    assert s.frames.density.min() >= 0.0


def test_coarse_consistency(small):
    cfg, ds = small
    sc = synth.build_scenario(cfg)
    errs = synth.coarse_step_errors(sc, ds.seasons[2013].truth)
    bound = synth.uniform_advection_error(cfg.cell_diameter_km, (12, 12), (30.0, 10.0), 8.0)
    assert len(errs) > 20
    assert errs[:, 0].max() < bound
    # fluxes explain part of the change: better than the local-only update
    assert errs[:, 0].mean() < errs[:, 1].mean()


def test_coarse_aggregates(small):
    cfg, ds = small
    sc = synth.build_scenario(cfg)
    tr = ds.seasons[2013].truth
    inside = sc.fine_owner >= 0
    c = 4
    w = sc.fine.areas * (sc.fine_owner == c)
    assert tr.rho[30, c] == pytest.approx((tr.fine_rho[30] * w).sum() / w.sum(), rel=1e-12)
    assert inside.sum() > 0


def test_dataset_round_trip(tmp_path, small):
    cfg, ds = small
    synth.write_dataset(tmp_path, ds)
    back = synth.read_dataset(tmp_path)
    assert sorted(back.seasons) == sorted(ds.seasons)
    for label in ds.seasons:
        a, b = ds.seasons[label], back.seasons[label]
        np.testing.assert_array_equal(a.times, b.times)
        np.testing.assert_allclose(a.env, b.env, rtol=1e-15)
        np.testing.assert_array_equal(a.night, b.night)
        np.testing.assert_allclose(a.frames.density, b.frames.density, rtol=1e-15)
        np.testing.assert_array_equal(a.frames.valid, b.frames.valid)
        np.testing.assert_allclose(a.truth.rho, b.truth.rho, rtol=1e-15)
        np.testing.assert_allclose(a.truth.velocity, b.truth.velocity, rtol=1e-15)
        np.testing.assert_allclose(a.truth.source, b.truth.source, rtol=1e-15)
    np.testing.assert_allclose(back.landcover, ds.landcover, rtol=1e-15)
    assert back.network.ids == ds.network.ids
