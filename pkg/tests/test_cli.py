import filecmp
import json
import os
import shutil

import numpy as np
import pytest

from birdflux import cli, synth
from birdflux.obsmap import SensorFrame, read_sensor_csv, write_sensor_csv

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
SMOKE = os.path.join(ROOT, "configs", "smoke.json")


def run(*argv):
    return cli.run([str(a) for a in argv])


def chain(base):
    base = str(base)
    d, t, f, e = (os.path.join(base, x) for x in ("data", "train", "fc", "ev"))
    assert run("simulate", "--config", SMOKE, "--out", d) == 0
    assert run("train", "--config", SMOKE, "--set", f"paths.data={d}", "--out", t) == 0
    assert run("forecast", "--config", SMOKE, "--set", f"paths.data={d}",
               "--set", f"paths.checkpoint={t}/checkpoint.json", "--out", f) == 0
    assert run("evaluate", "--config", SMOKE, "--set", f"paths.data={d}",
               "--set", f"paths.forecast={f}", "--out", e) == 0
    return d, t, f, e


@pytest.fixture(scope="module")
def smoke(tmp_path_factory):
    return chain(tmp_path_factory.mktemp("smoke"))


def test_schema_rejects_unknown_and_bad_values(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"model": {"hiddn": 3}}))
    assert run("simulate", "--config", bad, "--out", tmp_path / "o") == 2
    assert "hiddn" in capsys.readouterr().err
    bad.write_text(json.dumps({"train": {"lr": "fast"}}))
    assert run("simulate", "--config", bad, "--out", tmp_path / "o") == 2
    bad.write_text(json.dumps({"surprise": 1}))
    assert run("simulate", "--config", bad, "--out", tmp_path / "o") == 2
    assert run("simulate", "--set", "nodot=1", "--out", tmp_path / "o") == 2
    assert run("simulate", "--set", "train.seed=3", "--out", tmp_path / "o") == 2
    assert not (tmp_path / "o" / "manifest.json").exists()


def test_overrides_and_seed():
    cfg = cli.load_config(SMOKE, ["train.lr=0.5", "eval.threshold=null"], seed=9)
    assert cfg["train"]["lr"] == 0.5 and cfg["eval"]["threshold"] is None
    assert cfg["seed"] == 9 and cli.train_config(cfg).seed == 9
    assert cli.scenario_config(cfg).seed == 9
    assert cfg["train"]["epochs"] == 4  # untouched keys survive


def test_missing_inputs_fail(tmp_path, capsys):
    assert run("train", "--config", SMOKE, "--out", tmp_path / "t") == 2
    assert "paths.data" in capsys.readouterr().err
    assert run("train", "--config", SMOKE, "--set", f"paths.data={tmp_path}/nope",
               "--out", tmp_path / "t") == 2


def test_smoke_chain_outputs(smoke):
    d, t, f, e = smoke
    for directory in smoke:
        m = cli.read_manifest(directory)
        assert "timestamp" not in json.dumps(m)
        for name, digest in m["outputs"].items():
            assert cli.sha256_file(os.path.join(directory, name)) == digest
    ck = json.load(open(os.path.join(t, "checkpoint.json")))
    assert ck["manifest"]["tessellation_sha256"] == cli.sha256_file(os.path.join(d, "tessellation.json"))
    rep = json.load(open(os.path.join(e, "report.json")))
    assert rep["count"] > 0 and rep["rmse"] is not None
    assert "historical_average_rmse" in rep and "truth_recovery" in rep
    n_seq = len(json.load(open(os.path.join(f, "forecast.json")))["sequences"])
    n_cells = json.load(open(os.path.join(d, "tessellation.json")))
    lines = open(os.path.join(f, "cells.jsonl")).read().splitlines()
    assert len(lines) == n_seq * 48 * 19
    rec = json.loads(lines[0])
    assert set(rec) >= {"rho", "vx", "vy", "delta", "gamma", "s", "step", "cell"}


def outputs_identical(a, b):
    ma, mb = cli.read_manifest(a), cli.read_manifest(b)
    assert ma["outputs"] == mb["outputs"] and ma["inputs"] == mb["inputs"]
    for n in ma["outputs"]:
        assert filecmp.cmp(os.path.join(a, n), os.path.join(b, n), shallow=False), n


def test_rerun_is_byte_identical(smoke, tmp_path):
    d, t, f, e = smoke
    d2, t2, f2, e2 = chain(tmp_path)
    for a, b in ((d, d2), (t, t2), (f, f2), (e, e2)):
        outputs_identical(a, b)
    # simulate has no path arguments, so even its manifest is identical
    assert filecmp.cmp(os.path.join(d, "manifest.json"), os.path.join(d2, "manifest.json"),
                       shallow=False)


def test_evaluate_on_observations_gives_zero_error(smoke, tmp_path):
    d, t, f, e = smoke
    ds = synth.read_dataset(d)
    fake = tmp_path / "fc"
    shutil.copytree(f, fake)
    idx = json.load(open(fake / "forecast.json"))
    for rec in idx["sequences"]:
        times, ids, _ = read_sensor_csv(fake / rec["file"], ds.network.ids)
        season = ds.seasons[rec["season"]]
        sl = np.isin(season.times, times)
        fr = season.frames
        vel = np.where(fr.velocity_valid()[sl][..., None], fr.velocity[sl], np.nan)
        write_sensor_csv(fake / rec["file"], times, ids,
                         SensorFrame(fr.density[sl], vel, np.ones(fr.density[sl].shape, bool)))
    assert run("evaluate", "--config", SMOKE, "--set", f"paths.data={d}",
               "--set", f"paths.forecast={fake}", "--out", tmp_path / "ev") == 0
    rep = json.load(open(tmp_path / "ev" / "report.json"))
    assert rep["rmse"] == 0.0 and rep["speed_rmse"] == 0.0 and rep["direction_error"] == 0.0
    assert all(b["rmse"] in (0.0, None) for b in rep["horizon_bins"])


def test_mismatched_tessellation_refused(smoke, tmp_path, capsys):
    d, t, f, e = smoke
    other = tmp_path / "other"
    assert run("simulate", "--config", SMOKE, "--set", "scenario.n_rings=3",
               "--set", "scenario.n_days=1", "--set", "scenario.seasons=[2020]",
               "--out", other) == 0
    assert run("forecast", "--config", SMOKE, "--set", f"paths.data={other}",
               "--set", f"paths.checkpoint={t}/checkpoint.json", "--out", tmp_path / "f") == 2
    assert "different tessellation" in capsys.readouterr().err
    assert run("evaluate", "--config", SMOKE, "--set", f"paths.data={other}",
               "--set", f"paths.forecast={f}", "--out", tmp_path / "e") == 2


@pytest.mark.parametrize("kind", ["hex", "patch", "voronoi"])
def test_tessellate(kind, smoke, tmp_path):
    d = smoke[0]
    sets = ["--set", f"tessellation.kind={kind}", "--set", f"paths.network={d}/network.csv",
            "--set", "tessellation.buffer_km=200"]
    assert run("tessellate", *sets, "--out", tmp_path) == 0
    m = cli.read_manifest(tmp_path)
    assert m["summary"]["n_cells"] > 0
    assert ("network" in m["inputs"]) == (kind == "voronoi")


def test_cv_with_ablation(smoke, tmp_path):
    d = smoke[0]
    assert run("cv", "--config", SMOKE, "--set", f"paths.data={d}", "--set", "train.epochs=1",
               "--set", "eval.ablation=true", "--out", tmp_path) == 0
    doc = json.load(open(tmp_path / "cv_report.json"))
    assert set(doc) == {"model", "local_only"}
    held = set(doc["model"]["held_out"])
    assert len(doc["model"]["folds"]) == 3
    assert held == set(synth.read_dataset(d).network.ids)
