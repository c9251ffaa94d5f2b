"""Command-line pipeline: tessellate, simulate, train, forecast, evaluate, cv.

Every command reads a JSON config (validated, unknown keys rejected), accepts
``--set section.key=value`` overrides and ``--seed``, and writes a
``manifest.json`` with the resolved config and sha256 hashes of inputs and outputs.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys

import jsonschema
import numpy as np

from . import evaluation as ev
from . import synth, train
from .model import (FluxModel, ModelConfig, Scaling, make_static, predict,
                    write_faces_jsonl, write_run_jsonl)
from .nets import load_checkpoint, save_checkpoint
from .obsmap import SensorFrame, read_network_csv, read_sensor_csv, write_sensor_csv
from .tessellation import (Domain, Tessellation, build_hex_patch, build_hex_tessellation,
                           build_voronoi_tessellation)

log = logging.getLogger("birdflux")

COMMANDS = ("tessellate", "simulate", "train", "forecast", "evaluate", "cv")


class CLIError(Exception):
    pass


# -- config schema -----------------------------------------------------------------------

_JSON_TYPES = {"int": "integer", "float": "number", "str": "string", "bool": "boolean",
               "tuple": "array"}


def _dataclass_schema(cls, skip=()) -> dict:
    props = {}
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        t = f.type if isinstance(f.type, str) else f.type.__name__
        props[f.name] = {"type": _JSON_TYPES.get(t, "string")}
    return {"type": "object", "properties": props, "additionalProperties": False}


def _model_schema() -> dict:
    s = _dataclass_schema(ModelConfig, skip=("scaling",))
    s["properties"]["scaling"] = {
        "type": "object", "additionalProperties": False,
        "properties": {k: {"type": "number", "exclusiveMinimum": 0}
                       for k in ("density", "velocity", "length")}}
    s["properties"]["flux"] = {"enum": ["upwind", "flowrate"]}
    return s


def config_schema() -> dict:
    obj = lambda props: {"type": "object", "properties": props, "additionalProperties": False}
    labels = {"type": "array", "items": {"type": "integer"}}
    return {
        "type": "object",
        "additionalProperties": False,
        "properties": {
            "seed": {"type": "integer", "minimum": 0},
            "tessellation": obj({
                "kind": {"enum": ["hex", "patch", "voronoi"]},
                "domain": {"type": "array", "items": {"type": "number"}, "minItems": 4,
                           "maxItems": 4},
                "cell_diameter_km": {"type": "number", "exclusiveMinimum": 0},
                "n_rings": {"type": "integer", "minimum": 1},
                "buffer_km": {"type": "number", "exclusiveMinimum": 0},
                "n_dummy": {"type": "integer", "minimum": 3},
            }),
            "scenario": _dataclass_schema(synth.ScenarioConfig, skip=("seed",)),
            "model": _model_schema(),
            "train": _dataclass_schema(train.TrainConfig, skip=("seed",)),
            "split": obj({"train_seasons": labels, "val_seasons": labels,
                          "test_seasons": labels,
                          "exclude_radars": {"type": "array", "items": {"type": "string"}}}),
            "eval": obj({"horizon": {"type": "integer", "minimum": 1},
                         "threshold": {"type": ["number", "null"]},
                         "n_folds": {"type": "integer", "minimum": 1},
                         "ablation": {"type": "boolean"}}),
            "paths": obj({k: {"type": "string"} for k in
                          ("tessellation", "network", "data", "checkpoint", "forecast")}),
        },
    }


DEFAULTS = {
    "seed": 0,
    "tessellation": {"kind": "hex", "domain": [0.0, 1000.0, 0.0, 1000.0],
                     "cell_diameter_km": 137.5, "n_rings": 2, "buffer_km": 450.0,
                     "n_dummy": 60},
    "split": {"train_seasons": [2013, 2014, 2015], "val_seasons": [2019],
              "test_seasons": [2020], "exclude_radars": []},
    "eval": {"horizon": 72, "threshold": None, "n_folds": 10, "ablation": False},
}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: dict, sets: list) -> dict:
    for item in sets or ():
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise CLIError(f"--set expects section.key=value, got {item!r}")
        path, value = item.split("=", 1)
        section, key = path.split(".", 1)
        cfg.setdefault(section, {})[key] = _parse_value(value)
    return cfg


def load_config(path, sets=None, seed=None) -> dict:
    cfg = {}
    if path:
        with open(path) as fh:
            cfg = json.load(fh)
    cfg = apply_overrides(cfg, sets)
    if seed is not None:
        cfg["seed"] = seed
    try:
        jsonschema.validate(cfg, config_schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise CLIError(f"config error at {where}: {exc.message}") from None
    resolved = {k: (dict(v) if isinstance(v, dict) else v) for k, v in DEFAULTS.items()}
    for k, v in cfg.items():
        if isinstance(v, dict):
            resolved.setdefault(k, {}).update(v)
        else:
            resolved[k] = v
    return resolved


# -- manifests ---------------------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(out, command, cfg, inputs: dict, outputs: list, extra=None) -> dict:
    doc = {
        "command": command,
        "config": cfg,
        "inputs": {k: sha256_file(p) for k, p in sorted(inputs.items())},
        "outputs": {name: sha256_file(os.path.join(out, name)) for name in sorted(outputs)},
    }
    if extra:
        doc.update(extra)
    with open(os.path.join(out, "manifest.json"), "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
    return doc


def read_manifest(directory) -> dict:
    path = os.path.join(directory, "manifest.json")
    if not os.path.exists(path):
        raise CLIError(f"missing manifest in {directory}")
    with open(path) as fh:
        return json.load(fh)


def _require(path, what):
    if not path:
        raise CLIError(f"paths.{what} is required")
    if not os.path.exists(path):
        raise CLIError(f"{what} not found: {path}")
    return path


# -- builders ----------------------------------------------------------------------------

def scenario_config(cfg) -> synth.ScenarioConfig:
    return synth.ScenarioConfig.from_dict({**cfg.get("scenario", {}), "seed": cfg["seed"]})


def model_config(cfg) -> ModelConfig:
    try:
        return ModelConfig.from_dict(cfg.get("model", {}))
    except (TypeError, ValueError) as exc:
        raise CLIError(f"model config: {exc}") from None


def train_config(cfg) -> train.TrainConfig:
    try:
        return train.TrainConfig(**{**cfg.get("train", {}), "seed": cfg["seed"]})
    except (TypeError, ValueError) as exc:
        raise CLIError(f"train config: {exc}") from None


def _load_dataset(cfg):
    data = _require(cfg.get("paths", {}).get("data"), "data")
    return data, synth.read_dataset(data)


def _seasons(ds, labels, what):
    missing = [l for l in labels if l not in ds.seasons]
    if missing:
        raise CLIError(f"{what}: seasons {missing} not in dataset")
    return list(labels)


def _split_ids(ds, cfg):
    excl = set(cfg["split"].get("exclude_radars", []))
    unknown = excl - set(ds.network.ids)
    if unknown:
        raise CLIError(f"unknown radars in split.exclude_radars: {sorted(unknown)}")
    return tuple(r for r in ds.network.ids if r not in excl)


# -- commands ----------------------------------------------------------------------------

def cmd_tessellate(cfg, out):
    t = cfg["tessellation"]
    inputs = {}
    if t["kind"] == "hex":
        tess = build_hex_tessellation(Domain(*t["domain"]), t["cell_diameter_km"])
    elif t["kind"] == "patch":
        tess = build_hex_patch(t["n_rings"], t["cell_diameter_km"])
    else:
        net_path = _require(cfg.get("paths", {}).get("network"), "network")
        inputs["network"] = net_path
        net = read_network_csv(net_path)
        tess = build_voronoi_tessellation(net.locations, t["buffer_km"], t["n_dummy"])
    with open(os.path.join(out, "tessellation.json"), "w") as fh:
        fh.write(tess.to_json())
    return inputs, ["tessellation.json"], {"n_cells": tess.n_cells}


def cmd_simulate(cfg, out):
    sc = scenario_config(cfg)
    ds = synth.generate(sc)
    written = synth.write_dataset(out, ds)
    return {}, written, {"n_cells": ds.tess.n_cells, "n_radars": len(ds.network)}


def _dataset_hash(data_dir) -> str:
    return sha256_file(os.path.join(data_dir, "tessellation.json"))


def cmd_train(cfg, out):
    data, ds = _load_dataset(cfg)
    mc, tc = model_config(cfg), train_config(cfg)
    split = cfg["split"]
    ids = _split_ids(ds, cfg)
    prep = lambda labels: [train.prepare_season(ds.seasons[l], ds.tess, ds.network, ids, ids,
                                                mc.scaling, mc.k_neighbors) for l in labels]
    tr = prep(_seasons(ds, split["train_seasons"], "train"))
    va = prep(_seasons(ds, split["val_seasons"], "validation")) or None
    model = FluxModel(mc, ds.tess, make_static(ds.tess, ds.landcover, mc.scaling))
    res = train.fit(model, tr, tc, va)
    manifest = {"tessellation_sha256": _dataset_hash(data),
                "decoder_input_order": ["rho_hat", "env", "static_embedding", "encoder_state"],
                "train": tc.to_dict(), "input_radars": list(ids),
                "best_epoch": res.best_epoch, "status": res.status}
    save_checkpoint(os.path.join(out, "checkpoint.json"), res.params, mc.to_dict(), manifest)
    train.write_log_csv(os.path.join(out, "train_log.csv"), res.log)
    with open(os.path.join(out, "validation.csv"), "w") as fh:
        fh.write("epoch,val_loss\n")
        for e, v in enumerate(res.val_loss):
            fh.write(f"{e},{v!r}\n")
    inputs = {"tessellation": os.path.join(data, "tessellation.json")}
    for l in split["train_seasons"] + split["val_seasons"]:
        inputs[f"sensors_{l}"] = os.path.join(data, f"sensors_{l}.csv")
    return inputs, ["checkpoint.json", "train_log.csv", "validation.csv"], \
        {"status": res.status, "best_epoch": res.best_epoch}


def _load_model(cfg, ds, data):
    ckpt = _require(cfg.get("paths", {}).get("checkpoint"), "checkpoint")
    params, mcd, manifest = load_checkpoint(ckpt)
    if manifest.get("tessellation_sha256") != _dataset_hash(data):
        raise CLIError("checkpoint was trained on a different tessellation")
    mc = ModelConfig.from_dict(mcd)
    model = FluxModel(mc, ds.tess, make_static(ds.tess, ds.landcover, mc.scaling))
    return ckpt, model, params, manifest


def cmd_forecast(cfg, out):
    data, ds = _load_dataset(cfg)
    ckpt, model, params, manifest = _load_model(cfg, ds, data)
    mc = model.config
    ids = tuple(manifest.get("input_radars") or ds.network.ids)
    horizon = cfg["eval"]["horizon"]
    labels = _seasons(ds, cfg["split"]["test_seasons"], "test")
    seasons = [train.prepare_season(ds.seasons[l], ds.tess, ds.network, ids, ds.network.ids,
                                    mc.scaling, mc.k_neighbors) for l in labels]
    seqs = train.make_sequences(seasons, mc.context, horizon, "eval", 1,
                                cfg.get("train", {}).get("max_missing", 0.1))
    os.makedirs(os.path.join(out, "radar"), exist_ok=True)
    runs_path, faces_path = os.path.join(out, "cells.jsonl"), os.path.join(out, "faces.jsonl")
    for p in (runs_path, faces_path):
        open(p, "w").close()
    written = ["cells.jsonl", "faces.jsonl", "forecast.json"]
    index = []
    for s, q in enumerate(seqs):
        sd = seasons[q.season]
        b = train.assemble(seasons, [q], horizon)
        run = predict(model, params, b.pseudo, b.env, b.rho0, horizon)
        times = sd.times[q.origin + 1:q.origin + 1 + horizon]
        write_run_jsonl(runs_path, run, mc.scaling, ds.tess.n_cells, times, sequence=s)
        write_faces_jsonl(faces_path, run, mc.scaling, ds.tess.face_i, ds.tess.face_j, sequence=s)
        O = sd.observe
        rho = run.rho[1:] / mc.scaling.density @ O.T
        vel = np.stack([run.velocity[..., 0] @ O.T, run.velocity[..., 1] @ O.T], -1) / mc.scaling.velocity
        name = f"radar/seq_{s:03d}.csv"
        write_sensor_csv(os.path.join(out, name), times, ds.network.ids,
                         SensorFrame(rho, vel, np.ones(rho.shape, dtype=bool)))
        written.append(name)
        index.append({"sequence": s, "season": int(labels[q.season]),
                      "origin": str(sd.times[q.origin]), "file": name,
                      "missing_fraction": q.missing_fraction})
    with open(os.path.join(out, "forecast.json"), "w") as fh:
        json.dump({"horizon": horizon, "sequences": index,
                   "data_sha256": _dataset_hash(data)}, fh, indent=1, sort_keys=True)
    inputs = {"checkpoint": ckpt, "tessellation": os.path.join(data, "tessellation.json")}
    return inputs, written, {"n_sequences": len(seqs)}


def load_forecast_arrays(forecast_dir, ds):
    """Predicted and observed radar arrays (S, K, M) for a forecast directory."""
    with open(os.path.join(forecast_dir, "forecast.json")) as fh:
        idx = json.load(fh)
    K = idx["horizon"]
    ids = ds.network.ids
    P, PV, O, OV, MK = [], [], [], [], []
    for rec in idx["sequences"]:
        season = ds.seasons.get(rec["season"])
        origin = np.datetime64(rec["origin"], "h")
        hit = np.flatnonzero(season.times == origin) if season is not None else []
        if len(hit) == 0:
            raise CLIError(f"{rec['file']}: origin {rec['origin']} not in the dataset")
        t0 = int(hit[0])
        times, _, pf = read_sensor_csv(os.path.join(forecast_dir, rec["file"]), ids)
        if len(times) != K or times[0] != season.times[t0 + 1]:
            raise CLIError(f"{rec['file']}: time axis does not match the dataset")
        sl = slice(t0 + 1, t0 + 1 + K)
        f = season.frames
        P.append(pf.density)
        PV.append(pf.velocity)
        O.append(f.density[sl])
        OV.append(np.where(f.velocity_valid()[sl][..., None], f.velocity[sl], np.nan))
        MK.append(f.valid[sl] & season.night[sl][:, None])
    st = lambda xs: np.stack(xs) if xs else np.zeros((0, K, len(ids)))
    return idx, st(P), st(PV), st(O), st(OV), st(MK).astype(bool)


def load_cell_forecasts(forecast_dir, n_seq: int, horizon: int, n_cells: int):
    """Cell velocity (S, K, N, 2) and source (S, K, N) from ``cells.jsonl``."""
    vel = np.full((n_seq, horizon, n_cells, 2), np.nan)
    src = np.full((n_seq, horizon, n_cells), np.nan)
    with open(os.path.join(forecast_dir, "cells.jsonl")) as fh:
        for line in fh:
            r = json.loads(line)
            s, k, c = r["sequence"], r["step"] - 1, r["cell"]
            vel[s, k, c] = (r["vx"], r["vy"])
            src[s, k, c] = r["s"]
    return vel, src


def _truth_recovery(forecast_dir, ds, idx):
    """Night-time comparison of forecast cell fields with synthetic ground truth."""
    recs = idx["sequences"]
    if not recs or any(ds.seasons[r["season"]].truth is None for r in recs):
        return None
    labels = sorted({r["season"] for r in recs})
    seasons = [ds.seasons[l] for l in labels]
    seqs = []
    for r in recs:
        season = ds.seasons[r["season"]]
        t0 = int(np.flatnonzero(season.times == np.datetime64(r["origin"], "h"))[0])
        seqs.append(train.Sequence(labels.index(r["season"]), t0, 1, idx["horizon"],
                                   season.times[t0], r["missing_fraction"]))
    vel, src = load_cell_forecasts(forecast_dir, len(recs), idx["horizon"], ds.tess.n_cells)
    fc = ev.SequenceForecasts(*(np.zeros(0),) * 5, np.zeros(0), vel, src)
    interior = np.flatnonzero(~ds.tess.boundary)
    return ev.oracle_recovery(fc, seqs, seasons, [s.truth for s in seasons], idx["horizon"],
                              interior)


def cmd_evaluate(cfg, out):
    data, ds = _load_dataset(cfg)
    fdir = _require(cfg.get("paths", {}).get("forecast"), "forecast")
    with open(os.path.join(fdir, "forecast.json")) as fh:
        if json.load(fh).get("data_sha256") != _dataset_hash(data):
            raise CLIError("forecast was produced for a different dataset")
    idx, pred, pv, obs, ov, mask = load_forecast_arrays(fdir, ds)
    ids = ds.network.ids
    thr = cfg["eval"]["threshold"]
    if thr is None:
        thr = ev.event_threshold(obs, mask) if mask.any() else 0.0
    p, r = ev.precision_recall(pred, obs, thr, mask)
    speed, direction = ev.velocity_metrics(pv, ov, obs, mask)
    hb, db = ev.binned_reports(pred, obs, mask)
    per = ev.per_radar_rmse(pred, obs, mask, ids)
    rep = ev.MetricReport(ev.rmse(pred, obs, mask), p, r, thr, speed, direction,
                          int(mask.sum()), hb, db, per)
    doc = rep.to_dict()
    train_labels = [l for l in cfg["split"]["train_seasons"] if l in ds.seasons]
    if train_labels:
        ha = ev.historical_average([ds.seasons[l] for l in train_labels])
        seasons = [ds.seasons[rec["season"]] for rec in idx["sequences"]]
        hp = []
        for rec, season in zip(idx["sequences"], seasons):
            t0 = int(np.flatnonzero(season.times == np.datetime64(rec["origin"], "h"))[0])
            t = np.arange(t0 + 1, t0 + 1 + idx["horizon"])
            hours = (season.times[t] - season.times[0].astype("datetime64[D]")).astype(int)
            hp.append(ha.predict(hours // 24, hours % 24)[0])
        if hp:
            doc["historical_average_rmse"] = ev.rmse(np.stack(hp), obs, mask)
    truth = _truth_recovery(fdir, ds, idx)
    if truth is not None:
        doc["truth_recovery"] = truth
    with open(os.path.join(out, "report.json"), "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
    ev.write_per_radar_csv(os.path.join(out, "per_radar.csv"), per)
    with open(os.path.join(out, "predictions_long.csv"), "w") as fh:
        fh.write("sequence,step,radar_id,pred_density,obs_density,counted\n")
        for s in range(pred.shape[0]):
            for k in range(pred.shape[1]):
                for m, rid in enumerate(ids):
                    fh.write(f"{s},{k + 1},{rid},{pred[s, k, m]!r},{obs[s, k, m]!r},"
                             f"{int(mask[s, k, m])}\n")
    inputs = {"forecast": os.path.join(fdir, "forecast.json"),
              "tessellation": os.path.join(data, "tessellation.json")}
    return inputs, ["report.json", "per_radar.csv", "predictions_long.csv"], {"rmse": rep.rmse}


def cmd_cv(cfg, out):
    data, ds = _load_dataset(cfg)
    mc, tc = model_config(cfg), train_config(cfg)
    split, e = cfg["split"], cfg["eval"]
    variants = [("model", mc)]
    if e["ablation"]:
        variants.append(("local_only", dataclasses.replace(mc, use_fluxes=False)))
    doc = {}
    for name, m in variants:
        res = ev.run_spatial_cv(ds, m, tc, e["n_folds"], cfg["seed"],
                                _seasons(ds, split["train_seasons"], "train"),
                                _seasons(ds, split["val_seasons"], "validation"),
                                _seasons(ds, split["test_seasons"], "test"), e["horizon"])
        doc[name] = res.to_dict()
        ev.write_per_radar_csv(os.path.join(out, f"per_radar_{name}.csv"), res.held_out,
                               res.relative_change)
    with open(os.path.join(out, "cv_report.json"), "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
    outputs = ["cv_report.json"] + [f"per_radar_{n}.csv" for n, _ in variants]
    return {"tessellation": os.path.join(data, "tessellation.json")}, outputs, {}


HANDLERS = {"tessellate": cmd_tessellate, "simulate": cmd_simulate, "train": cmd_train,
            "forecast": cmd_forecast, "evaluate": cmd_evaluate, "cv": cmd_cv}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="birdflux", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
        p.add_argument("-v", "--verbose", action="store_true")
    return ap


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.set, args.seed)
        os.makedirs(args.out, exist_ok=True)
        inputs, outputs, extra = HANDLERS[args.command](cfg, args.out)
        write_manifest(args.out, args.command, cfg, inputs, outputs, {"summary": extra})
    except (CLIError, OSError, ValueError, KeyError) as exc:
        print(f"birdflux {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
