"""Command-line pipeline: demo generation, simulation, dataset build,
training, prediction, evaluation, hyperparameter search, and benchmarking.

Every command reads a flat key-value run config, writes its artifacts under
the configured output directory, and drops a small JSON manifest recording
the producing command, config hash, and seed, so re-runs are reproducible
and stage files are self-describing.

Exit codes: 0 ok, 1 usage error, 2 data error, 3 numerical error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import demo, hyperopt, metrics, nnet, svrkrig
from .errors import FloodemuError, InstabilityError, NumericalBlowupError
from .hydrograph import Hydrograph, hydrograph_from_csv, hydrograph_to_csv, make_boundary_set
from .metrics import ControlPoint
from .raster import (CellIndex, DefenseSet, RasterGrid, embed_defenses,
                     read_ascii_grid, write_ascii_grid)
from .solver import ScenarioRun, SolverConfig, run_scenario

_CONFIG_SCHEMA = {
    "dem": str, "dem_defended": str, "defenses": str, "control_points": str,
    "out_dir": str, "hydrograph_dir": str,
    "train_scenarios": str, "test_scenarios": str,
    "seed": int,
    "solver.manning_n": float, "solver.alpha": float, "solver.depth_floor": float,
    "solver.output_interval": float, "solver.duration": float, "solver.open_edge": str,
    "solver.dt_max": float,
    "features.lags": int, "features.include_time": bool, "features.lag_padding": str,
    "dataset.threshold": float,
    "split.val_fraction": float, "split.mode": str,
    "net.conv_filters": str, "net.kernel_size": int, "net.dense_units": str,
    "net.use_batchnorm": bool, "net.dropout_rate": float,
    "train.batch_size": int, "train.learning_rate": float, "train.max_epochs": int,
    "train.patience": int, "train.min_delta": float,
    "svr.n_locations": int, "svr.cost": float, "svr.epsilon": float, "svr.gamma": float,
    "hyperopt.budget": int, "hyperopt.strategy": str,
}

_CONFIG_DEFAULTS = {
    "seed": 0,
    "solver.manning_n": 0.055, "solver.alpha": 0.7, "solver.depth_floor": 1e-3,
    "solver.output_interval": 900.0, "solver.duration": demo.DURATION,
    "solver.open_edge": "north", "solver.dt_max": 10.0,
    "features.lags": 8, "features.include_time": True, "features.lag_padding": "repeat_first",
    "dataset.threshold": 0.3,
    "split.val_fraction": 0.25, "split.mode": "by_scenario",
    "net.conv_filters": "32,128", "net.kernel_size": 3, "net.dense_units": "32,256,512",
    "net.use_batchnorm": False, "net.dropout_rate": 0.0,
    "train.batch_size": 10, "train.learning_rate": 1e-3, "train.max_epochs": 300,
    "train.patience": 15, "train.min_delta": 1e-5,
    "svr.n_locations": 250, "svr.cost": 25.296, "svr.epsilon": 0.031, "svr.gamma": 0.016,
    "hyperopt.budget": 12, "hyperopt.strategy": "smbo",
}


class RunConfig:
    """Typed view over the flat key-value config document."""

    def __init__(self, values: dict, base_dir: Path):
        unknown = set(values) - set(_CONFIG_SCHEMA)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        self.values = dict(_CONFIG_DEFAULTS)
        self.values.update(values)
        self.base_dir = Path(base_dir)

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        values = {}
        for i, line in enumerate(path.read_text().splitlines()):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{i + 1}: expected 'key = value'")
            key, _, raw = line.partition("=")
            key = key.strip()
            raw = raw.strip()
            if key not in _CONFIG_SCHEMA:
                raise ValueError(f"{path}:{i + 1}: unknown key {key!r}")
            kind = _CONFIG_SCHEMA[key]
            if kind is bool:
                values[key] = raw.lower() in ("1", "true", "yes")
            else:
                values[key] = kind(raw)
        return cls(values, path.parent)

    def __getitem__(self, key):
        return self.values[key]

    def get(self, key, default=None):
        return self.values.get(key, default)

    def path(self, key) -> Path:
        if key not in self.values:
            raise FileNotFoundError(
                f"config key {key!r} not set; run the producing command first")
        return self.base_dir / self.values[key]

    def out(self, *parts) -> Path:
        p = self.base_dir / self.values.get("out_dir", "runs")
        for part in parts:
            p = p / part
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.values, sort_keys=True).encode()).hexdigest()[:16]

    def solver_config(self, duration=None) -> SolverConfig:
        open_edge = self.values["solver.open_edge"]
        return SolverConfig(
            manning_n=self.values["solver.manning_n"], alpha=self.values["solver.alpha"],
            depth_floor=self.values["solver.depth_floor"],
            output_interval=self.values["solver.output_interval"],
            duration=self.values["solver.duration"] if duration is None else duration,
            dt_max=self.values["solver.dt_max"],
            open_edge=None if open_edge in ("", "none", "closed") else open_edge)

    def feature_spec(self) -> ds.FeatureSpec:
        return ds.FeatureSpec(lags=self.values["features.lags"], upstream_count=3,
                              include_time=self.values["features.include_time"],
                              lag_padding=self.values["features.lag_padding"])

    def net_spec(self, input_len, output_dim) -> nnet.NetSpec:
        return nnet.NetSpec(
            input_len=input_len, output_dim=output_dim,
            conv_filters=tuple(int(v) for v in str(self.values["net.conv_filters"]).split(",")),
            kernel_size=self.values["net.kernel_size"],
            dense_units=tuple(int(v) for v in str(self.values["net.dense_units"]).split(",")),
            use_batchnorm=self.values["net.use_batchnorm"],
            dropout_rate=self.values["net.dropout_rate"])

    def train_config(self, **overrides) -> nnet.TrainConfig:
        kw = dict(batch_size=self.values["train.batch_size"],
                  learning_rate=self.values["train.learning_rate"],
                  max_epochs=self.values["train.max_epochs"],
                  patience=self.values["train.patience"],
                  min_delta=self.values["train.min_delta"],
                  seed=self.values["seed"])
        kw.update(overrides)
        return nnet.TrainConfig(**kw)

    def svr_params(self) -> svrkrig.SvrParams:
        return svrkrig.SvrParams(cost=self.values["svr.cost"],
                                 epsilon=self.values["svr.epsilon"],
                                 gamma=self.values["svr.gamma"])

    def scenario_names(self, which: str) -> list[str]:
        key = f"{which}_scenarios"
        if key not in self.values:
            raise ValueError(f"config key {key!r} not set")
        return [s for s in self.values[key].split(",") if s]


def _write_manifest(path: Path, command: str, config: RunConfig, extra=None):
    doc = {"command": command, "config_hash": config.digest(), "seed": config["seed"]}
    if extra:
        doc.update(extra)
    path.write_text(json.dumps(doc, indent=1))


def config_to_text(values: dict) -> str:
    lines = [f"{k} = {values[k]}" for k in sorted(values)]
    return "\n".join(lines) + "\n"


# --- demo generation ---------------------------------------------------

def cmd_make_demo(out_dir, seed: int = 0) -> Path:
    """Emit the synthetic catchment and a ready-to-run config; returns the
    config path."""
    out = Path(out_dir)
    (out / "hydrographs").mkdir(parents=True, exist_ok=True)
    cat = demo.make_demo_catchment(seed)

    (out / "dem.asc").write_text(write_ascii_grid(cat.dem))
    defended = embed_defenses(cat.dem, cat.defenses)
    (out / "dem_defended.asc").write_text(write_ascii_grid(defended))

    def_lines = [f"crest_height = {cat.defenses.crest_height}"]
    for seg in cat.defenses.segments:
        def_lines.append("segment = " + " ".join(f"{c.row},{c.col}" for c in seg))
    (out / "defenses.txt").write_text("\n".join(def_lines) + "\n")

    cp_lines = ["label,row,col"]
    cp_lines.extend(f"{p.label},{p.cell.row},{p.cell.col}" for p in cat.control_points)
    (out / "control_points.csv").write_text("\n".join(cp_lines) + "\n")

    names = []
    for kind, triples in (("train", cat.train_hydros), ("test", cat.test_hydros)):
        for i, triple in enumerate(triples):
            name = f"{kind}_{chr(ord('a') + i)}"
            names.append((kind, name))
            man = []
            for j, ((label, cell), hyd) in enumerate(zip(cat.inflow_points, triple), start=1):
                csv_name = f"{name}_u{j}.csv"
                (out / "hydrographs" / csv_name).write_text(hydrograph_to_csv(hyd))
                man.extend([f"label.{j} = {label}", f"row.{j} = {cell.row}",
                            f"col.{j} = {cell.col}", f"file.{j} = {csv_name}"])
            (out / "hydrographs" / f"{name}.manifest").write_text("\n".join(man) + "\n")

    values = dict(_CONFIG_DEFAULTS)
    values.update({
        "dem": "dem.asc", "dem_defended": "dem_defended.asc", "defenses": "defenses.txt",
        "control_points": "control_points.csv", "hydrograph_dir": "hydrographs",
        "out_dir": "runs", "seed": seed,
        "train_scenarios": ",".join(n for k, n in names if k == "train"),
        "test_scenarios": ",".join(n for k, n in names if k == "test"),
    })
    cfg_path = out / "config.txt"
    cfg_path.write_text(config_to_text(values))
    return cfg_path


# --- shared loading helpers -------------------------------------------

def load_defenses(path) -> DefenseSet:
    crest = None
    segments = []
    for line in Path(path).read_text().splitlines():
        key, _, raw = line.partition("=")
        key = key.strip()
        if key == "crest_height":
            crest = float(raw)
        elif key == "segment":
            cells = tuple(CellIndex(*map(int, tok.split(","))) for tok in raw.split())
            segments.append(cells)
    if crest is None:
        raise ValueError(f"{path}: missing crest_height")
    return DefenseSet(segments=tuple(segments), crest_height=crest)


def load_control_points(path) -> list[ControlPoint]:
    pts = []
    for line in Path(path).read_text().splitlines()[1:]:
        label, row, col = line.split(",")
        pts.append(ControlPoint(label, CellIndex(int(row), int(col))))
    return pts


def load_boundary_set(config: RunConfig, dem: RasterGrid, scenario: str):
    hdir = config.path("hydrograph_dir")
    manifest = hdir / f"{scenario}.manifest"
    if not manifest.exists():
        raise FileNotFoundError(f"{manifest} missing; run make-demo (or supply hydrographs)")
    entries = {}
    for line in manifest.read_text().splitlines():
        if "=" in line:
            key, _, raw = line.partition("=")
            entries[key.strip()] = raw.strip()
    points, hydros = [], []
    j = 1
    while f"label.{j}" in entries:
        points.append((entries[f"label.{j}"],
                       CellIndex(int(entries[f"row.{j}"]), int(entries[f"col.{j}"]))))
        hydros.append(hydrograph_from_csv((hdir / entries[f"file.{j}"]).read_text()))
        j += 1
    return make_boundary_set(dem, points, hydros)


def load_dem(config: RunConfig, defended: bool = False) -> RasterGrid:
    key = "dem_defended" if defended else "dem"
    return read_ascii_grid(config.path(key).read_text())


def _sim_dir(config: RunConfig, scenario: str, defended: bool) -> Path:
    return config.out("sim_defended" if defended else "sim", scenario)


def simulate_scenario(config: RunConfig, scenario: str, defended: bool = False,
                      closed_walls: bool = False) -> ScenarioRun:
    dem = load_dem(config, defended)
    bset = load_boundary_set(config, dem, scenario)
    cfg = config.solver_config()
    if closed_walls:
        cfg = SolverConfig(**{**cfg.__dict__, "open_edge": None})
    return run_scenario(dem, bset, cfg, dem_id="defended" if defended else "base",
                        boundary_id=scenario)


def write_run(config: RunConfig, run: ScenarioRun, scenario: str, defended: bool = False):
    out = _sim_dir(config, scenario, defended)
    out.mkdir(parents=True, exist_ok=True)
    for t, grid in zip(run.times, run.depths):
        (out / f"depth_{int(t)}.asc").write_text(write_ascii_grid(grid))
    (out / "mass.csv").write_text(run.ledger_csv())
    _write_manifest(out / "manifest.json", "simulate", config,
                    {"scenario": scenario, "defended": defended,
                     "times": list(run.times)})


def read_run(config: RunConfig, scenario: str, defended: bool = False) -> ScenarioRun:
    out = _sim_dir(config, scenario, defended)
    manifest = out / "manifest.json"
    if not manifest.exists():
        raise FileNotFoundError(f"{out}: no simulation output; run `floodemu simulate` first")
    doc = json.loads(manifest.read_text())
    times = doc["times"]
    depths = tuple(read_ascii_grid((out / f"depth_{int(t)}.asc").read_text()) for t in times)
    ledger = []
    for line in (out / "mass.csv").read_text().splitlines()[1:]:
        ledger.append(tuple(float(v) for v in line.split(",")))
    return ScenarioRun(dem_id=doc.get("defended") and "defended" or "base",
                       boundary_id=scenario, times=tuple(times), depths=depths,
                       mass_ledger=tuple(ledger))


def cmd_simulate(config: RunConfig, scenarios=None, defended: bool = False):
    names = scenarios or (config.scenario_names("train") + config.scenario_names("test"))
    for name in names:
        run = simulate_scenario(config, name, defended)
        write_run(config, run, name, defended)
    return names


# --- dataset build -----------------------------------------------------

def build_training_dataset(config: RunConfig, defended: bool = False):
    """Features/targets for the training scenarios plus per-test-event
    features; returns (features, targets, split pair, test feature map)."""
    dem = load_dem(config, defended)
    spec = config.feature_spec()
    tau = config["dataset.threshold"]
    train_names = config.scenario_names("train")
    bsets = [load_boundary_set(config, dem, n) for n in train_names]
    runs = [read_run(config, n, defended) for n in train_names]
    feats = ds.build_features(bsets, spec)
    targs = ds.build_targets(runs, tau)
    if feats.rows != targs.rows:
        raise ValueError(f"feature rows {feats.rows} != target rows {targs.rows}")

    pair_train, pair_val = ds.split(feats, targs, ds.SplitSpec(
        val_fraction=config["split.val_fraction"], seed=config["seed"],
        mode=config["split.mode"]))
    x_train = ds.fit_normalizer(pair_train[0])
    x_val = ds.apply_normalizer(pair_val[0], x_train.norm)
    test_feats = {}
    for name in config.scenario_names("test"):
        bset = load_boundary_set(config, dem, name)
        f = ds.build_features(bset, spec)
        test_feats[name] = ds.apply_normalizer(f, x_train.norm)
    return {
        "features": feats, "targets": targs, "norm": x_train.norm,
        "train": (x_train, pair_train[1]), "val": (x_val, pair_val[1]),
        "test_features": test_feats, "dem": dem,
    }


def cmd_build_dataset(config: RunConfig, defended: bool = False):
    data = build_training_dataset(config, defended)
    tag = "_defended" if defended else ""
    base = config.out(f"dataset{tag}")
    base.mkdir(parents=True, exist_ok=True)
    ds.save_matrix(base / "features.bin", data["features"].values,
                   {"col_names": list(data["features"].col_names),
                    "norm": np.asarray(data["norm"]).tolist(),
                    "scenario_ids": data["features"].scenario_ids.tolist()})
    ds.save_matrix(base / "targets.bin", data["targets"].values,
                   {"threshold": data["targets"].threshold,
                    "cell_map": data["targets"].cell_map.tolist()})
    _write_manifest(base / "manifest.json", "build-dataset", config,
                    {"rows": data["features"].rows, "cells": data["targets"].cols})
    return data


# --- training ----------------------------------------------------------

def cmd_train_cnn(config: RunConfig, defended: bool = False, data=None):
    data = data or build_training_dataset(config, defended)
    x_train, y_train = data["train"]
    x_val, y_val = data["val"]
    spec = config.net_spec(x_train.cols, y_train.cols)
    model = nnet.init_model(spec, seed=config["seed"])
    model = nnet.train(model, (x_train, y_train), (x_val, y_val), config.train_config())
    tag = "_defended" if defended else ""
    nnet.save_model(model, config.out(f"cnn_model{tag}.bin"))
    config.out(f"cnn_training_log{tag}.csv").write_text(nnet.training_log_csv(model))
    return model, data


def cmd_train_svr(config: RunConfig, defended: bool = False, data=None):
    data = data or build_training_dataset(config, defended)
    x_train, y_train = data["train"]
    dem = data["dem"]
    tau = config["dataset.threshold"]
    wet_union = np.zeros(dem.shape, dtype=bool)
    wet_cols = (y_train.values > tau).any(axis=0)
    wet_union.ravel()[y_train.cell_map[wet_cols]] = True
    locations = svrkrig.sample_locations(dem, wet_union, n=config["svr.n_locations"],
                                         seed=config["seed"])
    models = svrkrig.train_svr_ensemble(x_train, y_train, locations, config.svr_params())
    tag = "_defended" if defended else ""
    svrkrig.save_svr_ensemble(models, config.out(f"svr_models{tag}.npz"))
    return models, data


# --- prediction and evaluation ----------------------------------------

def predict_cnn_maps(config: RunConfig, model, data, event: str):
    tau = config["dataset.threshold"]
    return nnet.predict_depth_maps(model, data["test_features"][event],
                                   data["targets"], tau)


def predict_svr_maps(config: RunConfig, models, data, event: str):
    tau = config["dataset.threshold"]
    dem = data["dem"]
    feats = data["test_features"][event]
    point_preds = np.stack([svrkrig.predict_svr(m, feats.values) for m in models], axis=1)
    rasters = []
    for t_idx in range(feats.rows):
        pts = [(m.location, float(point_preds[t_idx, i])) for i, m in enumerate(models)]
        rk = svrkrig.fit_rk(dem, pts)
        rasters.append(svrkrig.interpolate_rk(rk, dem, tau))
    return rasters


def cmd_predict(config: RunConfig, model_kind: str, event: str, defended: bool = False):
    data = build_training_dataset(config, defended)
    tag = "_defended" if defended else ""
    if model_kind == "cnn":
        model = nnet.load_model(config.out(f"cnn_model{tag}.bin"))
        maps = predict_cnn_maps(config, model, data, event)
    else:
        models = svrkrig.load_svr_ensemble(config.out(f"svr_models{tag}.npz"))
        maps = predict_svr_maps(config, models, data, event)
    out = config.out(f"pred_{model_kind}{tag}", event)
    out.mkdir(parents=True, exist_ok=True)
    run = read_run(config, event, defended)
    for t, grid in zip(run.times, maps):
        (out / f"depth_{int(t)}.asc").write_text(write_ascii_grid(grid))
    _write_manifest(out / "manifest.json", "predict", config,
                    {"model": model_kind, "event": event, "times": list(run.times)})
    return maps


def select_stage_times(run: ScenarioRun, tau: float = 0.3) -> dict[str, int]:
    """Event-relative snapshot indices for the four flood stages.

    early = first wet instant, growing = first instant at half the peak
    wetted count, peak = largest wetted count, receding = last wet instant.
    """
    counts = []
    for grid in run.depths:
        live = grid.mask()
        counts.append(int(np.sum(grid.values[live] > tau)))
    counts = np.array(counts)
    if counts.max() == 0:
        raise ValueError("scenario never wets any cell")
    peak = int(np.argmax(counts))
    wet = np.flatnonzero(counts > 0)
    early = int(wet[0])
    growing_candidates = np.flatnonzero(counts >= counts[peak] / 2)
    growing = int(growing_candidates[0])
    receding = int(wet[-1])
    return {"early": early, "growing": growing, "peak": peak, "receding": receding}


def evaluate_maps(reference: ScenarioRun, predicted_maps, control_points,
                  tau: float = 0.3) -> dict:
    """Stage-wise spatial scores plus control-point series metrics."""
    stages = select_stage_times(reference, tau)
    stage_reports = {}
    for stage, idx in stages.items():
        ref = reference.depths[idx]
        pred = predicted_maps[idx]
        rep = metrics.confusion_scores(ref, pred, tau)
        emap = metrics.error_map(ref, pred)
        live_ref = ref.values[ref.mask()]
        live_pred = pred.values[pred.mask()]
        stage_reports[stage] = {
            "time_s": reference.times[idx],
            "report": rep,
            "rmse": metrics.rmse(live_ref, live_pred),
            "p99_err": metrics.percentile_error(emap, 99.0),
            "stats_ref": metrics.descriptive_stats(ref),
            "stats_pred": metrics.descriptive_stats(pred),
            "error_map": emap,
        }

    obs_series = metrics.control_point_series(reference.depths, control_points, tau)
    pred_series = metrics.control_point_series(predicted_maps, control_points, tau)
    points = {}
    nse_values, rmse_values = [], []
    for label in obs_series:
        o, p = obs_series[label], pred_series[label]
        r = metrics.rmse(o, p)
        rmse_values.append(r)
        try:
            n = metrics.nse(o, p)
            nse_values.append(n)
        except ValueError:
            n = None  # constant observed series; excluded from the mean
        points[label] = {"rmse": r, "nse": n}
    return {
        "stages": stage_reports,
        "points": points,
        "mean_nse": float(np.mean(nse_values)) if nse_values else None,
        "mean_rmse": float(np.mean(rmse_values)) if rmse_values else None,
    }


def cmd_evaluate(config: RunConfig, event: str, model_kind: str = "cnn",
                 defended: bool = False):
    reference = read_run(config, event, defended)
    tag = "_defended" if defended else ""
    pred_dir = config.out(f"pred_{model_kind}{tag}", event)
    if not (pred_dir / "manifest.json").exists():
        raise FileNotFoundError(f"{pred_dir}: no predictions; run `floodemu predict` first")
    maps = [read_ascii_grid((pred_dir / f"depth_{int(t)}.asc").read_text())
            for t in reference.times]
    cps = load_control_points(config.path("control_points"))
    tau = config["dataset.threshold"]
    result = evaluate_maps(reference, maps, cps, tau)

    lines = ["stage,time_s,rmse,nse,precision,recall,f1,tp,fp,fn,tn,p99_err,max,mean,std"]
    for stage, info in result["stages"].items():
        rep = info["report"]
        mx, mn, sd = info["stats_pred"]
        row = metrics.report_csv_row(info["time_s"], rep,
                                     {"p99": info["p99_err"], "max": mx, "mean": mn, "std": sd})
        parts = row.split(",")
        parts[1] = repr(info["rmse"])  # rmse column
        lines.append(stage + "," + ",".join(parts))
    report_path = config.out(f"eval_{model_kind}{tag}_{event}.csv")
    report_path.write_text("\n".join(lines) + "\n")

    cp_lines = ["label,rmse,nse"]
    for label, info in result["points"].items():
        nse_txt = "undefined" if info["nse"] is None else repr(info["nse"])
        cp_lines.append(f"{label},{info['rmse']!r},{nse_txt}")
    config.out(f"eval_{model_kind}{tag}_{event}_points.csv").write_text("\n".join(cp_lines) + "\n")
    return result


# --- hyperopt and benchmark -------------------------------------------

def cmd_hyperopt(config: RunConfig, model_kind: str = "svr", budget=None, data=None):
    data = data or build_training_dataset(config)
    budget = budget or config["hyperopt.budget"]
    strategy = config["hyperopt.strategy"]
    x_train, y_train = data["train"]
    x_val, y_val = data["val"]

    if model_kind == "cnn":
        space = hyperopt.default_cnn_space()

        def objective(conf):
            spec = nnet.NetSpec(input_len=x_train.cols, output_dim=y_train.cols,
                                conv_filters=(conf["conv1"], conf["conv2"]),
                                dense_units=(conf["dense1"], conf["dense2"], conf["dense3"]))
            model = nnet.init_model(spec, seed=config["seed"])
            tc = config.train_config(batch_size=conf["batch_size"],
                                     learning_rate=conf["learning_rate"],
                                     max_epochs=min(config["train.max_epochs"], 30))
            model = nnet.train(model, (x_train, y_train), (x_val, y_val), tc)
            return nnet.loss_mse(model.forward(x_val.values), y_val.values)
    else:
        space = hyperopt.default_svr_space()
        cps = load_control_points(config.path("control_points"))
        dem = data["dem"]
        col_of = {int(f): i for i, f in enumerate(y_train.cell_map)}
        cp_cols = [col_of[p.cell.row * dem.ncols + p.cell.col] for p in cps
                   if p.cell.row * dem.ncols + p.cell.col in col_of]

        def objective(conf):
            params = svrkrig.SvrParams(cost=conf["cost"], epsilon=conf["epsilon"],
                                       gamma=conf["gamma"])
            err = 0.0
            for col in cp_cols:
                m = svrkrig.train_svr(x_train.values, y_train.values[:, col], params)
                pred = svrkrig.predict_svr(m, x_val.values)
                err += metrics.rmse(y_val.values[:, col], pred)
            return err

    best, trials = hyperopt.optimize(space, objective, budget=budget,
                                     strategy=strategy, seed=config["seed"])
    config.out(f"hyperopt_{model_kind}_trials.csv").write_text(hyperopt.trials_csv(trials))
    best_txt = "\n".join(f"{k} = {v}" for k, v in sorted(best.config.items()))
    config.out(f"hyperopt_{model_kind}_best.txt").write_text(best_txt + "\n")
    return best, trials


def cmd_benchmark(config: RunConfig, event=None, data=None, model=None):
    """Wall-clock of a full solver event run vs trained-CNN inference."""
    event = event or config.scenario_names("test")[0]
    t0 = time.perf_counter()
    run = simulate_scenario(config, event)
    solver_s = time.perf_counter() - t0

    data = data or build_training_dataset(config)
    if model is None:
        model = nnet.load_model(config.out("cnn_model.bin"))
    feats = data["test_features"][event]
    t0 = time.perf_counter()
    nnet.predict_depth_maps(model, feats, data["targets"], config["dataset.threshold"])
    cnn_s = time.perf_counter() - t0

    ratio = cnn_s / solver_s if solver_s > 0 else float("inf")
    text = ("kind,wall_clock_s\n"
            f"solver_event_run,{solver_s!r}\n"
            f"cnn_event_inference,{cnn_s!r}\n"
            f"ratio_cnn_over_solver,{ratio!r}\n")
    config.out("benchmark.csv").write_text(text)
    return {"solver_s": solver_s, "cnn_s": cnn_s, "ratio": ratio, "run": run}


# --- argparse entry point ---------------------------------------------

def _add_common(p):
    p.add_argument("--config", required=True, help="run config path")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--out", default=None, help="override output directory")
    p.add_argument("--threads", type=int, default=1, help="worker threads (1 = deterministic)")
    p.add_argument("--deterministic", action="store_true", help="force single-threaded mode")
    p.add_argument("--defended", action="store_true", help="use the defended DEM variant")


def _load_config(args) -> RunConfig:
    config = RunConfig.load(args.config)
    if args.seed is not None:
        config.values["seed"] = args.seed
    if args.out is not None:
        config.values["out_dir"] = args.out
    return config


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="floodemu",
                                     description="Flood surrogate modelling pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-demo", help="generate the synthetic demo catchment")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)

    for name, extra in [
        ("simulate", [("--scenario", None)]),
        ("build-dataset", []),
        ("train-cnn", []),
        ("train-svr", []),
        ("predict", [("--model", "cnn"), ("--event", None)]),
        ("evaluate", [("--model", "cnn"), ("--event", None)]),
        ("hyperopt", [("--model", "svr"), ("--budget", None)]),
        ("benchmark", [("--event", None)]),
    ]:
        p = sub.add_parser(name)
        _add_common(p)
        for flag, default in extra:
            p.add_argument(flag, default=default)

    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    try:
        if args.command == "make-demo":
            cfg_path = cmd_make_demo(args.out, args.seed)
            print(f"demo written; config at {cfg_path}")
            return 0
        config = _load_config(args)
        if args.command == "simulate":
            names = cmd_simulate(config, [args.scenario] if args.scenario else None,
                                 defended=args.defended)
            print(f"simulated: {', '.join(names)}")
        elif args.command == "build-dataset":
            data = cmd_build_dataset(config, defended=args.defended)
            print(f"dataset: {data['features'].rows} rows x {data['targets'].cols} cells")
        elif args.command == "train-cnn":
            model, _ = cmd_train_cnn(config, defended=args.defended)
            print(f"cnn trained: {len(model.training_log)} epochs")
        elif args.command == "train-svr":
            models, _ = cmd_train_svr(config, defended=args.defended)
            print(f"svr trained: {len(models)} locations")
        elif args.command == "predict":
            event = args.event or config.scenario_names("test")[0]
            cmd_predict(config, args.model, event, defended=args.defended)
            print(f"predicted {event} with {args.model}")
        elif args.command == "evaluate":
            event = args.event or config.scenario_names("test")[0]
            result = cmd_evaluate(config, event, args.model, defended=args.defended)
            for stage, info in result["stages"].items():
                f1 = info["report"].f1
                f1_txt = "undefined" if f1 is None else f"{f1:.3f}"
                print(f"{stage}: rmse {info['rmse']:.3f} m, F1 {f1_txt}")
            if result["mean_nse"] is not None:
                print(f"mean control-point NSE {result['mean_nse']:.3f}, "
                      f"RMSE {result['mean_rmse']:.3f} m")
        elif args.command == "hyperopt":
            best, trials = cmd_hyperopt(config, args.model,
                                        int(args.budget) if args.budget else None)
            print(f"best objective {best.objective:.4g} after {len(trials)} trials")
        elif args.command == "benchmark":
            res = cmd_benchmark(config, args.event)
            print(f"solver {res['solver_s']:.2f}s, cnn {res['cnn_s']:.2f}s, "
                  f"ratio {res['ratio']:.4f}")
        return 0
    except (FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (NumericalBlowupError, InstabilityError) as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return 3
    except FloodemuError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
