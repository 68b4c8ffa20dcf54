"""Command-line interface: ``lavaheat <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .building import generate_portfolio, simulate, to_jsonable
from .config import RunConfig
from .errors import ConfigError, DataError, LavaError
from .estimator import recursive_update
from .features import build_design, gamma_labels
from .forecaster import predict_horizon, train, walk_forward, _index
from .persistence import load_state, save_state
from .timeseries import HOUR, ConsumerDataset, export_csv, format_timestamp, ingest_csv, parse_timestamp

log = logging.getLogger("lavaheat")

FORECAST_COLUMNS = ("timestamp", "actual", "y_hat", "y_nom", "y_res", "variance")


# --------------------------------------------------------------------------
# helpers

def _num(x: float) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _timestamp(text: str, what: str):
    try:
        return parse_timestamp(text)
    except ValueError as exc:
        raise ConfigError(f"{what}: {exc}") from None


def _read_dataset(args, cfg: RunConfig) -> ConsumerDataset:
    data = cfg.values["data"]
    try:
        load = ingest_csv(args.load, "load", data["on_conflict"])
        temp = ingest_csv(args.temperature, "temperature", data["on_conflict"])
    except OSError as exc:
        raise DataError(str(exc)) from None
    path = Path(args.load).resolve()
    # simulate writes <dir>/load.csv, so the directory is the better name there
    consumer = args.consumer_id or (path.parent.name if path.stem == "load" else path.stem)
    return ConsumerDataset.from_series(consumer, load, temp, cfg.holidays(), data["tz"],
                                       data["max_interp_hours"])


def _write_forecast_csv(path: Path, rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FORECAST_COLUMNS)
        for ts, *vals in rows:
            w.writerow([format_timestamp(ts), *(_num(v) for v in vals)])


def read_forecast_csv(path) -> dict:
    """Columns of a forecast CSV written by ``evaluate`` or ``predict``."""
    try:
        with Path(path).open(newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            missing = {"timestamp", "y_hat", "variance"} - set(reader.fieldnames or ())
            if missing:
                raise DataError(f"{path}: missing columns {sorted(missing)}")
            rows = list(reader)
    except OSError as exc:
        raise DataError(str(exc)) from None

    def col(name):
        return np.array([float(r[name]) if r[name] else np.nan for r in rows])

    return {"timestamp": [r["timestamp"] for r in rows], "y_hat": col("y_hat"), "variance": col("variance")}


# --------------------------------------------------------------------------
# commands

def cmd_simulate(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sim = cfg.values["simulator"]
    sim_cfg = cfg.sim_config()
    params, schedule = cfg.building()
    if sim["consumers"] == 1:
        results = [simulate(params, schedule, sim_cfg, consumer_id="consumer-000")]
        dirs = [out]
    else:
        results = generate_portfolio(sim["consumers"], seed=sim["seed"], cfg=sim_cfg, base=params,
                                     schedule=schedule)
        dirs = [out / r.dataset.consumer_id for r in results]
    consumers = []
    for res, d in zip(results, dirs):
        d.mkdir(parents=True, exist_ok=True)
        export_csv(res.dataset.load, d / "load.csv")
        export_csv(res.dataset.temperature, d / "temperature.csv")
        with (d / "truth.csv").open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            keys = ("Q_sh", "Q_v", "Q_int", "Q_tw", "T_b")
            w.writerow(("timestamp",) + keys)
            for ts, row in res.truth_rows():
                w.writerow([format_timestamp(ts)] + [repr(row[k]) for k in keys])
        consumers.append({
            "consumer_id": res.dataset.consumer_id,
            "directory": str(d.relative_to(out)) if d != out else ".",
            "building": to_jsonable(res.params),
            "schedule": to_jsonable(res.schedule),
        })
        log.info("simulated %s: %d hours, mean load %.3f kW", res.dataset.consumer_id,
                 len(res.dataset), float(np.nanmean(res.dataset.load.values)))
    _write_json(out / "manifest.json", {
        "generator": f"lavaheat {__version__}",
        "seed": sim["seed"],
        "config": cfg.values,
        "simulation": to_jsonable(sim_cfg),
        "consumers": consumers,
        "files": ["load.csv", "temperature.csv", "truth.csv"],
    })
    return 0


def _train_window(dataset: ConsumerDataset, cfg: RunConfig):
    split = cfg.split(dataset.start)
    stop = _index(dataset.start, split)
    if not 0 < stop <= len(dataset):
        raise DataError(f"training window ending {format_timestamp(split)} lies outside the data "
                        f"({format_timestamp(dataset.start)} .. {format_timestamp(dataset.load.end)})")
    return split, stop


def cmd_train(args, cfg: RunConfig) -> int:
    dataset = _read_dataset(args, cfg)
    mc = cfg.model_config()
    split, stop = _train_window(dataset, cfg)
    design = build_design(dataset, mc.nominal, mc.latent)
    state = train(design, stop, mc)
    meta = {
        "consumer_id": dataset.consumer_id,
        "data_start": format_timestamp(dataset.start),
        "trained_through": format_timestamp(split - HOUR),
        "tz": dataset.tz,
    }
    save_state(args.out, state, mc, meta)
    log.info("trained %s on %d samples: log-likelihood %.6f, %d non-zero latent parameters, %d EM sweeps",
             dataset.consumer_id, int(state.n), state.loglik, state.nonzero_params, state.n_iter)
    print(json.dumps({"loglik": state.loglik, "nonzero_params": state.nonzero_params,
                      "n": state.n, "n_iter": state.n_iter, "state": str(args.out)}))
    return 0


def cmd_predict(args, cfg: RunConfig) -> int:
    state, mc, meta = load_state(args.state)
    dataset = _read_dataset(args, cfg)
    issue = _timestamp(args.issue_time, "--issue-time")
    H = args.horizon or cfg.H
    design = build_design(dataset, mc.nominal, mc.latent)
    i_issue = _index(dataset.start, issue)
    if args.update and meta.get("trained_through"):
        # bring the state up to date with the loads observed since training
        first = _index(dataset.start, parse_timestamp(meta["trained_through"])) + 1
        for i in range(max(first, 0), min(i_issue + 1, len(dataset))):
            if design.usable[i]:
                recursive_update(state, design.phi[i], design.gamma[i], design.y[i], mc.em)
        meta = dict(meta, trained_through=format_timestamp(issue))
    forecasts = predict_horizon(state, dataset, issue, H, mc, design)
    rows = []
    for f in forecasts:
        t = i_issue + f.horizon
        actual = design.y[t] if design.y_observed[t] else float("nan")
        y_hat = max(f.y_hat, 0.0) if mc.clamp else f.y_hat
        rows.append((f.target_time, actual, y_hat, f.y_nom, f.y_res, f.variance))
    _write_forecast_csv(Path(args.out), rows)
    if args.state_out:
        save_state(args.state_out, state, mc, meta)
    return 0


def cmd_evaluate(args, cfg: RunConfig) -> int:
    dataset = _read_dataset(args, cfg)
    state = None
    mc = cfg.model_config()
    if args.state:
        state, mc, _ = load_state(args.state)
        if cfg.values["evaluation"]["clamp"]:
            mc = type(mc)(mc.nominal, mc.latent, mc.em, mc.lam, True)
    split, _ = _train_window(dataset, cfg)
    res = walk_forward(dataset, split, cfg.H, mc, state=state)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_forecast_csv(out / "forecast.csv", res.rows())
    report = res.report.to_dict()
    report.update(consumer_id=dataset.consumer_id, split=format_timestamp(split))
    _write_json(out / "report.json", report)
    log.info("%s: rRMSE %.4f (seasonal naive %.4f), coverage %.3f over %d hours",
             dataset.consumer_id, res.report.rrmse, res.report.baseline_rrmse,
             res.report.coverage95, res.report.n_scored)
    print(json.dumps(report))
    return 0


def cmd_aggregate(args, cfg: RunConfig) -> int:
    if not args.forecasts:
        raise DataError("no forecast files given")
    tables = [read_forecast_csv(p) for p in args.forecasts]
    stamps = tables[0]["timestamp"]
    for path, tab in zip(args.forecasts[1:], tables[1:]):
        if tab["timestamp"] != stamps:
            raise DataError(f"{path}: timeline differs from {args.forecasts[0]}")
    Y = np.array([t["y_hat"] for t in tables])
    V = np.array([t["variance"] for t in tables])
    with Path(args.out).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("timestamp", "y_tot", "variance_tot", "n_consumers"))
        for i, ts in enumerate(stamps):
            ok = ~(np.isnan(Y[:, i]) | np.isnan(V[:, i]))
            if not ok.all():
                w.writerow((ts, "", "", int(ok.sum())))
                continue
            w.writerow((ts, repr(math.fsum(Y[:, i])), repr(math.fsum(V[:, i])), len(tables)))
    return 0


def cmd_inspect_state(args, cfg: RunConfig) -> int:
    state, mc, meta = load_state(args.state)
    labels = gamma_labels(mc.latent)
    order = np.argsort(-np.abs(state.z_hat))
    top = [{"index": int(k), "label": labels[k], "z_hat": float(state.z_hat[k]), "d": float(state.d[k])}
           for k in order[:args.top] if state.active[k]]
    print(json.dumps({
        "meta": meta,
        "p": state.p, "K": state.K, "n": state.n, "lam": state.stats.lam,
        "sigma2": state.sigma2, "loglik": None if math.isnan(state.loglik) else state.loglik,
        "nonzero_params": state.nonzero_params, "n_iter": state.n_iter,
        "theta": [float(x) for x in state.theta],
        "top_components": top,
    }, indent=2))
    return 0


# --------------------------------------------------------------------------
# argument parsing

def _add_data_args(p):
    p.add_argument("--load", required=True, help="load CSV (timestamp,value in kW)")
    p.add_argument("--temperature", required=True, help="outdoor temperature CSV (timestamp,value in °C)")
    p.add_argument("--consumer-id", help="defaults to the load file name")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one configuration key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="lavaheat", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"lavaheat {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="generate synthetic consumer data")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", parents=[common], help="fit a model on the training window")
    _add_data_args(p)
    p.add_argument("--out", required=True, help="state file to write")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[common], help="H-hour forecast from a state file")
    _add_data_args(p)
    p.add_argument("--state", required=True)
    p.add_argument("--issue-time", required=True, help="ISO timestamp of the last known load")
    p.add_argument("--horizon", type=int, help="hours ahead (default: evaluation.H)")
    p.add_argument("--no-update", dest="update", action="store_false",
                   help="do not fold loads observed after training into the state")
    p.add_argument("--state-out", help="write the updated state here")
    p.add_argument("--out", required=True, help="forecast CSV to write")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", parents=[common], help="walk-forward evaluation")
    _add_data_args(p)
    p.add_argument("--state", help="start from this trained state instead of training")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("aggregate", parents=[common], help="sum consumer forecasts into a portfolio")
    p.add_argument("forecasts", nargs="*", help="forecast CSVs from evaluate or predict")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("inspect-state", parents=[common], help="summarise a state file")
    p.add_argument("--state", required=True)
    p.add_argument("--top", type=int, default=10, help="number of latent components to list")
    p.set_defaults(func=cmd_inspect_state)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config, args.set)
        return args.func(args, cfg)
    except LavaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
