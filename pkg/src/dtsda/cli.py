"""``dtsda`` command line: synth, train, eval, run and label.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .autodiff import NonFiniteError
from .data import (
    DataError,
    WindowedDataset,
    fmt,
    load_activity_map,
    load_recordings_csv,
    make_synth_spec,
    normalize,
    pad_window_length,
    prepare_task,
    synthesize_users,
    windowed_dataset_from_recordings,
    write_activity_map,
    write_recordings_csv,
)
from .evaluation import (
    METHODS,
    ExperimentResult,
    _evaluate_model,
    emit_reports,
    evaluate,
    run_experiment,
    summarize,
    train_baseline,
)
from .labeling import label_feature_table
from .networks import ModelFileError, load_model, predict_target, save_model
from .training import TrainConfig, TrainingError, config_from_mapping, fit, write_training_log

log = logging.getLogger("dtsda")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

RECORDINGS = "recordings.csv"
ACTIVITIES = "activities.csv"
STATES = "states.csv"
DATASET_CFG = "dataset.cfg"

# keys accepted in configuration files besides the TrainConfig fields
EXTRA_KEYS = {"data", "methods", "users", "heatmaps", "window_seconds", "overlap", "log"}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)}

SYNTH_KEYS = {
    "num_classes": int, "num_states": int, "num_channels": int, "num_users": int, "separation": float,
    "state_scale": float, "mixing_shift": float, "bias_shift": float, "noise_scale": float, "seed": int,
    "shared_states": lambda v: _as_bool(v), "segments_per_activity": int, "dwell_min": int, "dwell_max": int,
    "window_len": int, "sampling_rate": float,
}


class ConfigError(ValueError):
    pass


def _as_bool(raw: str) -> bool:
    v = str(raw).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {raw!r}")


def read_config(path: str | Path, allowed: set[str] | None = None) -> dict[str, str]:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    out = {}
    for n, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if allowed is not None and key not in allowed:
            raise ConfigError(f"{path}:{n}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{path}:{n}: duplicate key {key!r}")
        out[key] = value
    return out


def train_config(values: dict[str, str]) -> TrainConfig:
    try:
        return config_from_mapping(values)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad training configuration: {exc}") from exc


# ----------------------------------------------------------------------------
# data directories: recordings.csv + activities.csv [+ dataset.cfg, states.csv]


def load_data_dir(path: str | Path, window_seconds: float | None = None, overlap: float | None = None
                  ) -> dict[str, WindowedDataset]:
    """Windowed dataset per user from a data directory."""
    root = Path(path)
    for name in (RECORDINGS, ACTIVITIES):
        if not (root / name).is_file():
            raise DataError(f"{root}: missing {name}")
    meta = read_config(root / DATASET_CFG, {"window_seconds", "overlap", "sampling_rate"}) if (
        root / DATASET_CFG).is_file() else {}
    ws = float(window_seconds if window_seconds is not None else meta.get("window_seconds", 3.0))
    ov = float(overlap if overlap is not None else meta.get("overlap", 0.5))
    rate = float(meta["sampling_rate"]) if "sampling_rate" in meta else None
    amap = load_activity_map(root / ACTIVITIES)
    names = tuple(sorted(amap, key=amap.get))
    if sorted(amap.values()) != list(range(len(amap))):
        raise DataError(f"{root / ACTIVITIES}: indices must be 0..C-1")
    recs = load_recordings_csv(root / RECORDINGS, amap, rate)
    users: dict[str, list] = {}
    for r in recs:
        users.setdefault(r.user_id, []).append(r)
    return {u: windowed_dataset_from_recordings(rs, len(names), names, ws, ov) for u, rs in sorted(users.items())}


def _user(data: dict[str, WindowedDataset], name: str) -> WindowedDataset:
    if name not in data:
        raise DataError(f"unknown user {name!r}; available: {sorted(data)}")
    return data[name]


# ----------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    raw = {}
    if args.spec:
        path = Path(args.spec)
        if not path.is_file():
            raise ConfigError(f"spec file not found: {path}")
        with open(path, newline="") as fh:
            for row in csv.reader(fh):
                if not row or row[0].strip().startswith("#") or row[0].strip() == "key":
                    continue
                if len(row) != 2:
                    raise ConfigError(f"{path}: rows must be key,value")
                raw[row[0].strip()] = row[1].strip()
    kwargs = {}
    for k, v in raw.items():
        if k not in SYNTH_KEYS:
            raise ConfigError(f"unknown synth key {k!r}")
        try:
            kwargs[k] = SYNTH_KEYS[k](v)
        except ValueError as exc:
            raise ConfigError(f"bad value for {k}: {v!r}") from exc
    try:
        spec = make_synth_spec(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    users = synthesize_users(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = next(iter(users.values())).dataset.activity_names
    write_activity_map({n: i for i, n in enumerate(names)}, out / ACTIVITIES)
    write_recordings_csv([r for u in users.values() for r in u.recordings], out / RECORDINGS, names)
    (out / DATASET_CFG).write_text(
        f"window_seconds = {fmt(spec.window_len / spec.sampling_rate)}\noverlap = 0.0\n"
        f"sampling_rate = {fmt(spec.sampling_rate)}\n"
    )
    with open(out / STATES, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["user", "segment", "window", "state"])
        for uname, u in users.items():
            ds = u.dataset
            for i in range(len(ds)):
                w.writerow([uname, int(ds.segment[i]), int(ds.temporal_index[i]), int(u.states[i])])
    print(f"wrote {len(users)} users to {out}")
    return EXIT_OK


def _window_overrides(values: dict[str, str]):
    ws = float(values["window_seconds"]) if "window_seconds" in values else None
    ov = float(values["overlap"]) if "overlap" in values else None
    return ws, ov


def cmd_train(args) -> int:
    values = read_config(args.config, TRAIN_KEYS | EXTRA_KEYS) if args.config else {}
    cfg = train_config(values)
    data = load_data_dir(args.data, *_window_overrides(values))
    task = prepare_task(_user(data, args.source), _user(data, args.target), seed=cfg.seed)
    if args.method == "dtsda":
        model, history = fit(task, cfg)
        log_path = args.log or values.get("log")
        if log_path:
            write_training_log(history, log_path)
    else:
        model, _ = train_baseline(task, cfg, adversarial=args.method == "dann")
    ev = _evaluate_model(model, task)
    save_model(model, args.out, extra={
        "method": args.method, "source": args.source, "target": args.target,
        "activity_names": list(task.dataset.activity_names), "seed": cfg.seed,
    })
    print(f"{args.source}->{args.target} {args.method}: saved {args.out}")
    log.info("transductive target accuracy %.4f", ev.accuracy)
    return EXIT_OK


def cmd_eval(args) -> int:
    model, header = load_model(args.model)
    data = load_data_dir(args.data)
    target = _user(data, args.target)
    if target.num_channels != model.arch.in_channels:
        raise DataError(f"model expects {model.arch.in_channels} channels, data has {target.num_channels}")
    ds = pad_window_length(normalize(target, (model.channel_mean, model.channel_std)))
    if ds.window_len != model.arch.window_len:
        raise DataError(f"model expects windows of {model.arch.window_len} samples, data gives {ds.window_len}")
    pred = predict_target(model, ds.data)
    ev = evaluate(pred, ds.labels, model.arch.num_classes, ds.activity_names)
    extra = header.get("extra", {})
    result = ExperimentResult(
        f"{extra.get('source', 'model')}->{args.target}", extra.get("method", "dtsda"), ev.accuracy, ev.recall,
        ev.confusion, int(extra.get("seed", 0)),
    )
    emit_reports([result], args.out, heatmaps=args.heatmaps)
    print(f"{result.task} {result.method}: accuracy {ev.accuracy:.4f}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg_path = Path(args.config)
    values = read_config(cfg_path, TRAIN_KEYS | EXTRA_KEYS)
    if "data" not in values:
        raise ConfigError("experiment config needs a data = <directory> entry")
    cfg = train_config(values)
    methods = tuple(m.strip() for m in values.get("methods", ",".join(METHODS)).split(",") if m.strip())
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ConfigError(f"unknown method(s) {unknown}; choose from {METHODS}")
    data_dir = Path(values["data"])
    if not data_dir.is_absolute():
        data_dir = cfg_path.parent / data_dir
    data = load_data_dir(data_dir, *_window_overrides(values))
    users = [u.strip() for u in values["users"].split(",")] if "users" in values else None
    heatmaps = _as_bool(values.get("heatmaps", "false")) or args.heatmaps
    results = run_experiment(data, cfg, methods, users)
    emit_reports(results, args.out, heatmaps=heatmaps)
    for row in summarize(results):
        print(f"{row['method']}: mean {row['mean_accuracy']:.4f} std {row['std_accuracy']:.4f} over {row['tasks']} tasks")
    return EXIT_OK


def cmd_label(args) -> int:
    path = Path(args.input)
    if not path.is_file():
        raise DataError(f"feature file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        rows = [r for r in reader if r]
    if header is None or header[:2] != ["segment", "order"] or len(header) < 3:
        raise DataError(f"{path}: expected columns segment,order,feature_0,...")
    if not rows:
        raise DataError(f"{path}: no rows")
    try:
        seg = np.array([r[0] for r in rows])
        order = np.array([float(r[1]) for r in rows])
        feats = np.array([[float(v) for v in r[2:]] for r in rows])
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc
    if args.states < 1 or args.gamma < 0:
        raise ConfigError("--states must be >= 1 and --gamma >= 0")
    try:
        states = label_feature_table(seg, order, feats, args.states, args.gamma, args.seed)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    out = sys.stdout if args.out in (None, "-") else open(args.out, "w", newline="")
    try:
        w = csv.writer(out)
        w.writerow([*header, "state"])
        for r, s in zip(rows, states):
            w.writerow([*r, int(s)])
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dtsda", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic multi-user data directory")
    s.add_argument("--spec", help="key,value CSV of generator settings")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train one source->target model")
    s.add_argument("--data", required=True)
    s.add_argument("--source", required=True)
    s.add_argument("--target", required=True)
    s.add_argument("--config")
    s.add_argument("--method", default="dtsda", choices=METHODS)
    s.add_argument("--log", help="write the per-epoch training log CSV here")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a saved model on one user")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--target", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--heatmaps", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("run", help="all cross-user tasks for the configured methods")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--heatmaps", action="store_true")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("label", help="pseudo temporal-state labels for a feature CSV")
    s.add_argument("--input", required=True, help="CSV with segment,order,feature_0..feature_k")
    s.add_argument("--out", help="output CSV (default stdout)")
    s.add_argument("--states", type=int, default=3)
    s.add_argument("--gamma", type=float, default=0.2)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_label)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ModelFileError, KeyError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, NonFiniteError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        # remaining precondition failures come from the inputs
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
