"""Command-line front end: generate, train, evaluate, score, plot.

Config precedence is command line > TOML file > built-in defaults; the fully
resolved config is echoed into the output directory so any run can be
replayed exactly.
"""

from __future__ import annotations

import argparse
import difflib
import json
import os
import sys
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import numpy as np

from . import encoder as enc
from . import evaluation as ev
from . import objective as obj
from . import pipeline as pl
from . import synthdata as sd

DEFAULTS = {
    # windowing / training
    "window_size": 20,
    "stride": 10,
    "batch_size": 64,
    "epochs": 30,
    "lr": 1e-3,
    "lr_decay": 1.0,
    "margin": 1.0,
    "alpha": 1.0,
    "nu": 4.0,
    "family": "copula",
    "base": "student_t",
    "marginal_mode": "parametric",
    "learn_dof": False,
    "baseline": False,
    "injection_rate": 0.25,
    "val_fraction": 0.3,
    # encoder
    "latent_dim": 16,
    "model_dim": 64,
    "num_layers": 2,
    "num_heads": 2,
    "dropout": 0.1,
    # generation
    "case": 0,  # 0 means "no preset"
    "d_gen": 5,
    "length": 20000,
    "dependency_strength": 0.9,
    "anomaly_dependency_shift": 0.5,
    "anomaly_fraction": 0.1,
    "anomaly_span_low": 0.25,
    "anomaly_span_high": 0.5,
    "warp_segments": 10,
    "seed": 0,
}


class ConfigError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    # usage problems exit 1, not argparse's default 2
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _check_type(key: str, value):
    default = DEFAULTS[key]
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"key {key!r} expects a boolean, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"key {key!r} expects an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"key {key!r} expects a number, got {value!r}")
        value = float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"key {key!r} expects a string, got {value!r}")
    return value


def resolve_config(config_path, overrides: dict) -> dict:
    """Defaults, then TOML file values, then non-None overrides."""
    resolved = dict(DEFAULTS)

    def apply(key, value):
        if key not in DEFAULTS:
            hint = difflib.get_close_matches(key, DEFAULTS, n=1)
            suffix = f"; did you mean {hint[0]!r}?" if hint else ""
            raise ConfigError(f"unknown config key {key!r}{suffix}")
        resolved[key] = _check_type(key, value)

    if config_path is not None:
        with open(config_path, "rb") as fh:
            doc = tomllib.load(fh)
        for key, value in doc.items():
            if isinstance(value, dict):  # flatten one section level
                for sub, sub_value in value.items():
                    apply(sub, sub_value)
            else:
                apply(key, value)
    for key, value in overrides.items():
        if value is not None:
            apply(key, value)
    return resolved


def echo_config(resolved: dict, out_dir) -> None:
    """Write the resolved config as flat TOML for exact replay."""
    lines = []
    for key, value in sorted(resolved.items()):
        if isinstance(value, bool):
            lines.append(f"{key} = {'true' if value else 'false'}")
        elif isinstance(value, (int, float)):
            lines.append(f"{key} = {value!r}")
        else:
            lines.append(f'{key} = "{value}"')
    with open(os.path.join(out_dir, "resolved_config.toml"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def prepare_out_dir(path, force: bool) -> None:
    if os.path.isdir(path) and os.listdir(path) and not force:
        raise ConfigError(f"output directory {path!r} is not empty; "
                          f"pass --force to overwrite")
    os.makedirs(path, exist_ok=True)


def _scenario_from(resolved: dict) -> sd.ScenarioConfig:
    case = resolved["case"]
    spans = (resolved["anomaly_span_low"], resolved["anomaly_span_high"])
    if case:
        cfg = sd.case_preset(case)
        cfg.d_gen = resolved["d_gen"]
        cfg.length = resolved["length"]
        cfg.anomaly_fraction = resolved["anomaly_fraction"]
        cfg.anomaly_span_range = spans
        cfg.seed = resolved["seed"]
        return cfg
    return sd.ScenarioConfig(
        d_gen=resolved["d_gen"], length=resolved["length"],
        dependency_strength=resolved["dependency_strength"],
        anomaly_dependency_shift=resolved["anomaly_dependency_shift"],
        anomaly_fraction=resolved["anomaly_fraction"],
        anomaly_span_range=spans, seed=resolved["seed"])


def _train_config_from(resolved: dict, input_dim: int) -> pl.TrainConfig:
    return pl.TrainConfig(
        window_length=resolved["window_size"], stride=resolved["stride"],
        batch_size=resolved["batch_size"], epochs=resolved["epochs"],
        learning_rate=resolved["lr"], lr_decay=resolved["lr_decay"],
        loss=obj.LossConfig(margin=resolved["margin"],
                            anomaly_weight=resolved["alpha"]),
        encoder=enc.EncoderConfig(
            input_dim=input_dim, model_dim=resolved["model_dim"],
            num_layers=resolved["num_layers"], num_heads=resolved["num_heads"],
            dropout=resolved["dropout"], latent_dim=resolved["latent_dim"]),
        family=resolved["family"], base=resolved["base"], dof=resolved["nu"],
        learn_dof=resolved["learn_dof"],
        marginal_mode=resolved["marginal_mode"],
        baseline=resolved["baseline"],
        injection_rate=resolved["injection_rate"], seed=resolved["seed"])


def _data_csv(path) -> str:
    if os.path.isdir(path):
        return os.path.join(path, "series.csv")
    return path


def cmd_generate(resolved: dict, args) -> int:
    prepare_out_dir(args.out, args.force)
    series = sd.realize_scenario(_scenario_from(resolved),
                                 num_segments=resolved["warp_segments"])
    sd.write_series_csv(series, os.path.join(args.out, "series.csv"))
    sd.write_events(series.events, os.path.join(args.out, "series.events"))
    echo_config(resolved, args.out)
    return 0


def _split_frames(frames: pl.FrameSet, val_fraction: float, seed: int):
    n = frames.frames.shape[0]
    order = np.random.default_rng(seed + 13).permutation(n)
    cut = max(1, int(round((1.0 - val_fraction) * n)))
    tr, va = order[:cut], order[cut:]
    train_fs = pl.FrameSet(frames.frames[tr], frames.labels[tr], frames.stride)
    val_fs = pl.FrameSet(frames.frames[va], frames.labels[va],
                         frames.stride) if va.size else None
    return train_fs, val_fs


def cmd_train(resolved: dict, args) -> int:
    prepare_out_dir(args.out, args.force)
    series = pl.load_csv(_data_csv(args.data))
    config = _train_config_from(resolved, series.values.shape[1])
    frames = pl.make_frames(series, config.window_length, config.stride)
    train_fs, val_fs = _split_frames(frames, resolved["val_fraction"],
                                     resolved["seed"])
    ckpt, history = pl.train(train_fs, val_fs, config)
    pl.save_checkpoint(ckpt, os.path.join(args.out, "ckpt.json"))
    with open(os.path.join(args.out, "history.json"), "w") as fh:
        json.dump(history, fh, indent=2)
    echo_config(resolved, args.out)
    return 0


def _load_model(path):
    if os.path.isdir(path):
        path = os.path.join(path, "ckpt.json")
    ckpt = pl.load_checkpoint(path)
    return ckpt, os.path.dirname(os.path.abspath(path))


def _scored_windows(series, ckpt, stride=None):
    cfg, params, model = ckpt.restore()
    tc = ckpt.train_config
    length = tc["window_length"]
    stride = tc["stride"] if stride is None else stride
    frames = pl.make_frames(series, length, stride)
    scores = pl.score_frames(frames.frames, params, cfg, model,
                             baseline=tc["baseline"])
    return ev.ScoredWindows(scores=scores, end_indices=frames.end_indices(),
                            labels=frames.labels), length


def cmd_evaluate(resolved: dict, args) -> int:
    prepare_out_dir(args.out, args.force)
    ckpt, model_dir = _load_model(args.model)
    series = pl.load_csv(_data_csv(args.data))
    scored, length = _scored_windows(series, ckpt)

    threshold = ckpt.threshold
    if threshold is None:
        threshold, _ = ev.select_threshold(scored.scores, scored.labels)
    report = ev.classification_metrics(scored.scores, scored.labels, threshold)

    # detection delay needs stride-1 windows over the same series
    dense, _ = _scored_windows(series, ckpt, stride=1)
    dense_preds = (dense.scores < threshold).astype(int)
    delay = ev.average_detection_delay(dense_preds, series.labels, length)
    report.add = delay.add
    report.missed_events = delay.missed

    history = []
    hist_path = os.path.join(model_dir, "history.json")
    if os.path.exists(hist_path):
        with open(hist_path) as fh:
            history = json.load(fh)
    ev.emit_report(report, history, args.out)
    ev.write_scores_csv(scored, (scored.scores < threshold).astype(int),
                        os.path.join(args.out, "scores.csv"))
    echo_config(resolved, args.out)
    return 0


def cmd_score(resolved: dict, args) -> int:
    prepare_out_dir(args.out, args.force)
    ckpt, _ = _load_model(args.model)
    series = pl.load_csv(_data_csv(args.data))
    scored, _ = _scored_windows(series, ckpt)
    threshold = ckpt.threshold
    preds = (scored.scores < threshold).astype(int) if threshold is not None \
        else np.zeros_like(scored.labels)
    ev.write_scores_csv(scored, preds, os.path.join(args.out, "scores.csv"))
    echo_config(resolved, args.out)
    return 0


def cmd_plot(resolved: dict, args) -> int:
    prepare_out_dir(args.out, args.force)
    with open(args.data) as fh:
        doc = json.load(fh)
    history = doc["curves"] if isinstance(doc, dict) else doc
    if not history:
        raise ConfigError(f"{args.data}: no curve data to plot")
    rep = ev.MetricsReport(precision=0.0, recall=0.0, f1=0.0, auc_roc=0.0,
                           threshold=0.0)
    paths = ev.emit_report(rep, history, args.out)
    os.remove(paths["report"])  # plot emits figures only
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="copad")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=False, model=False):
        p.add_argument("--config")
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int)
        p.add_argument("--force", action="store_true")
        if data:
            p.add_argument("--data", required=True)
        if model:
            p.add_argument("--model", required=True)

    gen = sub.add_parser("generate")
    common(gen)
    gen.add_argument("--case", type=int, choices=(1, 2, 3))

    tr = sub.add_parser("train")
    common(tr, data=True)
    tr.add_argument("--family", choices=("multivariate", "copula"))
    tr.add_argument("--base", choices=("gaussian", "student_t"))
    tr.add_argument("--window", type=int, dest="window_size")
    tr.add_argument("--stride", type=int)
    tr.add_argument("--margin", type=float)
    tr.add_argument("--alpha", type=float)
    tr.add_argument("--nu", type=float)
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--lr", type=float)
    tr.add_argument("--baseline", action="store_const", const=True)

    evp = sub.add_parser("evaluate")
    common(evp, data=True, model=True)

    sc = sub.add_parser("score")
    common(sc, data=True, model=True)

    plp = sub.add_parser("plot")
    common(plp, data=True)
    return parser


_OVERRIDE_KEYS = ("seed", "case", "family", "base", "window_size", "stride",
                  "margin", "alpha", "nu", "epochs", "lr", "baseline")

_COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "score": cmd_score,
    "plot": cmd_plot,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    overrides = {key: getattr(args, key, None) for key in _OVERRIDE_KEYS}
    try:
        resolved = resolve_config(args.config, overrides)
        return _COMMANDS[args.command](resolved, args)
    except ConfigError as err:
        print(f"copad: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # runtime failures
        print(f"copad: error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
