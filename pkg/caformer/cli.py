"""
Command-line entry point: python -m caformer <subcommand> [options].

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np
from gym import logger
from gym.utils import seeding

from caformer import data as data_mod
from caformer import numerics as nx
from caformer import scm, synth
from caformer.backbone import CaformerConfig, shift_env_offsets
from caformer.config import load_run_config, write_resolved
from caformer.errors import CaformerError, ConfigError
from caformer.heads import HeadConfig
from caformer.model import Caformer
from caformer.plots import emit_plots
from caformer.training import ablation_direction, ablation_run, collect_predictions, evaluate, loss_fn, train

TASK_COMMANDS = {
    "forecast": "long_forecast",
    "impute": "imputation",
    "classify": "classification",
    "detect": "anomaly",
}

GRADCHECK_TOLERANCE = 1e-4


def _add_run_options(parser):
    parser.add_argument("--config", help="flat TOML run configuration")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one configuration key (repeatable)")
    parser.add_argument("--out", help="output directory (config key out_dir)")
    parser.add_argument("--seed", type=int, help="global seed (config key seed)")


def build_parser():
    parser = argparse.ArgumentParser(prog="caformer", description="Caformer time-series models and causal oracle")
    parser.add_argument("--verbose", action="store_true", help="log per-epoch progress")
    parser.add_argument("--debug", action="store_true", help="log per-batch detail")
    commands = parser.add_subparsers(dest="command", metavar="command")
    commands.required = True

    cmd = commands.add_parser("train", help="train on the configured task and score the test split")
    _add_run_options(cmd)
    cmd.add_argument("--task", help="config key task; forecast, impute, classify and detect are accepted too")
    for name, task in TASK_COMMANDS.items():
        cmd = commands.add_parser(name, help="train and score a %s model" % task)
        _add_run_options(cmd)
        if name == "forecast":
            cmd.add_argument("--short", action="store_true", help="short-term protocol with M4 metrics")

    cmd = commands.add_parser("evaluate", help="re-score a saved checkpoint")
    _add_run_options(cmd)
    cmd.add_argument("--checkpoint", required=True)

    cmd = commands.add_parser("ablate", help="train the full model and the three ablated variants")
    _add_run_options(cmd)
    cmd.add_argument("--task", help="config key task; forecast, impute, classify and detect are accepted too")

    cmd = commands.add_parser("verify-backdoor", help="back-door adjustment against the truncated-graph oracle")
    cmd.add_argument("--trials", type=int, default=100)
    cmd.add_argument("--seed", type=int, default=1)
    cmd.add_argument("--scm", help="also check a TOML model definition (treatment X, outcome T, adjustment C)")
    cmd.add_argument("--out", help="write report.json here")

    cmd = commands.add_parser("gradcheck", help="finite-difference check of the tiny backbone")
    cmd.add_argument("--seed", type=int, default=0)
    cmd.add_argument("--fd-step", type=float, default=1e-5)
    cmd.add_argument("--out", help="write gradcheck.json here")

    cmd = commands.add_parser("synth", help="write a synthetic dataset as CSV")
    cmd.add_argument("--kind", choices=synth.KINDS, required=True)
    cmd.add_argument("--M", type=int, default=4)
    cmd.add_argument("--L", type=int, default=512)
    cmd.add_argument("--seed", type=int, default=0)
    cmd.add_argument("--mask-ratio", type=float, help="also write a random imputation mask")
    cmd.add_argument("--out", required=True)
    return parser


def _resolve(args, task=None):
    """File, then --set pairs, then the dedicated flags; writes config.resolved.toml first."""
    changes = {}
    if task or getattr(args, "task", None):
        changes["task"] = task or TASK_COMMANDS.get(args.task, args.task)
    if args.out:
        changes["out_dir"] = args.out
    if args.seed is not None:
        changes["seed"] = args.seed
    config = load_run_config(args.config, list(args.overrides))
    if changes:
        config = load_run_config(None, dict(dataclasses.asdict(config), **changes))
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(config, out / "config.resolved.toml")
    return config, out


def build_dataset(config):
    """The dataset a run trains on: a CSV file when data is set, else the synthetic kind for its task."""
    family = config.head_config(num_classes=2).family
    if config.data:
        timestamp = config.timestamp_col or None
        if timestamp is not None and timestamp.isdigit():
            timestamp = int(timestamp)
        ds = data_mod.load_csv(config.data, has_header=config.has_header, timestamp_col=timestamp)
        if family == "forecast":
            return ds.replace(horizon=config.horizon)
        if family == "imputation":
            if config.mask_path:
                return ds.replace(mask=data_mod.load_mask_csv(config.mask_path, ds.values.shape))
            return data_mod.apply_imputation_mask(ds, config.mask_ratio, config.seed)
        if not config.labels_path:
            raise ConfigError("task %s needs labels_path" % config.task)
        labels = data_mod.load_labels_csv(config.labels_path)
        if family == "classification":
            if config.segment_length < 1:
                raise ConfigError("classification needs segment_length >= 1")
            split = data_mod.default_split(ds.L, unit=config.segment_length)
            return ds.replace(class_labels=labels, segment_length=config.segment_length, split=split)
        return ds.replace(anomaly_labels=labels.astype(bool))

    params = {"horizon": config.horizon if family == "forecast" else None}
    length = config.synth_L
    if config.synth == "two_class":
        # synth length is the length of one labelled series here
        params["n_series"] = config.n_series
        length = config.segment_length or synth.MIN_LENGTH
    if config.synth == "spiked":
        params["n_anomalies"] = config.n_anomalies
    ds = synth.synth_generate(config.synth, config.synth_M, length, config.seed, params)
    if family == "forecast":
        return ds.replace(horizon=config.horizon)
    if family == "imputation":
        return data_mod.apply_imputation_mask(ds, config.mask_ratio, config.seed)
    return ds


def _model_config(config, ds):
    L_in = ds.segment_length if ds.task == "classification" else config.L_in
    return config.caformer_config(ds.M, L_in)


def _head_config(config, ds):
    num_classes = int(ds.class_labels.max()) + 1 if ds.class_labels is not None else None
    return config.head_config(num_classes=max(2, num_classes or 2))


def write_run_artifacts(model, ds, out, report):
    """metrics.json, predictions.npz, diagnostics.npz and the plots."""
    with open(out / "metrics.json", "w") as fh:
        fh.write(report.to_json() + "\n")
    p = collect_predictions(model, ds, model.scaler, "test")
    start, L_in = int(p.starts[0]), model.config.L_in
    family = model.head_config.family
    if family == "classification":
        truth = np.asarray(p.truth, dtype=np.float64)[None, :]
        pred = np.argmax(p.pred, axis=-1).astype(np.float64)[None, :]
        index, names = np.arange(truth.shape[1]), ["class"]
    else:
        truth, pred, names = p.truth[0], p.pred[0], list(ds.dim_names)
        if family == "anomaly":
            truth = p.inputs[0]
        offset = start + L_in if family == "forecast" else start
        index = offset + np.arange(truth.shape[-1])
    np.savez(out / "predictions.npz", truth=truth, pred=pred, index=index)

    window = model.scaler.transform(ds.values)[:, start:start + L_in]
    _, trace = model.forward(window, trace=True)
    matrices = {}
    for b, block in enumerate(trace.blocks):
        matrices["A_d_block%d" % b] = block.A_d.mean(axis=0)
        if block.H_ce is not None:
            matrices["H_ce_block%d" % b] = block.H_ce
    np.savez(out / "diagnostics.npz", **matrices)
    emit_plots(str(out), dim_names=names)


def cmd_train(args, task=None):
    config, out = _resolve(args, task)
    ds = build_dataset(config)
    model_config = _model_config(config, ds)
    head_config = _head_config(config, ds)
    model, _ = train(ds, model_config, config.train_config(), head_config, log_path=out / "log.jsonl")
    model.save(out / "checkpoint.npz")
    report = evaluate(model, ds, "test", seasonality=config.seasonality, point_adjust=config.point_adjust)
    write_run_artifacts(model, ds, out, report)
    print(report.to_json())
    return 0


def cmd_evaluate(args):
    config, out = _resolve(args)
    model = Caformer.load(args.checkpoint)
    config = load_run_config(None, dict(dataclasses.asdict(config), task=model.head_config.task))
    ds = build_dataset(config)
    model.scaler = data_mod.SeriesScaler(ds)
    report = evaluate(model, ds, "test", seasonality=config.seasonality, point_adjust=config.point_adjust)
    write_run_artifacts(model, ds, out, report)
    print(report.to_json())
    return 0


def cmd_ablate(args):
    config, out = _resolve(args)
    ds = build_dataset(config)
    seeds = config.seeds or [config.seed]
    table, _ = ablation_run(ds, _model_config(config, ds), config.train_config(), _head_config(config, ds),
                            seeds=seeds, max_workers=config.workers, out_dir=out)
    table.to_csv(out / "ablation.csv")
    with open(out / "ablation.txt", "w") as fh:
        fh.write(table.to_string(float_format=lambda v: "%.6f" % v) + "\n")
    summary = {"table": {variant: table[variant].to_dict() for variant in table.columns}, "seeds": seeds}
    if "mse" in table.index:
        summary["full_within_110pct"] = ablation_direction(table)
        if not all(summary["full_within_110pct"].values()):
            logger.warn("full model is not within 1.10x of every ablated variant: %s", summary["full_within_110pct"])
    with open(out / "metrics.json", "w") as fh:
        fh.write(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    print(table.to_string())
    return 0


def cmd_verify_backdoor(args):
    report = scm.verify_backdoor_suite(trials=args.trials, seed=args.seed)
    if args.scm:
        model = scm.load_scm(args.scm)
        report["definition"] = {
            "path": args.scm,
            "estimate": [scm.backdoor_estimate(model, x).tolist() for x in range(model.cards["X"])],
            "truth": [scm.truncated_do(model, "X", x).marginal(("T",)).table.tolist() for x in range(model.cards["X"])],
        }
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "report.json"), "w") as fh:
            fh.write(json.dumps(report, sort_keys=True, indent=2) + "\n")
    relation = "<" if report["passed"] else ">="
    print("max_abs_diff %s %g (%.3g over %d trials)" % (relation, report["tolerance"], report["max_abs_diff"], report["trials"]))
    for fixture, rules in report["rules"].items():
        print("%s: %s" % (fixture, ", ".join("%s %s" % (rule, r["status"]) for rule, r in sorted(rules.items()))))
    return 0 if report["passed"] else 1


def tiny_gradcheck(seed=0, fd_step=1e-5):
    """Forecasting-loss gradient check on the smallest full configuration."""
    config = CaformerConfig.desk(M=3, L_in=32, P=8, S=4, E=8, blocks=1)
    head_config = HeadConfig(task="long_forecast", H=4)
    model = Caformer(config, head_config, seed=seed)
    rng, _ = seeding.np_random(int(seed) + 1)
    shift_env_offsets(model.params, rng)
    inputs = rng.normal(size=(2, config.M, config.L_in))
    targets = rng.normal(size=(2, config.M, head_config.H))

    def objective(params):
        return loss_fn(model.with_params(params).forward(inputs)[0], targets)

    return nx.grad_check(objective, model.params, fd_step=fd_step)


def cmd_gradcheck(args):
    report = tiny_gradcheck(args.seed, args.fd_step)
    payload = dict(report.to_dict(), tolerance=GRADCHECK_TOLERANCE, passed=report.max_rel_error < GRADCHECK_TOLERANCE)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "gradcheck.json"), "w") as fh:
            fh.write(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    print("max relative error %.3g over %d entries (worst: %s %s)"
          % (report.max_rel_error, report.checked, report.parameter, report.index))
    return 0 if payload["passed"] else 1


def cmd_synth(args):
    ds = synth.synth_generate(args.kind, args.M, args.L, args.seed)
    os.makedirs(args.out, exist_ok=True)
    data_mod.save_csv(os.path.join(args.out, "data.csv"), ds.values, ds.dim_names)
    if ds.class_labels is not None:
        np.savetxt(os.path.join(args.out, "labels.csv"), ds.class_labels, fmt="%d")
    if ds.anomaly_labels is not None:
        np.savetxt(os.path.join(args.out, "labels.csv"), ds.anomaly_labels.astype(int), fmt="%d")
    if args.mask_ratio is not None:
        masked = data_mod.apply_imputation_mask(ds, args.mask_ratio, args.seed)
        np.savetxt(os.path.join(args.out, "mask.csv"), masked.mask.T.astype(int), fmt="%d", delimiter=",")
    print("wrote %s (M=%d, L=%d)" % (args.out, ds.M, ds.L))
    return 0


def run_command(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    logger.set_level(logger.DEBUG if args.debug else logger.INFO if args.verbose else logger.WARN)

    handlers = {
        "train": cmd_train,
        "evaluate": cmd_evaluate,
        "ablate": cmd_ablate,
        "verify-backdoor": cmd_verify_backdoor,
        "gradcheck": cmd_gradcheck,
        "synth": cmd_synth,
    }
    try:
        if args.command in TASK_COMMANDS:
            task = TASK_COMMANDS[args.command]
            if args.command == "forecast" and args.short:
                task = "short_forecast"
            return cmd_train(args, task)
        return handlers[args.command](args)
    except ConfigError as exc:
        print("caformer: config error: %s" % exc, file=sys.stderr)
        return 2
    except CaformerError as exc:
        print("caformer: %s" % exc, file=sys.stderr)
        return 1


def main():
    sys.exit(run_command())
