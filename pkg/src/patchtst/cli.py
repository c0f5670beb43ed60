"""Command-line interface.

Exit codes: 0 success, 1 usage, 2 configuration error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import checkpoint, experiments
from .config import RunConfig, parse_config
from .data import Standardizer, load_csv, prepare_data, write_csv
from .errors import ConfigError, PatchTSTError
from .model import RECONSTRUCT, PatchTST
from .patching import NONOVERLAP
from .training import (evaluate, finetune_lp_then_ft, linear_probe, predict_windows, pretrain,
                       transfer)

logger = logging.getLogger("patchtst")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value run configuration file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", default="runs", help="output directory (default: runs)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key; repeatable")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="patchtst", description="Patch Transformer forecasting toolkit")
    sub = parser.add_subparsers(dest="command", metavar="command")

    def add(name, help_):
        return sub.add_parser(name, help=help_, parents=[common])

    add("synth", "write the configured synthetic series as CSV")
    add("train", "supervised training from scratch")
    add("pretrain", "masked-patch self-supervised pretraining")
    for name, help_ in (("probe", "linear probing of a pretrained trunk"),
                        ("finetune", "linear probing then end-to-end fine-tuning")):
        add(name, help_).add_argument("--checkpoint", required=True)
    p = add("transfer", "reuse a pretrained trunk on the configured dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=("probe", "lp_then_ft"), default="lp_then_ft")
    p = add("eval", "test-split metrics of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--raw-scale", action="store_true", help="also report metrics in original units")
    p = add("predict", "forecast the horizon after the last look-back window of a CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p = add("sweep", "one run per value of a look-back/patch-length/train-fraction/seed axis")
    p.add_argument("--axis", required=True, choices=sorted(experiments.SWEEP_AXES))
    p.add_argument("--values", help="comma separated; seed axis defaults to 2019..2023")
    p.add_argument("--timing", action="store_true", help="add a wall-clock column")
    p = add("ablate", "patching / channel-independence ablation")
    p.add_argument("--axis", default="variant", choices=("variant",))
    p = add("export-attn", "head- and layer-averaged attention maps as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", help="CSV to take the last look-back window from (default: test split)")
    p = add("benchmark", "supervised runs over every configured horizon")
    p.add_argument("--data", nargs="*", default=[], help="dataset CSVs (default: config data)")
    return parser


def _run_config(args) -> RunConfig:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    return parse_config(args.config, overrides)


def _scaler_extras(data):
    if data.scaler is None:
        return {}
    return {"scaler_mean": data.scaler.mean, "scaler_std": data.scaler.std}


def _write_metrics(out, report):
    experiments.write_rows(out / "metrics.csv", [{"mse": report.test_mse, "mae": report.test_mae}],
                           ["mse", "mae"])


def _save(out, name, model, data, report, rc, include_head=True):
    meta = {"dataset": data.table.name, "split": rc.split, "standardize": rc.standardize}
    path = checkpoint.save_model(out / name, model, _scaler_extras(data), meta, include_head)
    if report is not None:
        report.to_csv(out / "report.csv")
    return path


def cmd_synth(rc, args, out):
    path = out / "synth.csv"
    write_csv(rc.load_table(), path)
    print(path)


def cmd_train(rc, args, out):
    model, report, data = experiments.run_one(rc, rc.load_table())
    _save(out, "model.ckpt", model, data, report, rc)
    _write_metrics(out, report)
    print(f"test mse={report.test_mse:.6f} mae={report.test_mae:.6f} ({report.wall_seconds:.1f}s)")


def cmd_pretrain(rc, args, out):
    if rc.patch_mode != NONOVERLAP or rc.S != rc.P:
        logger.info("pretraining uses non-overlapping patches: setting S=P=%d", rc.P)
        rc = rc.replace(patch_mode=NONOVERLAP, S=rc.P)
    table = rc.load_table()
    data = prepare_data(table, rc.L, rc.T, rc.split_spec(), rc.standardize, rc.train_fraction)
    model = PatchTST(rc.model_config(table.n_channels, head_kind=RECONSTRUCT), seed=rc.seed)
    model, report = pretrain(model, data, rc.train_config())
    _save(out, "pretrained.ckpt", model, data, report, rc)
    _save(out, "trunk.ckpt", model, data, None, rc, include_head=False)
    print(f"best val reconstruction mse={min(report.val_loss):.6f}")


def _downstream(rc, args, out, fn):
    source, _, _ = checkpoint.load_model(args.checkpoint)
    data = prepare_data(rc.load_table(), source.cfg.L, rc.T, rc.split_spec(), rc.standardize,
                        rc.train_fraction)
    model, report = fn(source, data, rc.train_config())
    _save(out, "model.ckpt", model, data, report, rc)
    _write_metrics(out, report)
    print(f"test mse={report.test_mse:.6f} mae={report.test_mae:.6f}")


def cmd_probe(rc, args, out):
    _downstream(rc, args, out, linear_probe)


def cmd_finetune(rc, args, out):
    _downstream(rc, args, out, finetune_lp_then_ft)


def cmd_transfer(rc, args, out):
    _downstream(rc, args, out, lambda s, d, c: transfer(s, d, c, mode=args.mode))


def cmd_eval(rc, args, out):
    model, extras, _ = checkpoint.load_model(args.checkpoint)
    data = prepare_data(rc.load_table(), model.cfg.L, model.cfg.T, rc.split_spec(), rc.standardize)
    m = evaluate(model, data.test)
    row = {"mse": m.mse, "mae": m.mae}
    cols = ["mse", "mae"]
    if args.raw_scale and data.scaler is not None:
        pred, target = predict_windows(model, data.test)
        s = data.scaler
        raw = experiments.metric_mse_mae(pred * s.std[:, None] + s.mean[:, None],
                                         target * s.std[:, None] + s.mean[:, None])
        row.update(raw_mse=raw.mse, raw_mae=raw.mae)
        cols += ["raw_mse", "raw_mae"]
    experiments.write_rows(out / "metrics.csv", [row], cols)
    print(" ".join(f"{k}={v:.6f}" for k, v in row.items()))


def _last_window(model, table, extras):
    values = table.values
    if len(values) < model.cfg.L:
        raise ConfigError(f"input has {len(values)} rows, the model needs a look-back of {model.cfg.L}")
    scaler = None
    if "scaler_mean" in extras:
        scaler = Standardizer(extras["scaler_mean"], extras["scaler_std"])
        values = scaler.apply(values)
    return values[-model.cfg.L:].T, scaler


def cmd_predict(rc, args, out):
    model, extras, _ = checkpoint.load_model(args.checkpoint)
    x, scaler = _last_window(model, load_csv(args.input), extras)
    forecast = model.predict(x[None])[0]  # [M, T]
    if scaler is not None:
        forecast = forecast * scaler.std[:, None] + scaler.mean[:, None]
    path = experiments.write_predictions(out / "predictions.csv", forecast)
    print(path)


def cmd_sweep(rc, args, out):
    if args.values:
        values = [v.strip() for v in args.values.split(",") if v.strip()]
    elif args.axis == "seed":
        values = list(experiments.SEEDS)
    else:
        raise UsageError(f"--values is required for axis {args.axis}")
    rows = experiments.run_sweep(rc, rc.load_table(), args.axis, values, timing=args.timing)
    path = experiments.write_rows(out / f"sweep_{args.axis}.csv", rows,
                                  experiments.sweep_columns(args.axis, args.timing))
    print(path)


def cmd_ablate(rc, args, out):
    rows = experiments.run_ablation(rc, rc.load_table())
    print(experiments.write_rows(out / "ablation.csv", rows, experiments.ABLATION_COLUMNS))


def cmd_export_attn(rc, args, out):
    model, extras, _ = checkpoint.load_model(args.checkpoint)
    if args.input:
        x, _ = _last_window(model, load_csv(args.input), extras)
    else:
        data = prepare_data(rc.load_table(), model.cfg.L, model.cfg.T, rc.split_spec(), rc.standardize)
        x = data.test[len(data.test) - 1].x
    maps = model.export_attention(x[None])[0]
    print(experiments.write_attention(out / "attention.csv", maps))


def cmd_benchmark(rc, args, out):
    tables = [load_csv(p) for p in args.data] if args.data else [rc.load_table()]
    rows = experiments.run_benchmark(rc, tables)
    print(experiments.write_rows(out / "benchmark.csv", rows, experiments.BENCHMARK_COLUMNS))


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "pretrain": cmd_pretrain, "probe": cmd_probe,
    "finetune": cmd_finetune, "transfer": cmd_transfer, "eval": cmd_eval, "predict": cmd_predict,
    "sweep": cmd_sweep, "ablate": cmd_ablate, "export-attn": cmd_export_attn,
    "benchmark": cmd_benchmark,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        rc = _run_config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](rc, args, out)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PatchTSTError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
