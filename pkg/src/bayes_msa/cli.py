"""Command-line entry point: ``bayes-msa <command> ...`` or ``python -m bayes_msa``.

Exit status is 0 on success, 1 for usage or configuration errors, 2 for
data errors and 3 when training diverges.
"""

import argparse
import csv
import json
import os
import sys

from . import __version__
from . import checkpoint as ckpt
from .dataio import convert_wide, load_csv, synth_solar, write_csv
from .errors import BayesMSAError, ConfigError, DataError, InvalidValue, TrainingDiverged
from .experiment import (SUMMARY_METRICS, ExperimentConfig, compare, evaluate, evaluate_series,
                         fit, load_config, matrix_cells, prepare, summarize)
from .forecast import msa_predict, write_forecast_csv

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3

TABLE_VI_PAIRS = ((1.0, 2.0), (2.0, 3.0), (3.0, 4.0), (2.0, 6.0), (3.0, 8.0), (5.0, 15.0))


def _parse_overrides(pairs):
    out = {}
    for item in pairs or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key.path=value")
        key, raw = item.split("=", 1)
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _resolve_config(path, overrides):
    if path is None:
        cfg = ExperimentConfig()
        if overrides:
            raw = cfg.to_dict()
            for dotted, value in overrides.items():
                node = raw
                *parents, last = dotted.split(".")
                for p in parents:
                    node = node.setdefault(p, {})
                node[last] = value
            cfg = ExperimentConfig.from_dict(raw)
        return cfg
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    return load_config(path, overrides)


def _write_config_echo(path, cfg):
    with open(path, "w") as fh:
        json.dump({"_header": cfg.header(), **cfg.to_dict()}, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _write_rows(path, rows, columns, header):
    with open(path, "w", newline="") as fh:
        fh.write(f"# {header}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow(["" if r.get(c) is None else (repr(r[c]) if isinstance(r[c], float) else r[c])
                        for c in columns])


def _write_report(out_dir, report, header):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.txt"), "w") as fh:
        fh.write(f"# {header}\n")
        fh.write(report.to_text())
    with open(os.path.join(out_dir, "report.csv"), "w") as fh:
        fh.write(f"# {header}\n")
        fh.write(report.to_csv_row())


# -- commands ----------------------------------------------------------------------


def cmd_convert(args):
    series = convert_wide(args.input, args.customer, args.output, category=args.category,
                          header_comment=f"bayes_msa {__version__} converted customer={args.customer}")
    print(f"wrote {len(series)} rows to {args.output}")
    return EXIT_OK


def cmd_synth(args):
    series = synth_solar(args.days, args.seed, args.outlier_rate, args.outlier_scale)
    write_csv(series, args.output,
              header_comment=(f"bayes_msa {__version__} synth days={args.days} seed={args.seed} "
                              f"outlier_rate={args.outlier_rate!r} outlier_scale={args.outlier_scale!r}"))
    print(f"wrote {len(series)} rows to {args.output}")
    return EXIT_OK


def cmd_train(args):
    cfg = _resolve_config(args.config, _parse_overrides(args.set))
    out_dir = args.out or cfg.output_dir
    prepared = prepare(cfg)
    log_rows = []
    block = {"i": 0}

    def log(epoch, train_loss, val_loss):
        if epoch == 1 and log_rows:
            block["i"] += 1
        log_rows.append({"block": block["i"], "epoch": epoch, "train_loss": train_loss,
                         "val_loss": val_loss})
        if not args.quiet:
            print(f"block {block['i']} epoch {epoch}: train {train_loss:.6g} val {val_loss:.6g}",
                  file=sys.stderr)

    model, reports = fit(cfg, prepared, log=log)
    os.makedirs(out_dir, exist_ok=True)
    ckpt.save(os.path.join(out_dir, "checkpoint.json"), cfg, model, prepared.scaler)
    _write_rows(os.path.join(out_dir, "train_log.csv"), log_rows,
                ["block", "epoch", "train_loss", "val_loss"], cfg.header())
    _write_config_echo(os.path.join(out_dir, "config.json"), cfg)
    print(f"trained {len(reports)} block(s), {sum(r.epochs_run for r in reports)} epochs; "
          f"outputs in {out_dir}")
    return EXIT_OK


def cmd_forecast(args):
    cfg, model, scaler = ckpt.load(args.checkpoint)
    series = load_csv(args.series)
    steps = model.horizon if args.steps is None else args.steps
    if not 1 <= steps <= model.horizon:
        raise ConfigError(f"--steps must lie in [1, {model.horizon}]")
    if len(series) < cfg.k:
        raise InvalidValue(f"series has {len(series)} points, the model needs the last {cfg.k}")
    levels = cfg.levels if args.levels is None else args.levels
    samples = cfg.samples if args.samples is None else args.samples
    seed = cfg.seed if args.seed is None else args.seed
    mean, bands = msa_predict(model, scaler, series.values[-cfg.k:], samples, levels, seed,
                              zero_noise=not model.bayesian)
    mean = mean[:steps]
    bands = [type(b)(b.level, b.lower[:steps], b.upper[:steps]) for b in bands]
    out = args.out or os.path.join(cfg.output_dir, "forecast.csv")
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    write_forecast_csv(out, mean, bands, header_comment=cfg.header())
    print(f"wrote {steps}-step forecast to {out}")
    return EXIT_OK


def cmd_evaluate(args):
    stored, model, scaler = ckpt.load(args.checkpoint)
    cfg = stored if args.config is None else _resolve_config(args.config, None)
    if args.series:
        report, _, _ = evaluate_series(cfg, model, scaler, load_csv(args.series), args.samples)
    else:
        report, _, _ = evaluate(cfg, model, prepare(stored), args.samples)
    out_dir = args.out or stored.output_dir
    _write_report(out_dir, report, stored.header())
    sys.stdout.write(report.to_text())
    return EXIT_OK


def cmd_compare(args):
    cfg = _resolve_config(args.config, _parse_overrides(args.set))
    out_dir = args.out or cfg.output_dir
    seeds = list(range(args.seeds))
    if args.ab_sweep:
        cells = matrix_cells(args.cells, ["ab"], args.horizons, seeds, TABLE_VI_PAIRS)
    else:
        cells = matrix_cells(args.cells, args.modes, args.horizons, seeds)

    def log(row):
        if not args.quiet:
            print(f"{row['method']} H={row['horizon']} seed={row['seed']}: rmse {row['rmse']:.4f}",
                  file=sys.stderr)

    rows = compare(cfg, cells, workers=args.workers, log=log)
    os.makedirs(out_dir, exist_ok=True)
    cols = ["method", "cell_kind", "mode", "alpha", "beta", "horizon", "seed", *SUMMARY_METRICS,
            "coverage50", "coverage90", "epochs"]
    _write_rows(os.path.join(out_dir, "compare_runs.csv"), rows, cols, cfg.header())
    curves = [{"method": r["method"], "horizon": r["horizon"], "seed": r["seed"], "epoch": i + 1,
               "train_loss": v} for r in rows for i, v in enumerate(r["train_loss"])]
    _write_rows(os.path.join(out_dir, "train_curves.csv"), curves,
                ["method", "horizon", "seed", "epoch", "train_loss"], cfg.header())
    summary = summarize(rows)
    _write_rows(os.path.join(out_dir, "compare_summary.csv"), summary,
                ["method", "horizon", "seeds", *SUMMARY_METRICS], cfg.header())
    _write_config_echo(os.path.join(out_dir, "config.json"), cfg)
    for s in summary:
        cells_txt = "  ".join(f"{m}={'-' if s[m] is None else f'{s[m]:.4f}'}" for m in SUMMARY_METRICS)
        print(f"{s['method']:<28} H={s['horizon']:<3} {cells_txt}")
    return EXIT_OK


# -- argument parsing ------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="bayes-msa",
                                description="Bayesian BiLSTM multi-step-ahead forecasting.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("convert", help="wide per-day CSV to the long timestamp,kwh layout")
    c.add_argument("input")
    c.add_argument("customer", type=int)
    c.add_argument("output")
    c.add_argument("--category", default="GG")
    c.set_defaults(func=cmd_convert)

    s = sub.add_parser("synth", help="write a synthetic half-hourly solar series")
    s.add_argument("output")
    s.add_argument("--days", type=int, default=120)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--outlier-rate", type=float, default=0.02)
    s.add_argument("--outlier-scale", type=float, default=3.0)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train from a JSON config")
    t.add_argument("config", nargs="?")
    t.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config field, e.g. train.epochs=5 (repeatable)")
    t.add_argument("--out", help="output directory (default: config output_dir)")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    f = sub.add_parser("forecast", help="forecast the next H steps after a series")
    f.add_argument("checkpoint")
    f.add_argument("series")
    f.add_argument("--steps", type=int)
    f.add_argument("--samples", type=int)
    f.add_argument("--levels", type=float, nargs="+")
    f.add_argument("--seed", type=int)
    f.add_argument("--out")
    f.set_defaults(func=cmd_forecast)

    e = sub.add_parser("evaluate", help="score a checkpoint on its test split or a given series")
    e.add_argument("checkpoint")
    e.add_argument("series", nargs="?")
    e.add_argument("--config", help="take evaluation settings from this config instead")
    e.add_argument("--samples", type=int)
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    m = sub.add_parser("compare", help="method x horizon comparison over seeds")
    m.add_argument("config", nargs="?")
    m.add_argument("--set", action="append", metavar="KEY=VALUE")
    m.add_argument("--cells", nargs="+", default=["rnn", "lstm", "bilstm"],
                   choices=["rnn", "lstm", "bilstm"])
    m.add_argument("--modes", nargs="+", default=["deterministic", "kl", "ab"],
                   choices=["deterministic", "kl", "ab"])
    m.add_argument("--horizons", type=int, nargs="+", default=[1, 12, 24, 48])
    m.add_argument("--seeds", type=int, default=5, help="number of paired seeds")
    m.add_argument("--ab-sweep", action="store_true",
                   help="AB models only, over the six reference (alpha, beta) pairs")
    m.add_argument("--workers", type=int, default=1)
    m.add_argument("--out")
    m.add_argument("--quiet", action="store_true")
    m.set_defaults(func=cmd_compare)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        return args.func(args)
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, FileNotFoundError) as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, BayesMSAError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
