"""Command-line entry point: generate, train, evaluate, forecast, benchmark.

Exit codes: 0 success, 1 usage/configuration error, 2 data error,
3 numerical divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from .bench import SEED_ENV, apply_overrides, emit_report, parse_spec, read_kv, run_benchmark_grid
from .baselines import RecurrentConfig
from .data import PROFILES, Scaler, load_csv, make_windows, prepare, split_train_test, synthesize_series, write_csv
from .errors import ConfigError, DataError, DivergenceError
from .metrics import evaluate
from .model import TransformerConfig
from .params import load_checkpoint
from .training import ALT_BETAS, MODEL_KINDS, TrainConfig, fit, model_from_checkpoint

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3

log = logging.getLogger("ewpf")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _seed(value: int) -> int:
    env = os.environ.get(SEED_ENV)
    return int(env) if env else value


def _load_data(spec: str, n_points: int, seed: int):
    if spec.startswith("synthetic"):
        _, _, profile = spec.partition(":")
        return synthesize_series(n_points, seed, profile or "diurnal-noise")
    return load_csv(spec)


def cmd_generate(args) -> int:
    ts = synthesize_series(args.n, _seed(args.seed), args.profile)
    write_csv(ts, args.out)
    print(f"wrote {len(ts)} rows to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    seed = _seed(args.seed)
    tf, rc, tr = {}, {}, {}
    if args.config:
        apply_overrides(read_kv(args.config), args.config, tf, rc, tr, {}, {})
    if args.epochs is not None:
        tr["epochs"] = args.epochs
    if args.lr is not None:
        tr["lr"] = args.lr
    if args.paper_betas:
        tr["beta1"], tr["beta2"] = ALT_BETAS
    tr["seed"] = seed
    train_cfg = TrainConfig(**tr)
    if args.model == "transformer":
        model_cfg = TransformerConfig(**tf, seq_len=args.seq, horizon=args.horizon)
    else:
        model_cfg = RecurrentConfig(**rc, cell=args.model, seq_len=args.seq, horizon=args.horizon)

    series = _load_data(args.data, args.n_points, seed)
    prepared = prepare(series, args.seq, args.horizon, args.train_frac)
    out = Path(args.out)
    meta = {
        "scaler.min": prepared.scaler.min,
        "scaler.max": prepared.scaler.max,
        "data.train_frac": args.train_frac,
        "data.seq_len": args.seq,
        "data.horizon": args.horizon,
    }
    model, history = fit(args.model, prepared.train, prepared.test, train_cfg, model_cfg, out / "model.ewpf", meta)
    history.to_csv(out / "history.csv")
    report = evaluate(model, prepared.test)
    (out / "metrics.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    print(f"checkpoint: {out / 'model.ewpf'}")
    print(f"test MSE={report.mse:.6g} MAE={report.mae:.6g} MAPE={report.mape:.6g} R2={report.r2:.6g}")
    return EXIT_OK


def _restore(path):
    meta, params = load_checkpoint(path)
    model = model_from_checkpoint(meta, params)
    try:
        scaler = Scaler(meta["scaler.min"], meta["scaler.max"])
    except KeyError:
        raise DataError(f"{path}: checkpoint carries no scaler") from None
    return meta, model, scaler


def cmd_evaluate(args) -> int:
    meta, model, scaler = _restore(args.checkpoint)
    seq, hor = model.cfg.seq_len, model.cfg.horizon
    series = _load_data(args.data, args.n_points, _seed(args.seed))
    _, test = split_train_test(series, meta.get("data.train_frac", 0.7), min_len=seq + hor)
    n_train = len(series) - len(test)
    ds = make_windows(scaler.transform(test.values), seq, hor, offset=n_train)
    report = evaluate(model, ds, scaler=scaler if args.denormalized else None, per_step=args.per_step)
    if args.out:
        emit_report([report], args.out)
    print(json.dumps(report.to_dict(), indent=2))
    return EXIT_OK


def cmd_forecast(args) -> int:
    _, model, scaler = _restore(args.checkpoint)
    window = load_csv(args.window_csv)
    seq = model.cfg.seq_len
    if len(window) != seq:
        raise DataError(f"window has {len(window)} points but the model expects seq_len={seq}")
    x = scaler.transform(window.values).reshape(seq, 1)
    y = scaler.inverse_transform(model.forward(x).data[:, 0])
    print("step,power")
    for j, v in enumerate(y, start=1):
        print(f"{j},{float(v)!r}")
    return EXIT_OK


def cmd_benchmark(args) -> int:
    spec = parse_spec(args.spec)
    if args.jobs is not None:
        spec = replace(spec, jobs=args.jobs)
    if args.out is not None:
        spec = replace(spec, out_dir=Path(args.out))
    reports = run_benchmark_grid(spec)
    failed = [r for r in reports if not r.ok]
    print(f"{len(reports) - len(failed)}/{len(reports)} cells completed; report in {spec.out_dir}")
    for r in failed:
        print(f"  failed {r.model} seq={r.seq_len} h={r.horizon}: {r.error}", file=sys.stderr)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ewpf", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("generate", help="write a synthetic hourly power CSV")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=5000)
    g.add_argument("--seed", type=int, default=42)
    g.add_argument("--profile", choices=PROFILES, default="diurnal-noise")
    g.set_defaults(func=cmd_generate)

    def data_args(sp):
        sp.add_argument("--data", required=True, help="CSV path, or synthetic[:profile]")
        sp.add_argument("--n-points", type=int, default=5000, help="length of synthetic data")
        sp.add_argument("--seed", type=int, default=42)

    t = sub.add_parser("train", help="fit one model and write checkpoint + history")
    t.add_argument("--model", choices=MODEL_KINDS, required=True)
    t.add_argument("--seq", type=int, required=True)
    t.add_argument("--horizon", type=int, required=True)
    data_args(t)
    t.add_argument("--config", help="key = value overrides (d_model, hidden, lr, epochs, ...)")
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--train-frac", type=float, default=0.70)
    t.add_argument("--paper-betas", action="store_true", help=f"use Adam betas {ALT_BETAS}")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score a checkpoint on the test split of a series")
    e.add_argument("--checkpoint", required=True)
    data_args(e)
    e.add_argument("--denormalized", action="store_true")
    e.add_argument("--per-step", action="store_true")
    e.add_argument("--out", help="also write table2.csv/table2.md here")
    e.set_defaults(func=cmd_evaluate)

    b = sub.add_parser("benchmark", help="run the model x sequence x horizon grid")
    b.add_argument("--spec", required=True)
    b.add_argument("--jobs", type=int)
    b.add_argument("--out")
    b.set_defaults(func=cmd_benchmark)

    f = sub.add_parser("forecast", help="forecast from one input window")
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--window-csv", required=True)
    f.set_defaults(func=cmd_forecast)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
