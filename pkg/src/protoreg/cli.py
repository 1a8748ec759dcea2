"""Command-line entry point.

Subcommands: synth, train, eval, ablate, sweep, explain, oracle-check.
Exit codes: 0 success, 1 usage error (with usage text), 2 runtime error.
Every run writes its artifacts under --out-dir plus a run_manifest.txt
recording the resolved config, the seed, and the artifact paths; given
identical arguments and seeds, artifact bytes are identical across runs.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import config as configmod
from .checkpoint import load_checkpoint
from .explain import explain_prediction
from .inference import evaluate, predict_dataset
from .synthdata import SynthConfig, generate, load_manifest
from .trainer import TrainConfig, run_ablation_table, run_sweep, train
from .transport import oracle_check


class UsageError(Exception):
    def __init__(self, message: str, usage: str = ""):
        super().__init__(message)
        self.usage = usage


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message, self.format_usage())


def _add_common(p, config=True, manifest=False, checkpoint=False):
    p.add_argument("--out-dir", required=True, help="directory for all outputs")
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    if config:
        p.add_argument("--config", default=None, help="key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="config override, repeatable; wins over the file")
    if manifest:
        p.add_argument("--manifest", required=True, help="dataset manifest CSV")
    if checkpoint:
        p.add_argument("--checkpoint", required=True, help="trained checkpoint file")


def _resolve_config(args) -> dict:
    overrides = {}
    for item in getattr(args, "set", []):
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    raw = configmod.parse_kv_text(Path(args.config).read_text()) if args.config else {}
    cfg = configmod.resolve(raw, overrides)
    if args.seed is not None:
        cfg["seed"] = args.seed
    return cfg


def _write_run_manifest(out_dir: Path, command: str, cfg: dict | None) -> None:
    lines = [f"command = {command}"]
    if cfg is not None:
        lines.append(f"seed = {cfg['seed']}")
        lines.append("[config]")
        lines.append(configmod.to_text(cfg).rstrip("\n"))
    lines.append("[artifacts]")
    for path in sorted(out_dir.rglob("*")):
        if path.is_file() and path.name != "run_manifest.txt":
            rel = path.relative_to(out_dir).as_posix()
            lines.append(f"{rel} ({path.stat().st_size} bytes)")
    (out_dir / "run_manifest.txt").write_text("\n".join(lines) + "\n")


def _cmd_synth(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    synth = SynthConfig(n_samples=cfg["n_samples"], image_size=cfg["image_size"],
                        label_min=cfg["label_min"], label_max=cfg["label_max"],
                        noise_std=cfg["noise_std"],
                        occlusion_strength=cfg["occlusion_strength"], seed=cfg["seed"])
    generate(synth, out_dir=out)
    _write_run_manifest(out, "synth", cfg)
    return 0


def _cmd_train(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out_dir)
    dataset = load_manifest(args.manifest)
    train(TrainConfig(cfg), dataset, out_dir=out)
    _write_run_manifest(out, "train", cfg)
    return 0


def _write_predictions_csv(path, dataset, preds) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["sample_id", "y_true", "y_hat", "used_fallback", "n_contributing"])
        for sid, y, p in zip(dataset.ids, dataset.labels, preds):
            wr.writerow([int(sid), f"{y:.17g}", f"{p.y_hat:.17g}",
                         str(p.used_fallback).lower(), len(p.contributing)])


def _cmd_eval(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ck = load_checkpoint(args.checkpoint)
    dataset = load_manifest(args.manifest)
    preds = predict_dataset(ck.model, dataset)
    _write_predictions_csv(out / "predictions.csv", dataset, preds)
    rep = evaluate(ck.model, dataset)
    (out / "metrics.txt").write_text(
        f"n = {rep.n}\nmae = {rep.mae:.17g}\nmae_std = {rep.mae_std:.17g}\n"
        f"fallback_rate = {rep.fallback_rate:.17g}\n"
        f"mean_predictor_mae = {rep.mean_predictor_mae:.17g}\n")
    _write_run_manifest(out, "eval", None)
    return 0


def _cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out_dir)
    dataset = load_manifest(args.manifest)
    report = run_ablation_table(TrainConfig(cfg), dataset, out_dir=out)
    print(report.table_text, end="")
    _write_run_manifest(out, "ablate", cfg)
    return 0


def _cmd_sweep(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out_dir)
    dataset = load_manifest(args.manifest)
    checkpoint = load_checkpoint(args.checkpoint) if args.checkpoint else None
    values = [float(v) for v in args.values.split(",") if v.strip()]
    run_sweep(TrainConfig(cfg), dataset, args.parameter, values,
              checkpoint=checkpoint, out_dir=out)
    _write_run_manifest(out, "sweep", cfg)
    return 0


def _cmd_explain(args) -> int:
    out = Path(args.out_dir)
    ck = load_checkpoint(args.checkpoint)
    dataset = load_manifest(args.manifest)
    train_set = load_manifest(args.train_manifest) if args.train_manifest else dataset
    pos = np.flatnonzero(dataset.ids == args.sample_id)
    if pos.size == 0:
        raise UsageError(f"sample_id {args.sample_id} not found in {args.manifest}")
    i = int(pos[0])
    record = explain_prediction(ck.model, dataset.images[i], int(dataset.ids[i]),
                                top_k=args.top_k, out_dir=out, train_set=train_set)
    print(f"sample {record.sample_id}: prediction {record.prediction.y_hat:.6g} "
          f"(fallback={record.prediction.used_fallback})")
    _write_run_manifest(out, "explain", None)
    return 0


def _cmd_oracle_check(args) -> int:
    eps_values = [float(v) for v in args.eps.split(",") if v.strip()]
    res = oracle_check(m=args.m, trials=args.trials, eps_values=eps_values,
                       seed=args.seed if args.seed is not None else 0)
    status = "PASS" if res.passed else "FAIL"
    print(f"oracle-check: {status} over {res.trials} trials at m={args.m}, "
          f"eps={eps_values}")
    print(f"  max entropic gap above exact optimum: {res.max_gap:.3e}")
    print(f"  max marginal residual (L-inf): {res.max_residual:.3e}")
    for v in res.violations[:20]:
        print(f"  violation: {v}")
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "oracle_check.txt").write_text(
            f"status = {status}\ntrials = {res.trials}\nmax_gap = {res.max_gap:.17g}\n"
            f"max_residual = {res.max_residual:.17g}\nviolations = {len(res.violations)}\n")
        _write_run_manifest(out, "oracle-check", None)
    return 0 if res.passed else 2


def build_parser() -> _Parser:
    parser = _Parser(prog="protoreg",
                     description="prototype-based interpretable regression")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parser_class=_Parser, help="generate a synthetic dataset")
    _add_common(p)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", parser_class=_Parser, help="train a model")
    _add_common(p, manifest=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", parser_class=_Parser, help="evaluate a checkpoint")
    _add_common(p, config=False, manifest=True, checkpoint=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", parser_class=_Parser, help="run the ablation table")
    _add_common(p, manifest=True)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("sweep", parser_class=_Parser, help="hyperparameter sweep")
    _add_common(p, manifest=True)
    p.add_argument("--parameter", required=True,
                   choices=("beta", "sigma", "n_p", "c_z", "r"))
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--checkpoint", default=None,
                   help="trained checkpoint (required for the r sweep)")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("explain", parser_class=_Parser, help="explain one prediction")
    _add_common(p, config=False, manifest=True, checkpoint=True)
    p.add_argument("--sample-id", type=int, required=True)
    p.add_argument("--top-k", type=int, default=4)
    p.add_argument("--train-manifest", default=None,
                   help="manifest holding the prototype source images "
                        "(defaults to --manifest)")
    p.set_defaults(func=_cmd_explain)

    p = sub.add_parser("oracle-check", parser_class=_Parser,
                       help="sandwich-bound check of the transport solver")
    p.add_argument("--m", type=int, default=4)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--eps", default="0.1", help="comma-separated eps values")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=_cmd_oracle_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc.usage or parser.format_usage(), end="", file=sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        return int(args.func(args) or 0)
    except UsageError as exc:
        print(exc.usage or parser.format_usage(), end="", file=sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except configmod.ConfigError as exc:
        print(parser.format_usage(), end="", file=sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main(sys.argv[1:]))
