"""Command line: synth, train, eval, predict, gradcheck, report.

Config resolution order for ``train``: preset, then ``--config`` JSON, then
each ``--set key=value``, then ``--seed`` / ``--deterministic``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .config import PRESETS, Config, ConfigError, coerce
from .data import DatasetError, SynthConfig, TensorRecordError, generate_synthetic, load_dataset
from .gradcheck import run_gradchecks
from .metrics import THRESHOLDS, EvalReport
from .nnmath import set_deterministic
from .train import (Checkpoint, TrainingDiverged, evaluate_model, measure_throughput, predict_dataset,
                    train, write_predictions)

log = logging.getLogger("tstnet")

EXIT_USAGE = 2
EXIT_DIVERGED = 3
EXIT_GRADCHECK = 1


def _kv(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


def resolve_config(args) -> Config:
    cfg = PRESETS[args.preset] if args.preset else Config()
    if args.config:
        blob = json.loads(Path(args.config).read_text())
        if args.preset and "preset" not in blob:
            blob["preset"] = args.preset
        cfg = Config.from_dict(blob)
    for k, v in args.set or []:
        cfg = coerce(cfg, k, v)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if args.deterministic is not None:
        cfg = cfg.replace(deterministic=args.deterministic)
    return cfg


def _runtime_overrides(ckpt: Checkpoint, args) -> Config:
    cfg = Config.from_dict(ckpt.config)
    for k, v in args.set or []:
        cfg = coerce(cfg, k, v)
    return cfg


def _load_model(args):
    ckpt = Checkpoint.load(args.checkpoint)
    model = ckpt.model()
    cfg = _runtime_overrides(ckpt, args)
    model.set_config(cfg)
    if cfg.deterministic:
        set_deterministic()
    return model, cfg


# --- subcommands -----------------------------------------------------------

def cmd_synth(args) -> int:
    fields = {f.name for f in dataclasses.fields(SynthConfig)}
    kw = {k: getattr(args, k) for k in ("seed", "episodes", "first_index", "strength", "noise")
          if getattr(args, k) is not None}
    for k, v in args.set or []:
        if k not in fields:
            raise ConfigError(f"unknown synthetic key {k!r}")
        default = getattr(SynthConfig(), k)
        try:
            kw[k] = type(default)(v)
        except ValueError:
            raise ConfigError(f"{k} expects {type(default).__name__}, got {v!r}") from None
    try:
        scfg = SynthConfig(**kw)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    manifests = generate_synthetic(scfg, args.out)
    print(f"wrote {len(manifests)} episodes to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    ds = load_dataset(args.data, cfg)
    val = load_dataset(args.val, cfg) if args.val else None
    resume = Checkpoint.load(args.resume) if args.resume else None
    log_path = out / "train_log.jsonl"
    if resume is None and log_path.exists():
        log_path.unlink()
    print(f"config {cfg.hash()}  episodes {len(ds)}" + (f"  eval {len(val)}" if val else ""))
    try:
        res = train(cfg, ds, val=val, resume=resume, log_path=log_path, eval_every=args.eval_every)
    except TrainingDiverged as e:
        e.checkpoint.save(out / "checkpoint.pt")
        print(f"training diverged: {e}; last good state (epoch {e.checkpoint.epoch}) saved",
              file=sys.stderr)
        return EXIT_DIVERGED
    res.checkpoint.save(out / "checkpoint.pt")
    last = res.history[-1] if res.history else {}
    print("final " + "  ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}"
                               for k, v in last.items()))
    print(f"checkpoint {out / 'checkpoint.pt'}")
    return 0


def cmd_eval(args) -> int:
    model, cfg = _load_model(args)
    ds = load_dataset(args.data, cfg)
    report, _, loss = evaluate_model(model, ds, cfg.batch)
    report.extra["loss"] = loss
    if args.throughput:
        report.extra.update(measure_throughput(model, ds, cfg.batch))
    if args.label:
        report.extra["label"] = args.label
    print(report.table(args.label or "model"))
    print("R@5: " + "  ".join(f"IoU>{mu:g}={report.r(5, mu):.4f}" for mu in THRESHOLDS))
    if args.out:
        report.save(args.out)
        print(f"report {args.out}")
    return 0


def cmd_predict(args) -> int:
    model, cfg = _load_model(args)
    ds = load_dataset(args.data, cfg)
    preds = predict_dataset(model, ds, cfg.batch, args.top_n)
    write_predictions(args.out, preds)
    print(f"wrote predictions for {len(preds)} episodes to {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_gradchecks(args.seed or 0, None if args.full else args.max_entries)
    ok = True
    total = 0.0
    for frag, res, secs in results:
        passed = res.passed(frag.tol)
        ok &= passed
        total += secs
        print(f"{'PASS' if passed else 'FAIL'}  {frag.name:<16} max_rel={res.max_rel_error:.2e}  "
              f"tol={frag.tol:.0e}  checked={res.checked}  {secs:.1f}s")
    print(f"{'all passed' if ok else 'FAILED'} in {total:.1f}s")
    return 0 if ok else EXIT_GRADCHECK


def _history_rows(history: list[dict]) -> tuple[list[str], list[dict]]:
    cols = ["epoch", "loss", "val_loss", "r1_03", "r1_05", "r1_07", "miou"]
    return cols, [{c: h.get(c, "") for c in cols} for h in history]


def cmd_report(args) -> int:
    from .plotting import loss_curve  # matplotlib only loads for this command

    run = Path(args.run)
    out = Path(args.out or run / "report")
    out.mkdir(parents=True, exist_ok=True)
    history = [json.loads(line) for line in (run / "train_log.jsonl").read_text().splitlines()
               if line.strip()]

    cols, rows = _history_rows(history)
    with open(out / "history.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=cols)
        w.writeheader()
        w.writerows(rows)

    results = []
    for path in args.eval or []:
        rep = EvalReport.from_dict(json.loads(Path(path).read_text()))
        results.append((rep.extra.get("label", Path(path).stem), rep))
    res_cols = (["method"] + [f"R@{n}_IoU>{mu:g}" for n in (1, 5) for mu in THRESHOLDS]
                + ["mIoU", "episodes"])
    res_rows = [[label] + [f"{100 * rep.r(n, mu):.2f}" for n in (1, 5) for mu in THRESHOLDS]
                + [f"{100 * rep.miou:.2f}", rep.episodes] for label, rep in results]
    with open(out / "results.csv", "w", newline="") as f:
        w = csv.writer(f, delimiter=args.delimiter)
        w.writerow(res_cols)
        w.writerows(res_rows)

    fig = loss_curve(history, out / "loss_curve.png", title=run.name)
    w = csv.writer(sys.stdout, delimiter=args.delimiter, lineterminator="\n")
    w.writerow(res_cols)
    w.writerows(res_rows)
    print(f"figure {fig}")
    print(f"tables {out / 'history.csv'} {out / 'results.csv'}")
    return 0


# --- parser ----------------------------------------------------------------

def _config_flags(p: argparse.ArgumentParser, train_flags: bool = True) -> None:
    p.add_argument("--set", type=_kv, action="append", metavar="KEY=VALUE",
                   help="override one config field (repeatable)")
    if train_flags:
        p.add_argument("--config", help="JSON config file (may name a preset)")
        p.add_argument("--preset", choices=sorted(PRESETS))
        p.add_argument("--seed", type=int)
        p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None,
                       help="single-threaded, bit-reproducible kernels")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tstnet", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--episodes", type=int)
    p.add_argument("--first-index", type=int, dest="first_index")
    p.add_argument("--strength", type=float)
    p.add_argument("--noise", type=float)
    p.add_argument("--set", type=_kv, action="append", metavar="KEY=VALUE",
                   help="any other synthetic-generator field")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--val", help="dataset evaluated after each logged epoch")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--eval-every", type=int, default=10, dest="eval_every")
    _config_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="write the report as JSON")
    p.add_argument("--label")
    p.add_argument("--throughput", action="store_true")
    _config_flags(p, train_flags=False)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("predict", help="write ranked moments as JSONL")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--top-n", type=int, dest="top_n")
    _config_flags(p, train_flags=False)
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--seed", type=int)
    p.add_argument("--max-entries", type=int, default=24, dest="max_entries",
                   help="coordinates sampled per tensor")
    p.add_argument("--full", action="store_true", help="check every coordinate")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("report", help="tables and figures for a run directory")
    p.add_argument("--run", required=True)
    p.add_argument("--eval", action="append", help="eval JSON to tabulate (repeatable)")
    p.add_argument("--out", help="output directory (default RUN/report)")
    p.add_argument("--delimiter", default=",")
    p.set_defaults(fn=cmd_report)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, DatasetError, TensorRecordError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
