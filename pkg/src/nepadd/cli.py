"""Command line: gen-data, pretrain-ner, train, eval, sweep-lambda, forgery-study.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric abort.
Failures print one JSON line on stderr: {"error": kind, "exit_code": n, "message": ...}.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

from nepadd.config import RunConfig, dump_run_config, load_run_config
from nepadd.datagen import generate_corpus, load_corpus, split_by_forgery_level
from nepadd.errors import ConfigError, DataError, NepaddError
from nepadd.experiments import forgery_study, lambda_grid, sweep_lambda
from nepadd.formats import load_checkpoint, save_checkpoint, write_jsonl
from nepadd.metrics import eer_by_forgery_level, format_eer, score_dump_rows
from nepadd.plots import line_chart_svg, table_csv
from nepadd.training import (evaluate, load_model, load_teacher, model_checkpoint, module_digest,
                             pretrain_teacher, tag_accuracy, teacher_checkpoint, train_padd)

log = logging.getLogger("nepadd")


def _prepare_out(path, force):
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise ConfigError(f"--out {out} exists and is not a directory")
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"--out {out} is not empty (pass --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _run_config(args) -> RunConfig:
    cfg = load_run_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    train = cfg.train
    if getattr(args, "aggregation", None):
        train = replace(train, aggregation=args.aggregation)
    if getattr(args, "lambda_kl", None) is not None:
        train = replace(train, lambda_kl=args.lambda_kl)
    if getattr(args, "epochs", None) is not None:
        train = replace(train, epochs=args.epochs)
    return replace(cfg, train=train)


def _splits(data_dir):
    records = load_corpus(data_dir)
    by = {s: [r for r in records if r.split == s] for s in ("train", "dev", "eval")}
    for split, recs in by.items():
        if not recs:
            raise DataError(f"corpus at {data_dir} has no {split!r} utterances")
    return records, by


def _teacher(path):
    if path is None:
        return None
    p = Path(path)
    if not p.is_file():
        raise DataError(f"teacher checkpoint not found: {p}")
    return load_teacher(load_checkpoint(p))


def _require_teacher(args, train_cfg):
    if train_cfg.aggregation != "none" and args.teacher is None:
        raise ConfigError(f"--aggregation {train_cfg.aggregation} needs a pretrained teacher "
                          "(--teacher)")
    if train_cfg.aggregation == "at" and train_cfg.lambda_kl is None:
        raise ConfigError("--aggregation at needs --lambda-kl (or train.lambda_kl)")


# ---------------------------------------------------------------- commands


def cmd_gen_data(args):
    cfg = _run_config(args)
    out = _prepare_out(args.out, args.force)
    records = generate_corpus(cfg.corpus, out)
    (out / "run_config.yaml").write_text(dump_run_config(cfg))
    stats = json.loads((out / "stats.json").read_text())
    for row in stats:
        print(f"{row['name']}: bona_fide={row['bona_fide']} fake={row['fake']} "
              f"all={row['all']} named_entities={row['named_entities_count']}")
    log.info("wrote %d utterances to %s", len(records), out)


def cmd_pretrain_ner(args):
    cfg = _run_config(args)
    pre = cfg.pretrain if args.epochs is None else replace(cfg.pretrain, epochs=args.epochs)
    out = _prepare_out(args.out, args.force)
    _, by = _splits(args.data)
    res = pretrain_teacher(by["train"], by["dev"], cfg.model.ner, pre)
    save_checkpoint(out / "teacher.ckpt", teacher_checkpoint(res.teacher, pre))
    report = {"dev_tag_accuracy": res.dev_accuracy, "majority_rate": res.majority_rate,
              "initial_accuracy": res.initial_accuracy, "final_loss": res.losses[-1],
              "eval_tag_accuracy": tag_accuracy(res.teacher, by["eval"]),
              "pretrain": asdict(pre), "ner": asdict(cfg.model.ner)}
    _write_json(out / "pretrain.json", report)
    write_jsonl(out / "pretrain_log.jsonl",
                [{"step": i + 1, "loss": v} for i, v in enumerate(res.losses)])
    print(f"dev tag accuracy {res.dev_accuracy:.4f} (majority {res.majority_rate:.4f})")


def cmd_train(args):
    cfg = _run_config(args)
    _require_teacher(args, cfg.train)
    out = _prepare_out(args.out, args.force)
    _, by = _splits(args.data)
    teacher = _teacher(args.teacher) if cfg.train.aggregation != "none" else None
    digest = module_digest(teacher) if teacher is not None else None
    with open(out / "train_log.jsonl", "w") as fh:
        def sink(row):
            fh.write(json.dumps(row) + "\n")
            fh.flush()
        res = train_padd(by["train"], by["dev"], cfg.train, cfg.model_config(), teacher, sink)
    save_checkpoint(out / "model_best.ckpt", model_checkpoint(res, "best"))
    save_checkpoint(out / "model_final.ckpt", model_checkpoint(res, "final"))
    (out / "run_config.yaml").write_text(dump_run_config(cfg))
    final_dev = next(r["dev_eer"] for r in reversed(res.log) if "dev_eer" in r)
    summary = {"aggregation": cfg.train.aggregation, "lambda_kl": cfg.train.lambda_kl,
               "best_dev_eer": res.best_dev_eer, "best_step": res.best_step,
               "final_dev_eer": final_dev, "steps": res.step}
    if teacher is not None:
        summary["teacher_sha256_before"] = digest
        summary["teacher_sha256_after"] = module_digest(res.model.teacher)
    _write_json(out / "summary.json", summary)
    print(f"best dev EER {format_eer(res.best_dev_eer)} at step {res.best_step}")


def cmd_eval(args):
    out = _prepare_out(args.out, args.force)
    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.is_file():
        raise DataError(f"checkpoint not found: {ckpt_path}")
    model = load_model(load_checkpoint(ckpt_path))
    records = load_corpus(args.data, splits=[args.split])
    if not records:
        raise DataError(f"corpus at {args.data} has no {args.split!r} utterances")
    eer, thr, scored = evaluate(model, records)
    levels = eer_by_forgery_level(scored, split_by_forgery_level(records))
    write_jsonl(out / "scores.jsonl", score_dump_rows(scored))
    _write_json(out / "eval.json", {"split": args.split, "eer": eer, "eer_percent": format_eer(eer),
                                    "threshold": thr,
                                    "by_forgery_level": {str(k): v for k, v in levels.items()}})
    print(f"EER {format_eer(eer)}")


def cmd_sweep_lambda(args):
    grid = lambda_grid(args.from_, args.to, args.step)
    cfg = _run_config(args)
    if args.teacher is None:
        raise ConfigError("sweep-lambda trains in mode 'at' and needs --teacher")
    out = _prepare_out(args.out, args.force)
    _, by = _splits(args.data)
    teacher = _teacher(args.teacher)
    rows, best = sweep_lambda(by["train"], by["dev"], by["eval"], teacher, cfg.train,
                              cfg.model_config(), grid, args.jobs)
    cols = ["lambda_kl", "dev_eer", "eval_eer", "best_step"]
    (out / "sweep.csv").write_text(table_csv(rows, cols))
    svg = line_chart_svg({"NE-PADD-AT": [(r["lambda_kl"], 100 * r["eval_eer"]) for r in rows]},
                         title="EER vs lambda_KL", xlabel="lambda_KL", ylabel="eval EER (%)",
                         xticks=grid)
    (out / "sweep.svg").write_text(svg)
    _write_json(out / "best.json", {"selection": "argmin dev_eer", **best})
    (out / "run_config.yaml").write_text(dump_run_config(cfg))
    for r in rows:
        print(f"lambda {r['lambda_kl']:.1f}  dev {format_eer(r['dev_eer'])}  "
              f"eval {format_eer(r['eval_eer'])}")
    print(f"best lambda {best['lambda_kl']} (dev EER {format_eer(best['dev_eer'])})")


def cmd_forgery_study(args):
    cfg = _run_config(args)
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    bad = [m for m in modes if m not in ("af", "at", "none")]
    if not modes or bad:
        raise ConfigError(f"--modes must list af/at/none, got {args.modes!r}")
    if any(m != "none" for m in modes) and args.teacher is None:
        raise ConfigError("forgery-study modes af/at need --teacher")
    out = _prepare_out(args.out, args.force)
    records, _ = _splits(args.data)
    teacher = _teacher(args.teacher)
    rows = forgery_study(records, teacher, cfg.train, cfg.model_config(), modes, args.jobs,
                         args.min_fake)
    cols = ["level", "aggregation", "n_train", "n_eval", "dev_eer", "eval_eer"]
    (out / "forgery.csv").write_text(table_csv(rows, cols))
    series = {m: [(r["level"], 100 * r["eval_eer"]) for r in rows if r["aggregation"] == m]
              for m in modes}
    svg = line_chart_svg(series, title="EER vs forgery level", xlabel="spoofed segments",
                         ylabel="eval EER (%)", xticks=list(range(1, 11)))
    (out / "forgery.svg").write_text(svg)
    (out / "run_config.yaml").write_text(dump_run_config(cfg))
    for r in rows:
        print(f"level {r['level']:2d}  {r['aggregation']:<4}  eval {format_eer(r['eval_eer'])}")


# ---------------------------------------------------------------- parser


def build_parser():
    parser = argparse.ArgumentParser(prog="nepadd", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", default=None, help="YAML run config (defaults if omitted)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--force", action="store_true", help="allow a non-empty --out")
        p.add_argument("--seed", type=int, default=None, help="override every seed")
        if data:
            p.add_argument("--data", required=True, help="corpus directory from gen-data")

    p = sub.add_parser("gen-data", help="synthesize the corpus")
    common(p, data=False)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain-ner", help="pretrain the entity teacher")
    common(p)
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(func=cmd_pretrain_ner)

    p = sub.add_parser("train", help="train the detector")
    common(p)
    p.add_argument("--aggregation", choices=("af", "at", "none"), default=None)
    p.add_argument("--lambda-kl", dest="lambda_kl", type=float, default=None)
    p.add_argument("--teacher", default=None, help="teacher checkpoint (af/at)")
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="frame-level EER of a detector checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "dev", "eval"), default="eval")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-lambda", help="attention-transfer weight sweep")
    common(p)
    p.add_argument("--teacher", default=None)
    p.add_argument("--from", dest="from_", type=float, default=0.1)
    p.add_argument("--to", type=float, default=1.0)
    p.add_argument("--step", type=float, default=0.1)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_sweep_lambda)

    p = sub.add_parser("forgery-study", help="per forgery level train/test runs")
    common(p)
    p.add_argument("--teacher", default=None)
    p.add_argument("--modes", default="af", help="comma list of af,at,none")
    p.add_argument("--lambda-kl", dest="lambda_kl", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--min-fake", dest="min_fake", type=int, default=1,
                   help="fake utterances needed per split to keep a level")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_forgery_study)
    return parser


def _fail(kind, code, message):
    print(json.dumps({"error": kind, "exit_code": code, "message": message}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except NepaddError as exc:
        return _fail(type(exc).__name__, exc.exit_code, str(exc).replace("\n", " "))
    except OSError as exc:
        return _fail("DataError", DataError.exit_code, str(exc).replace("\n", " "))
    return 0
