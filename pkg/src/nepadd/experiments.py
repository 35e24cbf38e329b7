"""Multi-run protocols: the lambda sweep and the forgery-level study.

Each run gets its own model, tape and RNG stream, so runs can execute in
worker processes (``jobs > 1``) and still produce the same table as a
sequential execution.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

from nepadd.datagen import FORGERY_LEVELS, split_by_forgery_level
from nepadd.errors import ConfigError
from nepadd.model import ModelConfig
from nepadd.training import TrainConfig, evaluate, train_padd

log = logging.getLogger(__name__)


def lambda_grid(start=0.1, stop=1.0, step=0.1):
    """Inclusive arithmetic grid, rounded so 0.1 + 2*0.1 prints as 0.3."""
    if step <= 0:
        raise ConfigError(f"sweep step must be > 0, got {step}")
    if stop < start:
        raise ConfigError(f"sweep range is empty: from {start} to {stop}")
    n = int(math.floor((stop - start) / step + 1e-9)) + 1
    return [round(start + i * step, 10) for i in range(n)]


@dataclass
class RunSpec:
    """One independent training run with its own train/dev/eval records."""

    key: tuple
    train: list
    dev: list
    eval: list
    train_cfg: TrainConfig
    model_cfg: ModelConfig
    teacher: object = None


def execute(spec: RunSpec) -> dict:
    res = train_padd(spec.train, spec.dev, spec.train_cfg, spec.model_cfg, spec.teacher)
    res.model.load_state_dict(res.best_state)
    eval_eer = evaluate(res.model, spec.eval)[0]
    return {"key": spec.key, "dev_eer": res.best_dev_eer, "eval_eer": eval_eer,
            "best_step": res.best_step,
            "loss_total": [row["loss_total"] for row in res.log]}


def run_all(specs, jobs=1):
    """Results in the order of ``specs`` regardless of ``jobs``."""
    if jobs < 1:
        raise ConfigError(f"--jobs must be >= 1, got {jobs}")
    if jobs == 1 or len(specs) <= 1:
        return [execute(s) for s in specs]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(execute, specs))


# ---------------------------------------------------------------- lambda sweep


def sweep_lambda(train, dev, evals, teacher, train_cfg: TrainConfig, model_cfg: ModelConfig,
                 grid, jobs=1):
    """AT runs over ``grid``; returns (rows, best_row) with best = argmin dev EER."""
    specs = [RunSpec(("at", lam), train, dev, evals,
                     replace(train_cfg, aggregation="at", lambda_kl=lam),
                     replace(model_cfg, aggregation="at"), teacher) for lam in grid]
    rows = []
    for lam, out in zip(grid, run_all(specs, jobs)):
        rows.append({"lambda_kl": lam, "dev_eer": out["dev_eer"], "eval_eer": out["eval_eer"],
                     "best_step": out["best_step"]})
    best = min(rows, key=lambda r: (r["dev_eer"], r["lambda_kl"]))
    return rows, best


# ---------------------------------------------------------------- forgery levels


def level_subsets(records, min_fake=1):
    """level -> (train, dev, eval) record lists, each fake subset plus all bona fide.

    A level is skipped (with a warning) when any split has fewer than
    ``min_fake`` fake utterances at that level.
    """
    by_split = {s: [r for r in records if r.split == s] for s in ("train", "dev", "eval")}
    bona = {s: [r for r in recs if not r.is_fake] for s, recs in by_split.items()}
    levels = {s: split_by_forgery_level(recs) for s, recs in by_split.items()}
    out = {}
    for level in FORGERY_LEVELS:
        counts = {s: len(levels[s][level]) for s in by_split}
        if min(counts.values()) < min_fake:
            log.warning("forgery level %d skipped: fake utterances per split %s < %d",
                        level, counts, min_fake)
            continue
        out[level] = tuple(levels[s][level] + bona[s] for s in ("train", "dev", "eval"))
    return out


def forgery_study(records, teacher, train_cfg: TrainConfig, model_cfg: ModelConfig,
                  modes=("af",), jobs=1, min_fake=1):
    """Train and test per forgery level; rows {level, aggregation, n_train, n_eval, eval_eer}."""
    subsets = level_subsets(records, min_fake)
    specs = []
    for level, (tr, dv, ev) in subsets.items():
        for mode in modes:
            cfg = replace(train_cfg, aggregation=mode)
            if mode == "at" and cfg.lambda_kl is None:
                raise ConfigError("forgery study in mode 'at' needs lambda_kl")
            specs.append(RunSpec((level, mode), tr, dv, ev, cfg,
                                 replace(model_cfg, aggregation=mode),
                                 teacher if mode != "none" else None))
    rows = []
    for spec, out in zip(specs, run_all(specs, jobs)):
        level, mode = spec.key
        rows.append({"level": level, "aggregation": mode, "n_train": len(spec.train),
                     "n_eval": len(spec.eval), "dev_eer": out["dev_eer"],
                     "eval_eer": out["eval_eer"]})
    return rows
