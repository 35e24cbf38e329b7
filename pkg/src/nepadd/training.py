"""Teacher pretraining, detector training (AF / AT / none), Adam, Noam schedule, checkpoints."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from nepadd import tensor as nt
from nepadd.aggregation import TransferConfig, total_loss
from nepadd.datagen import UtteranceRecord
from nepadd.errors import ConfigError, ContractError, DataError, NumericAbort
from nepadd.formats import Checkpoint
from nepadd.layers import Module
from nepadd.metrics import ScoreSet, compute_eer
from nepadd.model import AGGREGATION_MODES, ModelConfig, NEPADDModel
from nepadd.ner import NerBranch, NerBranchConfig, predict_tags, pretrain_ner_loss

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    base_lr: float = 1e-3
    warmup_steps: int = 100
    lambda_kl: float | None = None
    aggregation: str = "af"
    seed: int = 0
    eval_every: int = 50
    spoof_weight: float | None = None
    row_reduction: str = "mean-over-query-rows"
    epsilon_clamp: float = 1e-10

    def __post_init__(self):
        if self.warmup_steps < 1 or self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("warmup_steps, batch_size and epochs must all be >= 1")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        if self.aggregation not in AGGREGATION_MODES:
            raise ConfigError(f"aggregation must be one of {AGGREGATION_MODES}")
        if self.lambda_kl is not None and self.lambda_kl < 0:
            raise ConfigError(f"lambda_kl must be >= 0, got {self.lambda_kl}")

    @property
    def transfer(self):
        return TransferConfig(self.lambda_kl, self.epsilon_clamp, self.row_reduction)


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0


def noam_lr(step: int, warmup: int, base_lr: float) -> float:
    """Noam schedule scaled so that it peaks at exactly ``base_lr`` when step == warmup."""
    if step < 1:
        raise ContractError(f"Noam schedule is defined for step >= 1, got {step}")
    return base_lr * min(math.sqrt(warmup / step), step / warmup)


class Adam:
    """Adam with bias correction. Frozen parameters are skipped entirely."""

    def __init__(self, params: dict, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr):
        self.t += 1
        for k, p in self.params.items():
            if p.frozen:
                continue
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise NumericAbort(f"non-finite gradient for {k} at step {self.t}")
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            m_hat = self.m[k] / (1.0 - self.beta1 ** self.t)
            v_hat = self.v[k] / (1.0 - self.beta2 ** self.t)
            p.data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state(self) -> dict[str, np.ndarray]:
        out = {"adam.t": np.array(float(self.t))}
        for k in self.params:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out

    def load_state(self, state):
        self.t = int(state["adam.t"])
        for k in self.params:
            self.m[k] = np.array(state[f"adam.m.{k}"])
            self.v[k] = np.array(state[f"adam.v.{k}"])


def bucketed_batches(records, batch_size, rng):
    """Batches of utterances with similar T, in a shuffled order."""
    ordered = sorted(records, key=lambda r: (r.T, r.id))
    batches = [ordered[i:i + batch_size] for i in range(0, len(ordered), batch_size)]
    return [batches[i] for i in rng.permutation(len(batches))]


def _as_input(rec: UtteranceRecord):
    if rec.features is None:
        raise DataError(f"{rec.id}: features not loaded")
    return nt.Tensor(rec.features)


# ---------------------------------------------------------------- teacher


@dataclass
class PretrainResult:
    teacher: NerBranch
    losses: list
    dev_accuracy: float
    majority_rate: float
    initial_accuracy: float


def tag_accuracy(teacher: NerBranch, records):
    hit = total = 0
    with nt.no_grad():
        for rec in records:
            pred = predict_tags(teacher(_as_input(rec))[3])
            hit += int((pred == rec.tags).sum())
            total += rec.T
    return hit / total


def pretrain_teacher(train, dev, ner_cfg: NerBranchConfig = NerBranchConfig(),
                     cfg: PretrainConfig = PretrainConfig()) -> PretrainResult:
    """Fit the NER branch on frame tags with plain Adam (no schedule)."""
    if not any(r.entities for r in train):
        raise DataError("training split carries no entity annotations")
    rng = np.random.default_rng(cfg.seed)
    teacher = NerBranch(ner_cfg, rng)
    params = teacher.parameters()
    opt = Adam(params)
    initial = tag_accuracy(teacher, dev)
    losses = []
    for epoch in range(cfg.epochs):
        for batch in bucketed_batches(train, cfg.batch_size, rng):
            teacher.zero_grad()
            with nt.Tape():
                loss = None
                for rec in batch:
                    utt = pretrain_ner_loss(teacher(_as_input(rec))[3], rec.tags)
                    loss = utt if loss is None else loss + utt
                loss = loss * (1.0 / len(batch))
                nt.backward(loss)
            opt.step(cfg.lr)
            losses.append(loss.item())
        log.info("teacher epoch %d loss %.4f", epoch + 1, losses[-1])
    tags = np.concatenate([r.tags for r in dev])
    return PretrainResult(teacher, losses, tag_accuracy(teacher, dev),
                          float(np.mean(tags == 0)), initial)


def teacher_checkpoint(teacher: NerBranch, cfg: PretrainConfig | None = None) -> Checkpoint:
    config = {"kind": "teacher", "ner": asdict(teacher.cfg),
              "pretrain": asdict(cfg) if cfg else None}
    return Checkpoint(teacher.state_dict(), {k: True for k in teacher.parameters()}, {}, 0, config)


def load_teacher(ckpt: Checkpoint) -> NerBranch:
    if ckpt.config.get("kind") != "teacher":
        raise DataError("checkpoint is not a teacher checkpoint")
    teacher = NerBranch(NerBranchConfig(**ckpt.config["ner"]), np.random.default_rng(0))
    teacher.load_state_dict(ckpt.params)
    return teacher.freeze()


# ---------------------------------------------------------------- detector


@dataclass
class TrainResult:
    model: NEPADDModel
    log: list
    best_state: dict
    final_state: dict
    best_dev_eer: float
    best_step: int
    optimizer: Adam
    step: int
    config: dict = field(default_factory=dict)


def teacher_cache(model: NEPADDModel, records):
    if model.teacher is None:
        return {}
    return {r.id: model.teacher_outputs(_as_input(r)) for r in records}


def score_utterances(model: NEPADDModel, records, cache=None):
    """id -> (spoof scores, frame labels)."""
    cache = cache or {}
    return {r.id: (model.spoof_scores(_as_input(r), cache.get(r.id)), r.labels) for r in records}


def evaluate(model: NEPADDModel, records, cache=None):
    """Pooled frame-level (eer, threshold, per-utterance scores)."""
    scored = score_utterances(model, records, cache)
    eer, thr = compute_eer(ScoreSet.from_utterances([s for s, _ in scored.values()],
                                                    [y for _, y in scored.values()]))
    return eer, thr, scored


def train_padd(train, dev, cfg: TrainConfig, model_cfg: ModelConfig = ModelConfig(),
               teacher: NerBranch | None = None, log_sink=None) -> TrainResult:
    """Train the detector end to end; keeps the parameters with the best dev EER.

    ``log_sink`` (optional) receives every log row as it is produced.
    """
    if cfg.aggregation == "at" and cfg.lambda_kl is None:
        raise ConfigError("aggregation 'at' needs lambda_kl")
    if cfg.aggregation != "none" and teacher is None:
        raise ConfigError(f"aggregation {cfg.aggregation!r} needs a pretrained teacher checkpoint")
    model_cfg = replace(model_cfg, aggregation=cfg.aggregation)
    rng = np.random.default_rng(cfg.seed)
    model = NEPADDModel(model_cfg, rng, teacher if cfg.aggregation != "none" else None)
    params = model.parameters()
    opt = Adam(params)
    transfer = cfg.transfer
    lam = cfg.lambda_kl if cfg.aggregation == "at" else 0.0
    cache = teacher_cache(model, list(train) + list(dev))

    rows = []
    best = (math.inf, 0, model.state_dict())
    step = 0

    def emit(row):
        rows.append(row)
        if log_sink is not None:
            log_sink(row)

    for _ in range(cfg.epochs):
        for batch in bucketed_batches(train, cfg.batch_size, rng):
            step += 1
            lr = noam_lr(step, cfg.warmup_steps, cfg.base_lr)
            model.zero_grad()
            ce_sum = kl_sum = 0.0
            with nt.Tape():
                loss = None
                for rec in batch:
                    ce, kl, _ = model.losses(_as_input(rec), rec.labels, transfer,
                                             cache.get(rec.id), cfg.spoof_weight)
                    utt = total_loss(ce, kl, lam)
                    ce_sum += ce.item()
                    kl_sum += kl.item() if kl is not None else 0.0
                    loss = utt if loss is None else loss + utt
                loss = loss * (1.0 / len(batch))
                nt.backward(loss)
            opt.step(lr)
            row = {"step": step, "lr": lr, "loss_ce": ce_sum / len(batch)}
            if cfg.aggregation == "at":
                row["loss_kl"] = kl_sum / len(batch)
            row["loss_total"] = loss.item()
            if step % cfg.eval_every == 0:
                eer = evaluate(model, dev, cache)[0]
                row["dev_eer"] = eer
                if eer < best[0]:
                    best = (eer, step, model.state_dict())
            emit(row)
    if step % cfg.eval_every != 0:
        eer = evaluate(model, dev, cache)[0]
        rows[-1]["dev_eer"] = eer
        if eer < best[0]:
            best = (eer, step, model.state_dict())
    final_state = model.state_dict()
    config = {"kind": "nepadd", "model": model_cfg.to_dict(), "train": asdict(cfg)}
    return TrainResult(model, rows, best[2], final_state, best[0], best[1], opt, step, config)


def model_checkpoint(result: TrainResult, which="best") -> Checkpoint:
    state = result.best_state if which == "best" else result.final_state
    frozen = result.model.frozen_flags()
    step = result.best_step if which == "best" else result.step
    opt = result.optimizer.state() if which == "final" else {}
    return Checkpoint(dict(state), frozen, opt, step, result.config)


def load_model(ckpt: Checkpoint) -> NEPADDModel:
    if ckpt.config.get("kind") != "nepadd":
        raise DataError("checkpoint is not a detector checkpoint")
    model = NEPADDModel(ModelConfig.from_dict(ckpt.config["model"]), np.random.default_rng(0))
    model.load_state_dict(ckpt.params)
    for k, p in model.named_parameters():
        p.frozen = ckpt.frozen.get(k, p.frozen)
    return model


def module_digest(module: Module) -> str:
    """SHA-256 over parameter names, shapes and float64 bytes."""
    import hashlib

    h = hashlib.sha256()
    for k, p in module.named_parameters():
        h.update(k.encode())
        h.update(json.dumps(p.shape).encode())
        h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return h.hexdigest()
