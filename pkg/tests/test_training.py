import math
from dataclasses import replace

import numpy as np
import pytest

from nepadd.classifier import ClassifierConfig
from nepadd.datagen import CorpusConfig, synthesize
from nepadd.errors import ConfigError, ContractError, DataError, NumericAbort
from nepadd.model import ModelConfig
from nepadd.ner import NerBranchConfig
from nepadd.padd import PaddBranchConfig
from nepadd.tensor import Parameter
from nepadd.training import (Adam, PretrainConfig, TrainConfig, bucketed_batches, evaluate,
                             load_model, model_checkpoint, module_digest, noam_lr, pretrain_teacher,
                             train_padd)

TINY_NER = NerBranchConfig(conv_channels=6, lstm_layers=1, lstm_hidden=2)
TINY_MODEL = ModelConfig(padd=PaddBranchConfig(hidden_channels=6, model_dim=4, residual_blocks=1),
                         ner=TINY_NER,
                         classifier=ClassifierConfig(dim=4, layers=1, heads=2, ff_dim=8,
                                                     lstm_hidden=3, fc_width=6))


def tiny_train_cfg(**kw):
    base = dict(epochs=2, batch_size=4, warmup_steps=3, eval_every=2, aggregation="none")
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def corpus():
    recs = synthesize(CorpusConfig(n_train=12, n_dev=4, n_eval=4, t_min=80, t_max=100))
    return {s: [r for r in recs if r.split == s] for s in ("train", "dev", "eval")}


@pytest.fixture(scope="module")
def teacher(corpus):
    return pretrain_teacher(corpus["train"], corpus["dev"], TINY_NER,
                            PretrainConfig(epochs=1, batch_size=4)).teacher.freeze()


class TestNoam:
    def test_peak_equals_base(self):
        assert noam_lr(4000, 4000, 1e-4) == pytest.approx(1e-4, rel=1e-15)

    def test_first_step(self):
        assert noam_lr(1, 100, 1e-4) == pytest.approx(1e-6, rel=1e-12)

    def test_decay_after_warmup(self):
        assert noam_lr(400, 100, 1e-4) == pytest.approx(0.5e-4, rel=1e-12)

    def test_shape(self):
        lrs = [noam_lr(s, 10, 1.0) for s in range(1, 40)]
        assert np.argmax(lrs) == 9
        assert all(np.diff(lrs[:10]) > 0) and all(np.diff(lrs[9:]) < 0)

    def test_step_zero_rejected(self):
        with pytest.raises(ContractError):
            noam_lr(0, 10, 1e-3)


class TestAdam:
    def test_zero_gradient_no_move(self):
        p = Parameter(np.array([1.0, -2.0]))
        Adam({"p": p}).step(0.1)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_first_step_is_lr_times_sign(self):
        p = Parameter(np.array([0.0, 0.0]))
        p.grad = np.array([3.0, -0.5])
        Adam({"p": p}).step(1e-3)
        np.testing.assert_allclose(p.data, [-1e-3, 1e-3], rtol=1e-7)

    def test_frozen_skipped(self):
        p = Parameter(np.ones(3))
        p.frozen = True
        p.grad = np.ones(3)
        opt = Adam({"p": p})
        opt.step(1.0)
        np.testing.assert_array_equal(p.data, 1.0)
        np.testing.assert_array_equal(opt.m["p"], 0.0)

    def test_nan_gradient_aborts(self):
        p = Parameter(np.ones(2))
        p.grad = np.array([np.nan, 0.0])
        with pytest.raises(NumericAbort):
            Adam({"p": p}).step(1e-3)

    def test_state_round_trip(self):
        p = Parameter(np.ones(2))
        p.grad = np.array([1.0, 2.0])
        opt = Adam({"p": p})
        opt.step(0.1)
        other = Adam({"p": p})
        other.load_state(opt.state())
        assert other.t == 1
        np.testing.assert_array_equal(other.v["p"], opt.v["p"])


class TestBatches:
    def test_partition_and_bucketing(self, corpus):
        batches = bucketed_batches(corpus["train"], 5, np.random.default_rng(0))
        ids = sorted(r.id for b in batches for r in b)
        assert ids == sorted(r.id for r in corpus["train"])
        assert [len(b) for b in batches].count(5) == 2
        spans = sorted((min(r.T for r in b), max(r.T for r in b)) for b in batches)
        assert all(a[1] <= b[0] for a, b in zip(spans, spans[1:]))


class TestTraining:
    def test_none_mode_log(self, corpus):
        res = train_padd(corpus["train"], corpus["dev"], tiny_train_cfg(), TINY_MODEL)
        assert res.step == 6 and len(res.log) == 6
        assert all("loss_kl" not in r for r in res.log)
        assert [r["step"] for r in res.log if "dev_eer" in r] == [2, 4, 6]
        assert all(math.isfinite(r["loss_total"]) for r in res.log)
        assert res.best_dev_eer == min(r["dev_eer"] for r in res.log if "dev_eer" in r)

    def test_best_checkpoint_restores_best_state(self, corpus):
        res = train_padd(corpus["train"], corpus["dev"], tiny_train_cfg(), TINY_MODEL)
        model = load_model(model_checkpoint(res, "best"))
        assert evaluate(model, corpus["dev"])[0] == res.best_dev_eer

    def test_deterministic(self, corpus, teacher):
        cfg = tiny_train_cfg(aggregation="at", lambda_kl=0.4, epochs=1)
        a = train_padd(corpus["train"], corpus["dev"], cfg, TINY_MODEL, teacher)
        b = train_padd(corpus["train"], corpus["dev"], cfg, TINY_MODEL, teacher)
        assert [r["loss_total"] for r in a.log] == [r["loss_total"] for r in b.log]

    def test_lambda_zero_total_equals_ce(self, corpus, teacher):
        cfg = tiny_train_cfg(aggregation="at", lambda_kl=0.0, epochs=1)
        res = train_padd(corpus["train"], corpus["dev"], cfg, TINY_MODEL, teacher)
        for row in res.log:
            assert abs(row["loss_total"] - row["loss_ce"]) < 1e-12
            assert row["loss_kl"] > 0

    def test_at_total_combines_terms(self, corpus, teacher):
        cfg = tiny_train_cfg(aggregation="at", lambda_kl=0.7, epochs=1)
        res = train_padd(corpus["train"], corpus["dev"], cfg, TINY_MODEL, teacher)
        for row in res.log:
            assert row["loss_total"] == pytest.approx(row["loss_ce"] + 0.7 * row["loss_kl"],
                                                      abs=1e-12)

    @pytest.mark.parametrize("mode", ["af", "at"])
    def test_teacher_unchanged(self, corpus, teacher, mode):
        before = module_digest(teacher)
        rows = []
        cfg = tiny_train_cfg(aggregation=mode, lambda_kl=0.5, epochs=1)

        def sink(row):
            for p in teacher.parameters().values():
                assert p.frozen and not np.any(p.grad)
            rows.append(row)

        res = train_padd(corpus["train"], corpus["dev"], cfg, TINY_MODEL, teacher, sink)
        assert len(rows) == res.step
        assert module_digest(teacher) == before
        assert module_digest(res.model.teacher) == before

    def test_missing_lambda(self, corpus, teacher):
        with pytest.raises(ConfigError, match="lambda_kl"):
            train_padd(corpus["train"], corpus["dev"], tiny_train_cfg(aggregation="at"),
                       TINY_MODEL, teacher)

    @pytest.mark.parametrize("mode", ["af", "at"])
    def test_missing_teacher(self, corpus, mode):
        with pytest.raises(ConfigError, match="teacher"):
            train_padd(corpus["train"], corpus["dev"],
                       tiny_train_cfg(aggregation=mode, lambda_kl=0.1), TINY_MODEL)

    def test_invalid_train_config(self):
        with pytest.raises(ConfigError):
            TrainConfig(lambda_kl=-0.1)
        with pytest.raises(ConfigError):
            TrainConfig(aggregation="sum")
        with pytest.raises(ConfigError):
            TrainConfig(warmup_steps=0)


class TestPretrain:
    def test_deterministic_and_reported(self, corpus):
        cfg = PretrainConfig(epochs=1, batch_size=4)
        a = pretrain_teacher(corpus["train"], corpus["dev"], TINY_NER, cfg)
        b = pretrain_teacher(corpus["train"], corpus["dev"], TINY_NER, cfg)
        assert a.losses == b.losses and len(a.losses) == 3
        assert module_digest(a.teacher) == module_digest(b.teacher)
        assert 0.0 < a.majority_rate < 1.0
        assert 0.0 <= a.initial_accuracy <= 1.0 and 0.0 <= a.dev_accuracy <= 1.0

    def test_no_entities_rejected(self, corpus):
        bare = [replace(r, entities=[]) for r in corpus["train"]]
        with pytest.raises(DataError):
            pretrain_teacher(bare, corpus["dev"], TINY_NER, PretrainConfig(epochs=1))
