import math

import numpy as np
import pytest

from nepadd import tensor as nt
from nepadd.aggregation import TransferConfig, total_loss
from nepadd.classifier import Classifier, ClassifierConfig, bce_frame_loss
from nepadd.errors import ConfigError, ShapeError
from nepadd.gradcheck import check_gradients
from nepadd.model import ModelConfig, NEPADDModel
from nepadd.ner import NerBranchConfig
from nepadd.padd import PaddBranchConfig
from nepadd.tensor import Parameter, Tape, Tensor
from nepadd.training import Adam

SMALL_CLS = ClassifierConfig(dim=4, layers=1, heads=2, ff_dim=6, lstm_hidden=3, fc_width=6)


def small_model_config(aggregation):
    return ModelConfig(padd=PaddBranchConfig(d_in=3, hidden_channels=4, model_dim=4,
                                             residual_blocks=1),
                       ner=NerBranchConfig(d_in=3, conv_channels=4, lstm_layers=1,
                                           lstm_hidden=2),
                       classifier=SMALL_CLS, aggregation=aggregation)


class TestClassifier:
    @pytest.mark.parametrize("T", [1, 7, 50])
    def test_output_length_and_range(self, T):
        clf = Classifier(ClassifierConfig(), np.random.default_rng(0))
        p = clf(np.random.default_rng(1).normal(size=(T, 16))).data
        assert p.shape == (T,)
        assert np.all((p > 0) & (p < 1))

    def test_deterministic(self):
        clf = Classifier(SMALL_CLS, np.random.default_rng(0))
        h = np.random.default_rng(1).normal(size=(6, 4))
        assert clf(h).data.tobytes() == clf(h).data.tobytes()

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            Classifier(SMALL_CLS, np.random.default_rng(0))(np.ones((3, 5)))

    def test_config_chain(self):
        with pytest.raises(ConfigError):
            ClassifierConfig(lstm_hidden=16, fc_width=256)
        with pytest.raises(ConfigError):
            ClassifierConfig(dim=16, heads=3)

    def test_gradient_full_stack(self):
        clf = Classifier(SMALL_CLS, np.random.default_rng(2))
        h = Parameter(np.random.default_rng(3).normal(size=(4, 4)))
        y = np.array([1, 0, 1, 1])
        fn = lambda: bce_frame_loss(clf(h), y)  # noqa: E731
        assert check_gradients(fn, [h, *clf.parameters().values()]) < 1e-4

    def test_descent_on_separable_batch(self):
        rng = np.random.default_rng(4)
        clf = Classifier(SMALL_CLS, rng)
        y = (np.arange(12) % 3 != 0).astype(float)
        h = np.outer(2 * y - 1, np.ones(4)) + 0.1 * rng.normal(size=(12, 4))
        opt = Adam(clf.parameters())
        losses = []
        for _ in range(50):
            clf.zero_grad()
            with Tape():
                loss = bce_frame_loss(clf(h), y)
                nt.backward(loss)
            opt.step(1e-2)
            losses.append(loss.item())
        assert losses[-1] < losses[0]
        assert np.mean(losses[-10:]) < np.mean(losses[:10])


class TestBce:
    def test_exact_predictions(self):
        assert bce_frame_loss(Tensor([1.0, 0.0, 1.0]), [1, 0, 1]).item() <= 1.7e-7

    def test_half(self):
        assert bce_frame_loss(Tensor([0.5] * 4), [1, 0, 0, 1]).item() == \
            pytest.approx(math.log(2), abs=1e-15)

    def test_hand_example(self):
        val = bce_frame_loss(Tensor([0.9, 0.2]), [1, 0]).item()
        assert val == pytest.approx(-(math.log(0.9) + math.log(0.8)) / 2, abs=1e-15)
        assert round(val, 5) == 0.16425

    def test_spoof_weight(self):
        plain = bce_frame_loss(Tensor([0.9, 0.2]), [1, 0]).item()
        weighted = bce_frame_loss(Tensor([0.9, 0.2]), [1, 0], spoof_weight=3.0).item()
        assert weighted == pytest.approx(plain + math.log(0.8) * -2 / 2, abs=1e-15)

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            bce_frame_loss(Tensor([0.5, 0.5]), [1, 0, 1])


class TestModel:
    @pytest.mark.parametrize("mode", ["none", "af", "at"])
    def test_gradient_of_training_loss(self, mode):
        model = NEPADDModel(small_model_config(mode), np.random.default_rng(5))
        x = Tensor(np.random.default_rng(6).normal(size=(5, 3)))
        y = np.array([1, 1, 0, 0, 1])

        def fn():
            ce, kl, _ = model.losses(x, y, TransferConfig(0.3))
            return total_loss(ce, kl, 0.3)

        trainable = [p for p in model.parameters().values() if not p.frozen]
        assert check_gradients(fn, trainable) < 1e-4

    def test_teacher_detached_under_transfer(self):
        model = NEPADDModel(small_model_config("at"), np.random.default_rng(7))
        x = Tensor(np.random.default_rng(8).normal(size=(6, 3)))
        with Tape():
            ce, kl, _ = model.losses(x, np.array([1, 0, 0, 1, 1, 1]), TransferConfig(0.5))
            nt.backward(total_loss(ce, kl, 0.5))
        for p in model.teacher.parameters().values():
            assert p.frozen
            np.testing.assert_array_equal(p.grad, 0.0)
        assert np.any(model.student.attention.w_q.grad != 0)

    def test_mode_outputs(self):
        x = np.random.default_rng(9).normal(size=(4, 3))
        none = NEPADDModel(small_model_config("none"), np.random.default_rng(0))
        af = NEPADDModel(small_model_config("af"), np.random.default_rng(0))
        assert none.teacher is None and "gate" not in none(x)
        out = af(x)
        assert out["gate"].shape == (4, 1) and out["alpha_ner"].shape == (4, 4)

    def test_loss_affine_in_lambda(self):
        model = NEPADDModel(small_model_config("at"), np.random.default_rng(10))
        x = Tensor(np.random.default_rng(11).normal(size=(5, 3)))
        y = np.array([1, 0, 1, 0, 1])
        ce, kl, _ = model.losses(x, y, TransferConfig(0.0))
        vals = [total_loss(ce, kl, lam).item() for lam in (0.0, 0.4, 0.8)]
        assert vals[0] == ce.item()
        assert vals[2] - vals[1] == pytest.approx(vals[1] - vals[0], abs=1e-14)

    def test_dim_chain_checked(self):
        with pytest.raises(ConfigError):
            ModelConfig(classifier=ClassifierConfig(dim=8, heads=2))
        with pytest.raises(ConfigError):
            ModelConfig(ner=NerBranchConfig(lstm_hidden=4))
        ModelConfig(ner=NerBranchConfig(lstm_hidden=4), aggregation="none")

    def test_config_round_trip(self):
        cfg = small_model_config("af")
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg
