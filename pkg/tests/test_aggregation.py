import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nepadd import tensor as nt
from nepadd.aggregation import (FusionGate, TransferConfig, attention_fusion,
                                attention_transfer_loss, resample_attention, total_loss)
from nepadd.errors import ConfigError, ContractError, NumericAbort, ShapeError
from nepadd.gradcheck import check_gradients
from nepadd.tensor import Parameter, Tape, Tensor


def random_stochastic(rng, T, sharp=1.0):
    logits = rng.normal(size=(T, T)) * sharp
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def kl_oracle(p, q, eps=1e-10):
    """Row-mean KL(p || q) summed at 50 significant digits."""
    with mpmath.workdps(50):
        total = mpmath.mpf(0)
        for i in range(p.shape[0]):
            for j in range(p.shape[1]):
                pij = mpmath.mpf(float(p[i, j]))
                if pij > 0:
                    total += pij * mpmath.log(pij / max(mpmath.mpf(float(q[i, j])), eps))
        return float(total / p.shape[0])


def _gate(dim, bias, mode="per-frame-scalar"):
    g = FusionGate(dim, np.random.default_rng(0), mode)
    g.w_g.data[...] = 0.0
    g.b_g.data[...] = bias
    return g


class TestFusion:
    def test_gate_open_selects_student(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        fused, g = attention_fusion(Tensor(a), Tensor(b), _gate(3, 50.0))
        np.testing.assert_allclose(fused.data, a, atol=1e-12, rtol=0)

    def test_gate_closed_selects_teacher(self):
        rng = np.random.default_rng(2)
        a, b = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        fused, _ = attention_fusion(Tensor(a), Tensor(b), _gate(3, -50.0))
        np.testing.assert_allclose(fused.data, b, atol=1e-12, rtol=0)

    def test_half_gate(self):
        fused, g = attention_fusion(Tensor([[2.0, 4.0]]), Tensor([[0.0, 0.0]]), _gate(2, 0.0))
        np.testing.assert_array_equal(g.data, [[0.5]])
        np.testing.assert_array_equal(fused.data, [[1.0, 2.0]])

    def test_gate_shapes_by_mode(self):
        x = Tensor(np.ones((5, 4)))
        assert FusionGate(4, np.random.default_rng(0))(x, x)[1].shape == (5, 1)
        assert FusionGate(4, np.random.default_rng(0), "per-dimension")(x, x)[1].shape == (5, 4)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            attention_fusion(Tensor(np.ones((3, 2))), Tensor(np.ones((4, 2))), _gate(2, 0.0))

    def test_unknown_mode(self):
        with pytest.raises(ConfigError):
            FusionGate(2, np.random.default_rng(0), "per-head")

    @pytest.mark.parametrize("mode", ["per-frame-scalar", "per-dimension"])
    def test_gradient(self, mode):
        rng = np.random.default_rng(3)
        gate = FusionGate(3, rng, mode)
        a, b = Parameter(rng.normal(size=(4, 3))), Parameter(rng.normal(size=(4, 3)))
        w = Tensor(rng.normal(size=(4, 3)))
        fn = lambda: nt.sum(gate(a, b)[0] * w)  # noqa: E731
        assert check_gradients(fn, [a, b, gate.w_g, gate.b_g]) < 1e-4

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.sampled_from(["per-frame-scalar", "per-dimension"]))
    def test_convexity(self, seed, mode):
        rng = np.random.default_rng(seed)
        T, D = rng.integers(1, 9, size=2)
        gate = FusionGate(int(D), rng, mode)
        gate.w_g.data *= rng.uniform(0, 20)
        a, b = rng.normal(size=(T, D)) * 3, rng.normal(size=(T, D)) * 3
        fused, g = gate(Tensor(a), Tensor(b))
        assert np.all((g.data >= 0) & (g.data <= 1))
        lo, hi = np.minimum(a, b), np.maximum(a, b)
        assert np.all(fused.data >= lo - 1e-12) and np.all(fused.data <= hi + 1e-12)


class TestTransferLoss:
    def test_worked_pair(self):
        p, q = np.array([[0.5, 0.5]]), np.array([[0.9, 0.1]])
        forward = attention_transfer_loss(p, q).item()
        backward = attention_transfer_loss(q, p).item()
        assert forward == pytest.approx(0.5 * math.log(0.5 / 0.9) + 0.5 * math.log(0.5 / 0.1),
                                        abs=1e-14)
        # 0.9 ln 1.8 + 0.1 ln 0.2 = 0.368064..., so the swapped pair rounds to 0.36806
        assert round(forward, 5) == 0.51083 and round(backward, 5) == 0.36806
        assert abs(forward - kl_oracle(p, q)) < 1e-12
        assert abs(backward - kl_oracle(q, p)) < 1e-12

    def test_equal_maps(self):
        p = random_stochastic(np.random.default_rng(0), 7)
        assert abs(attention_transfer_loss(p, p).item()) < 1e-12

    def test_matches_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(25):
            T = int(rng.integers(1, 17))
            p, q = random_stochastic(rng, T, 2.0), random_stochastic(rng, T, 2.0)
            assert abs(attention_transfer_loss(p, q).item() - kl_oracle(p, q)) < 1e-10

    def test_zero_teacher_entries(self):
        p = np.array([[1.0, 0.0], [0.25, 0.75]])
        q = np.array([[0.5, 0.5], [0.5, 0.5]])
        assert attention_transfer_loss(p, q).item() == pytest.approx(kl_oracle(p, q), abs=1e-14)

    def test_clamp_prevents_infinity(self):
        p = np.array([[0.5, 0.5]])
        q = np.array([[1.0, 0.0]])
        val = attention_transfer_loss(p, q).item()
        assert math.isfinite(val)
        assert val == pytest.approx(kl_oracle(p, q), rel=1e-12)

    def test_pooled_column_mean(self):
        rng = np.random.default_rng(2)
        p, q = random_stochastic(rng, 5), random_stochastic(rng, 5)
        cfg = TransferConfig(row_reduction="pooled-column-mean")
        pc, qc = p.mean(axis=0, keepdims=True), q.mean(axis=0, keepdims=True)
        assert attention_transfer_loss(p, q, cfg).item() == pytest.approx(kl_oracle(pc, qc),
                                                                          abs=1e-12)

    def test_non_stochastic_rejected(self):
        p = np.array([[0.5, 0.5], [0.4, 0.5]])
        with pytest.raises(ContractError):
            attention_transfer_loss(p, np.full((2, 2), 0.5))
        with pytest.raises(ContractError):
            attention_transfer_loss(np.full((2, 2), 0.5), p)

    def test_bad_config(self):
        with pytest.raises(ConfigError):
            TransferConfig(epsilon_clamp=0.0)
        with pytest.raises(ConfigError):
            TransferConfig(row_reduction="sum")

    @pytest.mark.parametrize("reduction", ["mean-over-query-rows", "pooled-column-mean"])
    def test_gradient_wrt_student_logits(self, reduction):
        rng = np.random.default_rng(3)
        p = random_stochastic(rng, 4)
        logits = Parameter(rng.normal(size=(4, 4)))
        cfg = TransferConfig(row_reduction=reduction)
        fn = lambda: attention_transfer_loss(p, nt.softmax_rows(logits), cfg)  # noqa: E731
        assert check_gradients(fn, [logits]) < 1e-4

    def test_teacher_map_receives_no_gradient(self):
        rng = np.random.default_rng(4)
        teacher = Parameter(random_stochastic(rng, 3))
        student = Parameter(rng.normal(size=(3, 3)))
        with Tape():
            nt.backward(attention_transfer_loss(teacher, nt.softmax_rows(student)))
        np.testing.assert_array_equal(teacher.grad, 0.0)
        assert np.any(student.grad != 0)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_nonnegative_and_zero_iff_equal(self, seed):
        rng = np.random.default_rng(seed)
        T = int(rng.integers(1, 10))
        p, q = random_stochastic(rng, T, 3.0), random_stochastic(rng, T, 3.0)
        kl = attention_transfer_loss(p, q).item()
        assert kl >= -1e-12
        if kl < 1e-10:
            assert np.max(np.abs(p - q)) < 1e-4


class TestTotalLoss:
    def test_lambda_zero(self):
        ce = Tensor(0.7)
        assert total_loss(ce, Tensor(5.0), 0.0).item() == 0.7

    def test_arithmetic(self):
        assert total_loss(Tensor(1.0), Tensor(2.0), 0.3).item() == pytest.approx(1.6, abs=1e-15)

    def test_no_transfer_term(self):
        ce = Tensor(0.4)
        assert total_loss(ce, None, 0.5) is ce

    def test_nan_aborts(self):
        with pytest.raises(NumericAbort):
            total_loss(Tensor(float("nan")), Tensor(1.0), 0.1)
        with pytest.raises(NumericAbort):
            total_loss(Tensor(1.0), Tensor(float("inf")), 0.1)

    def test_negative_lambda(self):
        with pytest.raises(ContractError):
            total_loss(Tensor(1.0), Tensor(1.0), -0.1)

    def test_affine_in_lambda(self):
        ce, kl = Tensor(0.8), Tensor(0.25)
        vals = [total_loss(ce, kl, lam).item() for lam in (0.0, 0.5, 1.0)]
        assert vals[1] - vals[0] == pytest.approx(vals[2] - vals[1], abs=1e-15)


class TestResample:
    def test_identity_and_stochastic(self):
        a = random_stochastic(np.random.default_rng(5), 6)
        np.testing.assert_array_equal(resample_attention(a, 6), a)
        out = resample_attention(a, 9)
        assert out.shape == (9, 9)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)
