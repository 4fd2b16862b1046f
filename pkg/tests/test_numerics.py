import math

import numpy as np
import pytest

from errors import ContractViolation, NumericError
from numerics import (
    ADD,
    AFFINE,
    ATTENTION,
    CROSS_ENTROPY,
    EMBEDDING,
    GELU,
    LAYER_NORM,
    LN_EPS,
    SLICE,
    SOFTMAX,
    AdamWState,
    Tape,
    adamw_step,
    cross_entropy,
    grad_check,
    layer_norm,
    masked_attention,
    softmax_rows,
)


def kernel_grad_error(kernel, inputs, which, seed=0, **options):
    """Central-difference check of d sum(out * R) / d inputs[which]."""
    rng = np.random.default_rng(seed)
    out, _ = kernel.forward(*inputs, **options)
    weights = rng.standard_normal(np.shape(out))
    backward_options = {k: v for k, v in options.items() if kernel is SLICE}

    def f(x):
        args = list(inputs)
        args[which] = x
        value, saved = kernel.forward(*args, **options)
        grads = kernel.backward(weights, saved, tuple(args), **backward_options)
        return float(np.sum(value * weights)), grads[which]

    return grad_check(f, inputs[which])


class TestKernelGradients:
    """Test every kernel backward against central differences"""

    def setup_method(self):
        self.rng = np.random.default_rng(42)

    def test_affine(self):
        """Test affine gradients for x, w and b"""
        inputs = [self.rng.standard_normal((2, 3, 4)), self.rng.standard_normal((4, 5)), self.rng.standard_normal(5)]
        for which in range(3):
            assert kernel_grad_error(AFFINE, inputs, which) < 1e-4

    def test_add_and_gelu(self):
        """Test add and gelu gradients"""
        a, b = self.rng.standard_normal((3, 4)), self.rng.standard_normal((3, 4))
        assert kernel_grad_error(ADD, [a, b], 0) < 1e-4
        assert kernel_grad_error(ADD, [a, b], 1) < 1e-4
        assert kernel_grad_error(GELU, [self.rng.standard_normal((3, 5)) * 2.0], 0) < 1e-4

    def test_layer_norm(self):
        """Test layer norm gradients for input, gain and shift"""
        inputs = [self.rng.standard_normal((2, 3, 6)), self.rng.standard_normal(6), self.rng.standard_normal(6)]
        for which in range(3):
            assert kernel_grad_error(LAYER_NORM, inputs, which) < 1e-4

    def test_masked_attention(self):
        """Test attention gradients under a context/query mask"""
        mask = np.zeros((5, 5), dtype=bool)
        mask[:, :3] = True
        inputs = [self.rng.standard_normal((2, 5, 4)) for _ in range(3)]
        for which in range(3):
            assert kernel_grad_error(ATTENTION, inputs, which, mask=mask, heads=2) < 1e-4

    def test_softmax_with_inactive_columns(self):
        """Test softmax gradient when trailing logits are masked"""
        x = self.rng.standard_normal((3, 6))
        assert kernel_grad_error(SOFTMAX, [x], 0, n_active=4) < 1e-4

    def test_cross_entropy(self):
        """Test cross-entropy gradient with respect to probabilities"""
        probs = softmax_rows(self.rng.standard_normal((4, 3)))
        labels = np.array([0, 2, 1, 2])

        def f(p):
            value, saved = CROSS_ENTROPY.forward(p, labels)
            (g,) = CROSS_ENTROPY.backward(1.0, saved, (p,))
            return float(value), g

        assert grad_check(f, probs) < 1e-4

    def test_embedding_and_slice(self):
        """Test embedding gradient with repeated indices and slice gradient"""
        table = self.rng.standard_normal((4, 3))
        index = np.array([[0, 2, 2], [3, 3, 1]])
        assert kernel_grad_error(EMBEDDING, [table], 0, index=index) < 1e-4
        x = self.rng.standard_normal((2, 5, 3))
        assert kernel_grad_error(SLICE, [x], 0, start=2) < 1e-4


class TestKernelForwards:
    """Test forward semantics of the kernels"""

    def setup_method(self):
        self.rng = np.random.default_rng(7)

    def test_layer_norm_moments(self):
        """Test layer norm output has zero mean and var/(var+eps) variance"""
        x = self.rng.standard_normal((4, 16)) * 3.0 + 1.0
        out = layer_norm(x, np.ones(16), np.zeros(16))
        var = x.var(axis=-1)
        assert np.allclose(out.mean(axis=-1), 0.0, atol=1e-12)
        assert np.allclose(out.var(axis=-1), var / (var + LN_EPS), atol=1e-10)

    def test_softmax_rows(self):
        """Test rows sum to one and inactive columns are exactly zero"""
        probs = softmax_rows(self.rng.standard_normal((5, 6)), n_active=3)
        assert np.allclose(probs.sum(axis=-1), 1.0)
        assert np.all(probs[:, 3:] == 0.0)

    def test_softmax_large_logits_stay_finite(self):
        """Test softmax is stable for large logits"""
        probs = softmax_rows(np.array([[1000.0, 999.0, -1000.0]]))
        assert np.all(np.isfinite(probs))
        assert probs[0, 0] > probs[0, 1] > probs[0, 2]

    def test_uniform_cross_entropy(self):
        """Test uniform predictions cost log C"""
        probs = np.full((6, 4), 0.25)
        assert cross_entropy(probs, np.arange(6) % 4) == pytest.approx(math.log(4))

    def test_cross_entropy_rejects_bad_labels(self):
        """Test out-of-range labels are a contract violation"""
        with pytest.raises(ContractViolation):
            cross_entropy(np.full((2, 3), 1 / 3), np.array([0, 3]))

    def test_attention_ignores_masked_keys(self):
        """Test that values at masked positions cannot change the output"""
        mask = np.zeros((4, 4), dtype=bool)
        mask[:, :2] = True
        q, k, v = (self.rng.standard_normal((4, 4)) for _ in range(3))
        base = masked_attention(q, k, v, mask, heads=2)
        k2, v2 = k.copy(), v.copy()
        k2[2:] += 10.0
        v2[2:] -= 5.0
        assert np.allclose(masked_attention(q, k2, v2, mask, heads=2), base, atol=1e-12)

    def test_attention_rejects_empty_mask_row(self):
        """Test a row with nothing to attend to is refused"""
        mask = np.ones((3, 3), dtype=bool)
        mask[1] = False
        x = np.zeros((3, 4))
        with pytest.raises(ContractViolation):
            masked_attention(x, x, x, mask, heads=2)

    def test_attention_rejects_indivisible_heads(self):
        """Test width must divide by head count"""
        x = np.zeros((2, 6))
        with pytest.raises(ContractViolation):
            masked_attention(x, x, x, np.ones((2, 2), dtype=bool), heads=4)


class TestTape:
    """Test the recording tape"""

    def test_composed_backward_matches_numeric(self):
        """Test gradients through affine -> gelu -> layer norm"""
        rng = np.random.default_rng(3)
        x = rng.standard_normal((3, 4))
        b = rng.standard_normal(5)
        gain, shift = rng.standard_normal(5), rng.standard_normal(5)
        weights = rng.standard_normal((3, 5))

        def f(w):
            tape = Tape()
            wv = tape.param(w)
            h = tape.apply(AFFINE, tape.constant(x), wv, tape.constant(b))
            h = tape.apply(GELU, h)
            h = tape.apply(LAYER_NORM, h, tape.constant(gain), tape.constant(shift))
            tape.backward(h, weights)
            return float(np.sum(h.value * weights)), wv.grad

        assert grad_check(f, rng.standard_normal((4, 5))) < 1e-4

    def test_non_finite_output_raises(self):
        """Test NaN produced by a kernel is reported as a numeric error"""
        tape = Tape()
        with pytest.raises(NumericError):
            tape.apply(ADD, tape.constant(np.array([np.inf])), tape.constant(np.array([-np.inf])))

    def test_inference_tape_records_nothing(self):
        """Test record=False keeps no nodes"""
        tape = Tape(record=False)
        w = tape.param(np.ones((2, 2)))
        tape.apply(AFFINE, tape.constant(np.ones((1, 2))), w, tape.constant(np.zeros(2)))
        assert tape.nodes == []


class TestAdamW:
    """Test the optimizer"""

    def test_first_step_value(self):
        """Test one step: bias-corrected Adam move plus decoupled decay on the old value"""
        params = {"p": np.array([1.0])}
        state = AdamWState.create(params, lr=0.1, weight_decay=0.01)
        updated = adamw_step(state, params, {"p": np.array([0.5])})
        expected = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8) - 0.1 * 0.01 * 1.0
        assert updated["p"][0] == pytest.approx(expected, abs=1e-12)
        assert state.step == 1
        assert params["p"][0] == 1.0

    def test_zero_gradient_only_decays(self):
        """Test that a zero gradient leaves only weight decay"""
        params = {"p": np.array([2.0, -4.0])}
        state = AdamWState.create(params, lr=0.01, weight_decay=0.1)
        updated = adamw_step(state, params, {"p": np.zeros(2)})
        assert np.allclose(updated["p"], params["p"] * (1.0 - 0.01 * 0.1))

    def test_non_finite_gradient_leaves_state_untouched(self):
        """Test a NaN gradient aborts before any moment update"""
        params = {"a": np.ones(2), "b": np.ones(2)}
        state = AdamWState.create(params, lr=0.01, weight_decay=0.0)
        with pytest.raises(NumericError):
            adamw_step(state, params, {"a": np.ones(2), "b": np.array([np.nan, 1.0])})
        assert state.step == 0
        assert np.all(state.exp_avg["a"] == 0.0)

    def test_invalid_lr(self):
        """Test non-positive learning rate is rejected"""
        with pytest.raises(ContractViolation):
            AdamWState.create({"p": np.ones(1)}, lr=0.0, weight_decay=0.0)

    def test_minimizes_quadratic(self):
        """Test repeated steps approach the minimum of a convex bowl"""
        params = {"p": np.array([3.0, -2.0])}
        state = AdamWState.create(params, lr=0.05, weight_decay=0.0)
        for _ in range(1000):
            params = adamw_step(state, params, {"p": 2.0 * params["p"]})
        assert np.all(np.abs(params["p"]) < 0.1)
