import numpy as np
import pytest

from blockfuse.autodiff import (
    MaskState,
    backward,
    extract_params,
    forward_masked,
    topk_binarize,
)
from blockfuse.core import Tensor
from blockfuse.errors import GraphError
from blockfuse.fixtures import toy_irb
from blockfuse.graph import execute_graph


class FractionalMask(MaskState):
    """Test-only mask whose gates equal the raw scores, so the gated forward
    pass becomes differentiable in m and finite differences apply directly."""

    @property
    def m_hat(self):
        return self.m


def _scalar_loss_setup(seed=0, n_blocks=2, channels=6, image=6):
    graph = toy_irb(n_blocks, channels=channels, image_size=image, seed=seed)
    params = extract_params(graph)
    rng = np.random.Generator(np.random.PCG64(seed + 100))
    # nonzero shifts move every pre-activation off the kink points
    for name in list(params):
        if name.endswith(".beta"):
            params[name] = params[name] + 0.05 + 0.1 * rng.random(params[name].shape)
    x = rng.standard_normal((2, 3, image, image))
    lw = rng.standard_normal((2, 2, 1, 1))  # fixed loss weights over the logits
    return graph, params, x, lw


def _loss(graph, params, state, x, lw):
    out, tape = forward_masked(graph, params, state, x)
    return float(np.sum(out * lw)), tape


class TestTopkBinarize:
    def test_keeps_k_largest(self):
        np.testing.assert_array_equal(topk_binarize([0.1, 0.9, 0.5, 0.7], 2),
                                      [0, 1, 0, 1])

    def test_ties_go_to_lower_index(self):
        np.testing.assert_array_equal(topk_binarize([0.5, 0.5, 0.5], 2),
                                      [1, 1, 0])

    def test_edge_budgets(self):
        np.testing.assert_array_equal(topk_binarize([1.0, 2.0], 0), [0, 0])
        np.testing.assert_array_equal(topk_binarize([1.0, 2.0], 5), [1, 1])
        with pytest.raises(ValueError):
            topk_binarize([1.0], -1)

    def test_budget_invariant_property(self):
        rng = np.random.Generator(np.random.PCG64(9))
        for _ in range(50):
            m = rng.standard_normal(7)
            k = int(rng.integers(0, 8))
            assert topk_binarize(m, k).sum() == k


class TestMaskState:
    def test_validation(self):
        with pytest.raises(ValueError):
            MaskState(np.ones(3), 1, np.ones(2))
        with pytest.raises(ValueError):
            MaskState(np.ones(2), 1, np.array([1.0, -1.0]))

    def test_fresh(self):
        state = MaskState.fresh(4, 2)
        assert state.m_hat.sum() == 2
        np.testing.assert_array_equal(state.lam, np.ones(4))


class TestForwardMasked:
    def test_all_ones_mask_matches_plain_execution(self):
        graph = toy_irb(2, seed=1)
        params = extract_params(graph)
        rng = np.random.Generator(np.random.PCG64(0))
        x = rng.standard_normal((1, 3, 8, 8))
        out, _ = forward_masked(graph, params, MaskState.fresh(2, 2), x)
        want = execute_graph(graph, Tensor.of(x)).data
        assert np.max(np.abs(out - want.reshape(out.shape))) <= 1e-12

    def test_zero_gate_bypasses_activation(self):
        graph = toy_irb(1, seed=1)
        params = extract_params(graph)
        rng = np.random.Generator(np.random.PCG64(0))
        x = rng.standard_normal((1, 3, 8, 8))
        masked_out, _ = forward_masked(graph, params, MaskState.fresh(1, 0), x)
        from blockfuse.graph import apply_mask_vector
        linear = apply_mask_vector(graph, [0])
        want = execute_graph(linear, Tensor.of(x)).data
        assert np.max(np.abs(masked_out - want.reshape(masked_out.shape))) <= 1e-12

    def test_mask_length_check(self):
        graph = toy_irb(2, seed=1)
        with pytest.raises(GraphError):
            forward_masked(graph, extract_params(graph), MaskState.fresh(3, 1),
                           np.zeros((1, 3, 8, 8)))


class TestParameterGradients:
    def test_finite_difference_agreement(self):
        graph, params, x, lw = _scalar_loss_setup()
        _, tape = _loss(graph, params, None, x, lw)
        pgrads, _ = backward(tape, lw * np.ones_like(tape.entries[-1].output), params)
        h = 1e-6
        rng = np.random.Generator(np.random.PCG64(3))
        for name, grad in pgrads.items():
            flat_idx = rng.integers(0, grad.size, size=min(4, grad.size))
            for i in flat_idx:
                idx = np.unravel_index(int(i), grad.shape)
                p = {k: v.copy() for k, v in params.items()}
                p[name][idx] += h
                up, _ = _loss(graph, p, None, x, lw)
                p[name][idx] -= 2 * h
                down, _ = _loss(graph, p, None, x, lw)
                fd = (up - down) / (2 * h)
                a = float(grad[idx])
                assert abs(a - fd) <= 1e-5 * max(abs(a), abs(fd), 1e-4), \
                    f"{name}{idx}: analytic {a} vs fd {fd}"

    def test_gradients_accumulate_over_residual_paths(self):
        # the stem output feeds both the block chain and the skip Add
        graph, params, x, lw = _scalar_loss_setup(n_blocks=1)
        _, tape = _loss(graph, params, None, x, lw)
        pgrads, _ = backward(tape, lw * np.ones_like(tape.entries[-1].output), params)
        assert "stem_conv.weight" in pgrads
        assert np.all(np.isfinite(pgrads["stem_conv.weight"]))


class TestMaskGradients:
    def test_mask_gradient_matches_finite_differences(self):
        graph, params, x, lw = _scalar_loss_setup(n_blocks=3)
        state = FractionalMask(np.array([0.8, 0.4, 0.6]), 3, np.ones(3))
        _, tape = _loss(graph, params, state, x, lw)
        _, m_grad = backward(tape, lw * np.ones_like(tape.entries[-1].output), params)
        h = 1e-6
        for b in range(3):
            m = state.m.copy()
            m[b] += h
            up, _ = _loss(graph, params, FractionalMask(m, 3, np.ones(3)), x, lw)
            m[b] -= 2 * h
            down, _ = _loss(graph, params, FractionalMask(m, 3, np.ones(3)), x, lw)
            fd = (up - down) / (2 * h)
            assert abs(m_grad[b] - fd) <= 1e-5 * max(abs(fd), 1e-4)

    def test_straight_through_identity(self):
        # the gradient reported for the binary mask equals the gradient of a
        # continuous gate evaluated at the same (binary) gate values, exactly
        graph, params, x, lw = _scalar_loss_setup(n_blocks=2)
        binary = MaskState(np.array([2.0, 1.0]), 1, np.ones(2))
        _, tape_b = _loss(graph, params, binary, x, lw)
        _, grad_binary = backward(tape_b, lw * np.ones_like(tape_b.entries[-1].output),
                                  params)
        frac = FractionalMask(binary.m_hat.copy(), 1, np.ones(2))
        _, tape_f = _loss(graph, params, frac, x, lw)
        _, grad_frac = backward(tape_f, lw * np.ones_like(tape_f.entries[-1].output),
                                params)
        np.testing.assert_array_equal(grad_binary, grad_frac)

    def test_shared_slot_accumulates_both_activations(self):
        # both activations of one block write into a single mask slot
        graph, params, x, lw = _scalar_loss_setup(n_blocks=1)
        state = FractionalMask(np.array([0.5]), 1, np.ones(1))
        _, tape = _loss(graph, params, state, x, lw)
        gated = [e for e in tape.entries if e.slot is not None]
        assert len(gated) == 2
        assert {e.slot for e in gated} == {0}
