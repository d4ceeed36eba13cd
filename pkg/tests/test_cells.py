import math

import numpy as np
import pytest

from setseq import autodiff as ad
from setseq import cells
from setseq.autodiff import ShapeError, Tape, finite_diff_check_params, param, tensor
from setseq.cells import (
    AffineParams,
    AdditiveScorer,
    DotScorer,
    LstmParams,
    LstmState,
    affine_softmax,
    lstm_step,
    mlp_embed,
    zero_state,
)


def test_lstm_zero_params_zero_state_gives_zero_hidden():
    p = LstmParams.zeros(3, 4)
    out = lstm_step(p, zero_state(4), tensor(np.array([1.0, -2.0, 0.5])))
    np.testing.assert_array_equal(out.hidden.data, np.zeros(4))
    np.testing.assert_array_equal(out.cell.data, np.zeros(4))


def test_lstm_zero_params_cell_decay_matches_hand_unroll():
    # With all-zero parameters every gate is sigmoid(0)=0.5 and the candidate
    # is tanh(0)=0, so the cell halves each step and the hidden follows.
    rng = np.random.default_rng(0)
    c0 = rng.standard_normal(4)
    p = LstmParams.zeros(0, 4)
    state = LstmState(tensor(rng.standard_normal(4)), tensor(c0))

    expect_c = c0.copy()
    for _ in range(3):
        state = lstm_step(p, state)
        expect_c = 0.5 * expect_c
        np.testing.assert_allclose(state.cell.data, expect_c, atol=1e-15)
        np.testing.assert_allclose(state.hidden.data, 0.5 * np.tanh(expect_c), atol=1e-15)


def test_lstm_no_input_step_is_finite_and_grad_checks():
    rng = np.random.default_rng(1)
    p = LstmParams.init(0, 3, rng)
    h0 = rng.standard_normal(3)
    c0 = rng.standard_normal(3)

    def f():
        out = lstm_step(p, LstmState(tensor(h0), tensor(c0)))
        return ad.sum_reduce(ad.mul(out.hidden, out.hidden))

    assert np.isfinite(f().item())
    assert finite_diff_check_params(f, p.tensors("lstm")) < 1e-4


def test_lstm_input_presence_contract():
    p = LstmParams.init(2, 3, np.random.default_rng(2))
    with pytest.raises(ShapeError):
        lstm_step(p, zero_state(3))
    with pytest.raises(ShapeError):
        lstm_step(p, zero_state(3), tensor(np.zeros(5)))
    p0 = LstmParams.init(0, 3, np.random.default_rng(2))
    with pytest.raises(ShapeError):
        lstm_step(p0, zero_state(3), tensor(np.zeros(2)))


def test_lstm_hidden_bounded():
    rng = np.random.default_rng(3)
    p = LstmParams.init(2, 5, rng)
    state = zero_state(5)
    for _ in range(10):
        state = lstm_step(p, state, tensor(rng.standard_normal(2) * 3.0))
        assert np.all(np.abs(state.hidden.data) < 1.0)


def test_lstm_step_batched_matches_per_example():
    rng = np.random.default_rng(4)
    p = LstmParams.init(2, 3, rng)
    xs = rng.standard_normal((4, 2))
    hs = rng.standard_normal((4, 3))
    cs = rng.standard_normal((4, 3))
    batched = lstm_step(p, LstmState(tensor(hs), tensor(cs)), tensor(xs))
    for i in range(4):
        single = lstm_step(p, LstmState(tensor(hs[i]), tensor(cs[i])), tensor(xs[i]))
        np.testing.assert_allclose(batched.hidden.data[i], single.hidden.data, atol=1e-14)


def test_mlp_single_identity_layer_is_tanh():
    p = cells.MlpParams(sizes=(3, 3))
    p.weights = [param(np.eye(3))]
    p.biases = [param(np.zeros(3))]
    x = np.array([0.3, -1.2, 0.0])
    np.testing.assert_allclose(mlp_embed(p, tensor(x)).data, np.tanh(x), atol=1e-15)


def test_mlp_weight_sharing_equal_inputs_equal_outputs():
    p = cells.MlpParams.init((2, 8, 4), np.random.default_rng(5))
    x = tensor(np.array([0.5, -0.5]))
    a = mlp_embed(p, x).data
    b = mlp_embed(p, tensor(np.array([0.5, -0.5]))).data
    assert np.array_equal(a, b)


def test_mlp_gradient_check():
    rng = np.random.default_rng(6)
    p = cells.MlpParams.init((2, 4, 3), rng)
    x = rng.standard_normal(2)

    def f():
        out = mlp_embed(p, tensor(x))
        return ad.sum_reduce(ad.mul(out, out))

    assert finite_diff_check_params(f, p.tensors("mlp")) < 1e-4


def test_dot_score_orthogonal_and_self():
    s = DotScorer()
    assert s.score(tensor(np.array([1.0, 0.0])), tensor(np.array([0.0, 1.0]))).item() == 0.0
    m = np.array([0.3, -2.0, 1.5])
    assert abs(s.score(tensor(m), tensor(m)).item() - np.dot(m, m)) < 1e-15


def test_dot_score_symmetric():
    rng = np.random.default_rng(7)
    s = DotScorer()
    for _ in range(5):
        m, q = rng.standard_normal(4), rng.standard_normal(4)
        assert s.score(tensor(m), tensor(q)).item() == s.score(tensor(q), tensor(m)).item()


def test_additive_score_matches_hand_composition():
    rng = np.random.default_rng(8)
    s = AdditiveScorer.init(3, 5, 4, rng)
    m = rng.standard_normal(3)
    q = rng.standard_normal(5)
    got = s.score(tensor(m), tensor(q)).item()
    want = float(np.dot(np.tanh(m @ s.w_mem.data + q @ s.w_query.data), s.v.data))
    assert abs(got - want) < 1e-14


def test_score_batch_matches_vector_scores():
    rng = np.random.default_rng(9)
    mems = rng.standard_normal((2, 6, 4))
    q = rng.standard_normal((2, 4))
    for scorer in (DotScorer(), AdditiveScorer.init(4, 4, 3, rng)):
        batch = scorer.score_batch(tensor(mems), tensor(q)).data
        for b in range(2):
            for i in range(6):
                single = scorer.score(tensor(mems[b, i]), tensor(q[b])).item()
                assert abs(batch[b, i] - single) < 1e-13


def test_affine_softmax_zero_params_uniform():
    p = AffineParams(param(np.zeros((4, 5))), param(np.zeros(5)))
    out = affine_softmax(p, tensor(np.random.default_rng(10).standard_normal(4)))
    np.testing.assert_allclose(out.data, np.full(5, 0.2), atol=1e-15)


def test_affine_softmax_log_bias_closed_form():
    p = AffineParams(param(np.zeros((3, 2))), param(np.array([math.log(1.0), math.log(3.0)])))
    out = affine_softmax(p, tensor(np.ones(3)))
    np.testing.assert_allclose(out.data, [0.25, 0.75], atol=1e-15)


def test_affine_softmax_normalized_and_grad_checks():
    rng = np.random.default_rng(11)
    p = AffineParams.init(3, 4, rng)
    x = rng.standard_normal(3)
    out = affine_softmax(p, tensor(x))
    assert abs(out.data.sum() - 1.0) < 1e-12

    def f():
        probs = affine_softmax(p, tensor(x))
        return ad.sum_reduce(ad.mul(probs, probs))

    assert finite_diff_check_params(f, p.tensors("head")) < 1e-4


def test_affine_softmax_shift_invariance():
    rng = np.random.default_rng(12)
    p = AffineParams.init(3, 4, rng)
    x = rng.standard_normal(3)
    base = affine_softmax(p, tensor(x)).data
    shifted = cells.AffineParams(p.w, param(p.b.data + 123.456))
    out = affine_softmax(shifted, tensor(x)).data
    np.testing.assert_allclose(out, base, atol=1e-12)


def test_lstm_step_nll_finite_difference():
    # Full cell + head composition against central differences.
    rng = np.random.default_rng(13)
    p = LstmParams.init(2, 4, rng)
    head = AffineParams.init(4, 3, rng)
    x = rng.standard_normal(2)
    target = np.array([1])

    def f():
        out = lstm_step(p, zero_state(4), tensor(x))
        logp = cells.affine_log_softmax(head, ad.reshape(out.hidden, (1, 4)))
        return ad.scale(ad.sum_reduce(ad.pick(logp, target)), -1.0)

    err = finite_diff_check_params(f, {**p.tensors("lstm"), **head.tensors("head")})
    assert err < 1e-4
