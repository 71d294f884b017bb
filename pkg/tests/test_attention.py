import numpy as np
import pytest
from hypothesis import given, strategies as st

from scenetext import ops
from scenetext.attention import (AttnDecoder, DecodeLengthError, attend, attn_greedy_decode,
                                 attn_loss)
from scenetext.gradcheck import check
from scenetext.optim import Adadelta
from scenetext.tensor import Tape, Tensor

N = 4  # character classes; vocabulary is N + 3


def _decoder(rng, **kw):
    return AttnDecoder(N, 6, 5, 7, 3, rng, **kw)


def _softmax(x):
    e = np.exp(x - x.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def _sig(x):
    return 1 / (1 + np.exp(-x))


def test_single_position_attends_fully(rng):
    dec = _decoder(rng)
    H = rng.normal(size=(2, 1, 6))
    rec = attend(Tensor(rng.normal(size=(2, 5))), Tensor(H), dec)
    np.testing.assert_array_equal(rec.alpha.data, 1.0)
    np.testing.assert_allclose(rec.context.data, H[:, 0], atol=1e-15)


def test_zero_scoring_vector_gives_uniform_weights(rng):
    dec = _decoder(rng)
    dec.v.data[...] = 0.0
    H = rng.normal(size=(1, 5, 6))
    rec = attend(Tensor(rng.normal(size=(1, 5))), Tensor(H), dec)
    np.testing.assert_allclose(rec.alpha.data, 0.2, atol=1e-15)
    np.testing.assert_allclose(rec.context.data, H.mean(1), atol=1e-12)


def _direct_attend(dec, s, H):
    e = np.tanh(s @ dec.w_state.data + H @ dec.w_context.data + dec.attn_bias.data) @ dec.v.data[:, 0]
    alpha = _softmax(e)
    return alpha, alpha @ H


def test_attend_matches_direct_formula(rng):
    dec = _decoder(rng)
    dec.attn_bias.data[...] = rng.normal(size=7)
    s, H = rng.normal(size=(1, 5)), rng.normal(size=(1, 5, 6))
    rec = attend(Tensor(s), Tensor(H), dec)
    alpha, ctx = _direct_attend(dec, s[0], H[0])
    np.testing.assert_allclose(rec.alpha.data[0], alpha, rtol=0, atol=1e-12)
    np.testing.assert_allclose(rec.context.data[0], ctx, rtol=0, atol=1e-12)
    err = check(lambda s, H: attend(s, H, dec).context, [s, H], params=dec.parameters())
    assert err <= 1e-5


@given(st.integers(0, 2 ** 31 - 1))
def test_attention_weights_are_a_distribution_and_equivariant(seed):
    r = np.random.default_rng(seed)
    dec = _decoder(r)
    s, H = r.normal(size=(1, 5)), r.normal(size=(1, 6, 6))
    perm = r.permutation(6)
    rec = attend(Tensor(s), Tensor(H), dec)
    prec = attend(Tensor(s), Tensor(H[:, perm]), dec)
    assert np.all(rec.alpha.data >= 0)
    assert abs(rec.alpha.data.sum() - 1) <= 1e-6
    np.testing.assert_allclose(prec.alpha.data, rec.alpha.data[:, perm], atol=1e-12)
    np.testing.assert_allclose(prec.context.data, rec.context.data, atol=1e-12)


def test_empty_context_rejected(rng):
    with pytest.raises(ValueError):
        attend(Tensor(np.zeros((1, 5))), Tensor(np.zeros((1, 0, 6))), _decoder(rng))


def test_step_distribution_sums_to_one_and_masks(rng):
    dec = _decoder(rng)
    logp, state, _ = dec.decode_step(dec.initial_state(3, np.float64), Tensor(rng.normal(size=(3, 4, 6))))
    p = np.exp(logp.data)
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-6)
    assert np.all(p[:, dec.blank] == 0) and np.all(p[:, dec.sos] == 0)
    assert state.step == 1


def test_zero_weights_uniform_over_allowed(rng):
    dec = _decoder(rng)
    for p in dec.parameters():
        p.data[...] = 0.0
    logp, _, _ = dec.decode_step(dec.initial_state(1, np.float64), Tensor(rng.normal(size=(1, 4, 6))))
    p = np.exp(logp.data[0])
    allowed = [i for i in range(N + 3) if i not in (dec.blank, dec.sos)]
    np.testing.assert_allclose(p[allowed], 1 / dec.allowed, atol=1e-15)


def test_two_teacher_forced_steps_match_hand_computation(rng):
    dec = _decoder(rng)
    H = rng.normal(size=(1, 4, 6))
    hd = 5
    h, c, prev = np.zeros(hd), np.zeros(hd), dec.sos
    ref = []
    for forced in (2, None):
        alpha, ctx = _direct_attend(dec, h, H[0])
        x = np.concatenate([dec.embed.data[prev], ctx])
        z = x @ dec.w_ih.data + dec.lstm_bias.data + h @ dec.w_hh.data
        i, f, u, o = _sig(z[:hd]), _sig(z[hd:2 * hd]), np.tanh(z[2 * hd:3 * hd]), _sig(z[3 * hd:])
        c = f * c + i * u
        h = o * np.tanh(c)
        logits = h @ dec.w_out.data + dec.b_out.data
        logits[[dec.blank, dec.sos]] = -np.inf
        ref.append(_softmax(logits))
        prev = forced
    state = dec.initial_state(1, np.float64)
    keys = dec.project_context(Tensor(H))
    logp1, state, _ = dec.decode_step(state, Tensor(H), keys)
    state.prev_symbol = np.array([2])
    logp2, state, _ = dec.decode_step(state, Tensor(H), keys)
    np.testing.assert_allclose(np.exp(logp1.data[0]), ref[0], atol=1e-12)
    np.testing.assert_allclose(np.exp(logp2.data[0]), ref[1], atol=1e-12)


def test_step_cap(rng):
    dec = _decoder(rng, max_steps=2)
    state = dec.initial_state(1, np.float64)
    H = Tensor(rng.normal(size=(1, 3, 6)))
    for _ in range(2):
        _, state, _ = dec.decode_step(state, H)
    with pytest.raises(DecodeLengthError):
        dec.decode_step(state, H)
    with pytest.raises(DecodeLengthError):
        attn_loss(H, [[0, 1]], dec)


def test_loss_rejects_control_symbols(rng):
    dec = _decoder(rng)
    H = Tensor(rng.normal(size=(1, 3, 6)))
    for bad in (dec.blank, dec.sos, dec.eos):
        with pytest.raises(ValueError):
            attn_loss(H, [[0, bad]], dec)


def test_perfect_predictions_give_zero_loss(rng):
    dec = _decoder(rng)
    for p in dec.parameters():
        p.data[...] = 0.0
    # with zero weights the logits are the output bias; make EOS certain
    dec.b_out.data[dec.eos] = 1e3
    H = Tensor(rng.normal(size=(1, 3, 6)))
    assert float(attn_loss(H, [[]], dec).data) == pytest.approx(0.0, abs=1e-12)


def test_uniform_predictions_give_log_vocab(rng):
    dec = _decoder(rng)
    for p in dec.parameters():
        p.data[...] = 0.0
    H = Tensor(rng.normal(size=(2, 3, 6)))
    loss = float(attn_loss(H, [[0, 1, 2], [3]], dec).data)
    assert loss == pytest.approx(np.log(dec.allowed), abs=1e-12)


def test_loss_gradient(rng):
    dec = _decoder(rng)
    err = check(lambda H: attn_loss(H, [[0, 2], [1, 1, 3]], dec), [rng.normal(size=(2, 4, 6))],
                params=dec.parameters())
    assert err <= 1e-5


def test_eos_first_gives_empty_sequence(rng):
    dec = _decoder(rng)
    dec.w_out.data[...] = 0.0
    dec.b_out.data[...] = 0.0
    dec.b_out.data[dec.eos] = 5.0
    assert attn_greedy_decode(Tensor(rng.normal(size=(2, 3, 6))), dec) == [[], []]


def test_decode_respects_cap(rng):
    dec = _decoder(rng, max_steps=3)
    dec.w_out.data[...] = 0.0
    dec.b_out.data[...] = 0.0
    dec.b_out.data[1] = 5.0  # never emits EOS
    out = attn_greedy_decode(Tensor(rng.normal(size=(2, 3, 6))), dec)
    assert out == [[1, 1, 1], [1, 1, 1]]


def test_memorizes_single_sample_and_decodes_it():
    rng = np.random.default_rng(0)
    dec = AttnDecoder(N, 6, 16, 16, 8, rng)
    H = Tensor(rng.normal(size=(1, 5, 6)))
    target = [2, 0, 3]
    opt = Adadelta(dec.parameters())
    loss = None
    for _ in range(500):
        with Tape() as tape:
            loss = attn_loss(H, [target], dec)
        tape.backward(loss)
        opt.step(1.0)
        opt.zero_grad()
        if float(loss.data) < 0.01:
            break
    assert float(loss.data) < 0.01
    # once every teacher-forced argmax matches, free-running decode reproduces the target
    assert attn_greedy_decode(H, dec) == [target]
