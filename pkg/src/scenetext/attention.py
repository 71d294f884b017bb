"""Additive-attention LSTM decoder over the context sequence.

At step ``m`` the decoder scores every context vector ``h_i`` against the
previous state, ``e_mi = v . tanh(W s_{m-1} + V h_i + b)``, normalizes the
scores into weights ``alpha``, forms the context ``c_m = sum_i alpha_mi h_i``,
advances its LSTM on ``[embed(y_{m-1}); c_m]`` and emits
``softmax(W_o s_m + b_o)``.

Output symbols use the alphabet layout: classes ``0..N-1``, blank ``N``
(never emitted), SOS ``N+1`` (never emitted) and EOS ``N+2``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import ops
from .nn import Module, _param
from .tensor import Tensor


class DecodeLengthError(RuntimeError):
    """Decoding ran past the configured step cap."""


@dataclass
class DecoderState:
    h: Tensor
    c: Tensor
    prev_symbol: np.ndarray
    step: int = 0


@dataclass
class AttentionRecord:
    alpha: Tensor   # N x T
    context: Tensor  # N x D
    scores: Tensor  # N x T


class AttnDecoder(Module):
    def __init__(self, num_classes: int, context_dim: int, hidden: int, attn_units: int,
                 embed_dim: int, rng: np.random.Generator, dtype=np.float64,
                 max_steps: int = 11):
        vocab = num_classes + 3
        self._n = num_classes
        self._hidden = hidden
        self.max_steps = max_steps
        bound_s = 1.0 / np.sqrt(hidden)
        bound_h = 1.0 / np.sqrt(context_dim)
        bound_a = 1.0 / np.sqrt(attn_units)
        self.embed = _param(rng.normal(0, 1.0, (vocab, embed_dim)), dtype)
        self.w_state = _param(rng.uniform(-bound_s, bound_s, (hidden, attn_units)), dtype)
        self.w_context = _param(rng.uniform(-bound_h, bound_h, (context_dim, attn_units)), dtype)
        self.attn_bias = _param(np.zeros(attn_units), dtype)
        self.v = _param(rng.uniform(-bound_a, bound_a, (attn_units, 1)), dtype)
        d_in = embed_dim + context_dim
        bound = 1.0 / np.sqrt(d_in + hidden)
        self.w_ih = _param(rng.uniform(-bound, bound, (d_in, 4 * hidden)), dtype)
        self.w_hh = _param(rng.uniform(-bound, bound, (hidden, 4 * hidden)), dtype)
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = 1.0
        self.lstm_bias = _param(b, dtype)
        self.w_out = _param(rng.uniform(-bound_s, bound_s, (hidden, vocab)), dtype)
        self.b_out = _param(np.zeros(vocab), dtype)
        mask = np.zeros(vocab)
        mask[[self.blank, self.sos]] = -np.inf
        self._mask = mask.astype(dtype)

    # symbol layout -------------------------------------------------------
    @property
    def num_classes(self) -> int:
        return self._n

    @property
    def blank(self) -> int:
        return self._n

    @property
    def sos(self) -> int:
        return self._n + 1

    @property
    def eos(self) -> int:
        return self._n + 2

    @property
    def allowed(self) -> int:
        """Number of symbols the output distribution ranges over (classes + EOS)."""
        return self._n + 1

    # pieces --------------------------------------------------------------
    def initial_state(self, batch: int, dtype) -> DecoderState:
        zeros = Tensor(np.zeros((batch, self._hidden), dtype=dtype))
        return DecoderState(zeros, zeros, np.full(batch, self.sos, dtype=np.int64), 0)

    def project_context(self, H: Tensor) -> Tensor:
        """``V h_i + b`` for every position; reused across decoding steps."""
        return ops.linear(H, self.w_context, self.attn_bias)

    def attend(self, s_prev: Tensor, H: Tensor, keys: Optional[Tensor] = None) -> AttentionRecord:
        if H.shape[1] == 0:
            raise ValueError("context sequence is empty")
        keys = self.project_context(H) if keys is None else keys
        n, t_len, a = keys.shape
        query = ops.reshape(ops.matmul(s_prev, self.w_state), (n, 1, a))
        energy = ops.tanh(ops.add(keys, query))
        scores = ops.reshape(ops.matmul(energy, self.v), (n, t_len))
        alpha = ops.softmax(scores, axis=-1)
        context = ops.reshape(ops.matmul(ops.reshape(alpha, (n, 1, t_len)), H), (n, H.shape[2]))
        return AttentionRecord(alpha, context, scores)

    def decode_step(self, state: DecoderState, H: Tensor, keys: Optional[Tensor] = None):
        """Advance one step; returns ``(log-probabilities, new state, attention)``."""
        if state.step >= self.max_steps:
            raise DecodeLengthError(f"decoder reached its cap of {self.max_steps} steps")
        rec = self.attend(state.h, H, keys)
        emb = ops.take(self.embed, state.prev_symbol)
        x = ops.concat([emb, rec.context], axis=-1)
        hc = ops.lstm_cell(ops.linear(x, self.w_ih, self.lstm_bias), state.h, state.c, self.w_hh)
        hd = self._hidden
        h, c = hc[:, :hd], hc[:, hd:]
        logits = ops.add(ops.linear(h, self.w_out, self.b_out), self._mask)
        logp = ops.log_softmax(logits, axis=-1)
        new_state = DecoderState(h, c, state.prev_symbol, state.step + 1)
        return logp, new_state, rec

    # training / inference ------------------------------------------------
    def loss(self, H: Tensor, targets: Sequence[Sequence[int]]) -> Tensor:
        """Teacher-forced cross-entropy, averaged over the ``L + 1`` steps of each
        sample and then over the batch."""
        n = H.shape[0]
        if len(targets) != n:
            raise ValueError(f"{len(targets)} targets for a batch of {n}")
        for tgt in targets:
            if any(not 0 <= int(i) < self._n for i in tgt):
                raise ValueError(f"target {list(tgt)} contains non-character indices")
            if len(tgt) + 1 > self.max_steps:
                raise DecodeLengthError(
                    f"target of length {len(tgt)} exceeds the {self.max_steps}-step cap")
        steps = max(len(t) for t in targets) + 1
        gold = np.full((n, steps), self.eos, dtype=np.int64)
        inputs = np.full((n, steps), self.sos, dtype=np.int64)
        weight = np.zeros((n, steps))
        for i, tgt in enumerate(targets):
            gold[i, :len(tgt)] = tgt
            inputs[i, 1:len(tgt) + 1] = tgt
            weight[i, :len(tgt) + 1] = 1.0 / (len(tgt) + 1)
        weight = (weight / n).astype(H.dtype)
        keys = self.project_context(H)
        state = self.initial_state(n, H.dtype)
        terms = []
        for m in range(steps):
            state.prev_symbol = inputs[:, m]
            logp, state, _ = self.decode_step(state, H, keys)
            terms.append(ops.pick(logp, gold[:, m]))
        nll = ops.stack(terms, axis=1)
        return ops.neg(ops.sum(ops.mul(nll, weight)))

    def greedy_decode(self, H: Tensor, max_steps: Optional[int] = None) -> list[list[int]]:
        cap = self.max_steps if max_steps is None else min(max_steps, self.max_steps)
        n = H.shape[0]
        keys = self.project_context(H)
        state = self.initial_state(n, H.dtype)
        out: list[list[int]] = [[] for _ in range(n)]
        done = np.zeros(n, dtype=bool)
        for _ in range(cap):
            logp, state, _ = self.decode_step(state, H, keys)
            sym = logp.data.argmax(axis=-1)
            for i in np.flatnonzero(~done):
                if sym[i] == self.eos:
                    done[i] = True
                else:
                    out[i].append(int(sym[i]))
            if done.all():
                break
            state.prev_symbol = sym
        return out


def attend(s_prev: Tensor, H: Tensor, decoder: AttnDecoder) -> AttentionRecord:
    return decoder.attend(s_prev, H)


def attn_loss(H: Tensor, targets, decoder: AttnDecoder) -> Tensor:
    return decoder.loss(H, targets)


def attn_greedy_decode(H: Tensor, decoder: AttnDecoder) -> list[list[int]]:
    return decoder.greedy_decode(H)
