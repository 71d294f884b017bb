"""Connectionist temporal classification: loss and greedy decoding.

Frame outputs have ``N + 1`` classes; the blank is the last index ``N``.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import Tensor, as_tensor, record


class InfeasibleAlignmentError(ValueError):
    """The label needs more frames than the input provides."""


def min_frames(label: Sequence[int]) -> int:
    """Shortest input that can emit ``label`` (a blank between every repeat)."""
    repeats = sum(1 for a, b in zip(label, label[1:]) if a == b)
    return len(label) + repeats


def collapse(path: Sequence[int], blank: int) -> list[int]:
    """Merge consecutive duplicates, then drop blanks."""
    out = []
    prev = None
    for p in path:
        p = int(p)
        if p != prev and p != blank:
            out.append(p)
        prev = p
    return out


def greedy_decode(posteriors, blank: int | None = None) -> list:
    """Per-frame argmax (lowest index on ties) followed by :func:`collapse`.

    ``posteriors`` is ``T x (N+1)`` or batched ``B x T x (N+1)``; the blank
    defaults to the last class.
    """
    p = posteriors.data if isinstance(posteriors, Tensor) else np.asarray(posteriors)
    blank = p.shape[-1] - 1 if blank is None else blank
    best = p.argmax(axis=-1)
    if best.ndim == 1:
        return collapse(best, blank)
    return [collapse(row, blank) for row in best]


def _logsumexp(*terms: np.ndarray) -> np.ndarray:
    stacked = np.stack(terms)
    m = stacked.max(axis=0)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return safe + np.log(np.exp(stacked - safe).sum(axis=0))


def _extend(labels: Sequence[Sequence[int]], blank: int):
    s_max = 2 * max(len(lab) for lab in labels) + 1
    ext = np.full((len(labels), s_max), blank, dtype=np.int64)
    for n, lab in enumerate(labels):
        ext[n, 1:2 * len(lab):2] = lab
    # skip transition s-2 -> s allowed when ext[s] is a character differing from ext[s-2]
    skip = np.zeros_like(ext, dtype=bool)
    skip[:, 2:] = (ext[:, 2:] != blank) & (ext[:, 2:] != ext[:, :-2])
    return ext, skip


def ctc_forward_backward(logp: np.ndarray, labels: Sequence[Sequence[int]], blank: int):
    """Log-space alpha/beta recursions.

    ``logp`` is ``B x T x (N+1)`` log-probabilities.  Returns
    ``(log_likelihood[B], log_gamma[B, T, N+1])`` where ``gamma`` is the
    posterior occupancy of each class per frame.
    """
    b, t_len, c = logp.shape
    ext, skip = _extend(labels, blank)
    s_max = ext.shape[1]
    lens = np.array([2 * len(lab) + 1 for lab in labels])
    rows = np.arange(b)[:, None]
    lp = np.take_along_axis(logp, np.broadcast_to(ext[:, None, :], (b, t_len, s_max)), axis=2)
    ninf = -np.inf

    alpha = np.full((b, t_len, s_max), ninf)
    alpha[:, 0, 0] = lp[:, 0, 0]
    alpha[:, 0, 1] = lp[:, 0, 1]
    for t in range(1, t_len):
        prev = alpha[:, t - 1]
        shift1 = np.concatenate([np.full((b, 1), ninf), prev[:, :-1]], axis=1)
        shift2 = np.concatenate([np.full((b, 2), ninf), prev[:, :-2]], axis=1)
        shift2 = np.where(skip, shift2, ninf)
        alpha[:, t] = _logsumexp(prev, shift1, shift2) + lp[:, t]

    beta = np.full((b, t_len, s_max), ninf)
    beta[np.arange(b), t_len - 1, lens - 1] = lp[np.arange(b), t_len - 1, lens - 1]
    beta[np.arange(b), t_len - 1, lens - 2] = lp[np.arange(b), t_len - 1, lens - 2]
    # entering s+2 from s is allowed iff skip[s+2]
    skip_from = np.zeros_like(skip)
    skip_from[:, :-2] = skip[:, 2:]
    for t in range(t_len - 2, -1, -1):
        nxt = beta[:, t + 1]
        shift1 = np.concatenate([nxt[:, 1:], np.full((b, 1), ninf)], axis=1)
        shift2 = np.concatenate([nxt[:, 2:], np.full((b, 2), ninf)], axis=1)
        shift2 = np.where(skip_from, shift2, ninf)
        beta[:, t] = _logsumexp(nxt, shift1, shift2) + lp[:, t]

    last = alpha[rows[:, 0], t_len - 1]
    loglik = _logsumexp(last[np.arange(b), lens - 1], last[np.arange(b), lens - 2])
    occ = alpha + beta - lp  # log prob of all paths through (t, s)
    occ = np.where(np.isfinite(occ), occ - loglik[:, None, None], -np.inf)
    gamma = np.zeros((b, t_len, c))
    idx = np.broadcast_to(ext[:, None, :], (b, t_len, s_max))
    np.add.at(gamma, (np.arange(b)[:, None, None], np.arange(t_len)[None, :, None], idx),
              np.exp(occ))
    return loglik, gamma


def _check_labels(labels: Sequence[Sequence[int]], t_len: int, num_classes: int) -> None:
    for lab in labels:
        if len(lab) == 0:
            raise ValueError("CTC label must contain at least one symbol")
        if any(not 0 <= i < num_classes - 1 for i in lab):
            raise ValueError(f"label {list(lab)} contains indices outside 0..{num_classes - 2}")
        need = min_frames(lab)
        if need > t_len:
            raise InfeasibleAlignmentError(
                f"label of length {len(lab)} needs at least {need} frames, input has {t_len}")


def ctc_loss(logits, labels, reduction: str = "mean") -> Tensor:
    """Negative log-likelihood ``-ln p(l | x)`` summed over all alignments.

    ``logits`` is ``T x (N+1)`` with a single label, or ``B x T x (N+1)``
    with a list of labels.  Softmax is applied internally.
    """
    logits = as_tensor(logits)
    single = logits.ndim == 2
    if single:
        labels = [labels]
    x = logits.data[None] if single else logits.data
    b, t_len, c = x.shape
    if len(labels) != b:
        raise ValueError(f"{len(labels)} labels for a batch of {b}")
    labels = [list(map(int, lab)) for lab in labels]
    _check_labels(labels, t_len, c)
    x64 = x.astype(np.float64)
    m = x64.max(axis=-1, keepdims=True)
    logp = x64 - m - np.log(np.exp(x64 - m).sum(axis=-1, keepdims=True))
    loglik, gamma = ctc_forward_backward(logp, labels, c - 1)
    per_sample = -loglik
    if reduction == "mean":
        out = per_sample.mean()
        scale = np.full(b, 1.0 / b)
    elif reduction == "sum":
        out = per_sample.sum()
        scale = np.ones(b)
    elif reduction == "none":
        out = per_sample
        scale = None
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    if single and reduction == "none":
        out = out[0]

    def back(g):
        w = (np.broadcast_to(g, (b,)) if scale is None else g * scale)
        grad = (np.exp(logp) - gamma) * w[:, None, None]
        grad = grad.astype(logits.dtype)
        return (grad[0] if single else grad,)

    return record(np.asarray(out, dtype=logits.dtype), (logits,), back)
