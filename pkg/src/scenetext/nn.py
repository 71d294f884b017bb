"""Parameter containers built on the tensor ops."""
from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import ops
from .tensor import Tensor


class Module:
    """Base class: discovers parameters and buffers through attributes."""

    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Module):
                yield from value.named_buffers(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{full}.{i}.")
        for name in getattr(self, "_buffers", ()):
            yield f"{prefix}{name}", getattr(self, "_" + name)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((n, p.data) for n, p in self.named_parameters())
        state.update((n, b) for n, b in self.named_buffers())
        return state

    def load_state_dict(self, state: dict) -> None:
        own = self.state_dict()
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        params = dict(self.named_parameters())
        for name, value in state.items():
            target = params[name].data if name in params else own[name]
            if target.shape != value.shape:
                raise ValueError(f"{name}: shape {value.shape} != expected {target.shape}")
            target[...] = value

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for value in vars(self).values():
            if isinstance(value, Module):
                value.train(mode)
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        item.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _param(array: np.ndarray, dtype) -> Tensor:
    return Tensor(np.asarray(array, dtype=dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float64,
                 bias: bool = True):
        bound = 1.0 / np.sqrt(d_in)
        self.weight = _param(rng.uniform(-bound, bound, (d_in, d_out)), dtype)
        self.bias = _param(np.zeros(d_out), dtype) if bias else None

    def forward(self, x) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel, rng: np.random.Generator, stride=1,
                 padding: str = "same", bias: bool = False, dtype=np.float64):
        kh, kw = ops._pair(kernel)
        std = np.sqrt(2.0 / (kh * kw * c_in))
        self.kernel = _param(rng.normal(0.0, std, (kh, kw, c_in, c_out)), dtype)
        self.bias = _param(np.zeros(c_out), dtype) if bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x) -> Tensor:
        return ops.conv2d(x, self.kernel, self.stride, self.padding, self.bias)


class BatchNorm(Module):
    """Per-channel normalization with learned scale and shift.

    Training mode uses batch statistics and updates running estimates;
    evaluation mode uses the running estimates.
    """

    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, dtype=np.float64, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = _param(np.ones(channels), dtype)
        self.beta = _param(np.zeros(channels), dtype)
        self._running_mean = np.zeros(channels, dtype=dtype)
        self._running_var = np.ones(channels, dtype=dtype)
        self._momentum = momentum
        self._eps = eps

    def forward(self, x) -> Tensor:
        if self.training:
            y, mu, var = ops.batch_norm(x, self.gamma, self.beta, self._eps)
            m = self._momentum
            self._running_mean *= 1 - m
            self._running_mean += m * mu
            self._running_var *= 1 - m
            self._running_var += m * var
            return y
        return ops.affine_norm(x, self._running_mean, self._running_var, self.gamma, self.beta,
                               self._eps)


class LSTM(Module):
    """Unidirectional LSTM over ``N x T x D`` sequences (zero initial state)."""

    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator, dtype=np.float64,
                 reverse: bool = False):
        bound = 1.0 / np.sqrt(d_in + hidden)
        self.w_ih = _param(rng.uniform(-bound, bound, (d_in, 4 * hidden)), dtype)
        self.w_hh = _param(rng.uniform(-bound, bound, (hidden, 4 * hidden)), dtype)
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = 1.0
        self.bias = _param(b, dtype)
        self._hidden = hidden
        self._reverse = reverse

    @property
    def hidden(self) -> int:
        return self._hidden

    def forward(self, x) -> Tensor:
        n, t_len, _ = x.shape
        proj = ops.linear(x, self.w_ih, self.bias)
        h = Tensor(np.zeros((n, self._hidden), dtype=proj.dtype))
        c = h
        steps = range(t_len - 1, -1, -1) if self._reverse else range(t_len)
        outs = [None] * t_len
        hd = self._hidden
        for t in steps:
            hc = ops.lstm_cell(proj[:, t], h, c, self.w_hh)
            h, c = hc[:, :hd], hc[:, hd:]
            outs[t] = h
        return ops.stack(outs, axis=1)


class BiLSTM(Module):
    """Bidirectional LSTM; output concatenates forward and backward states."""

    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator, dtype=np.float64):
        self.fwd = LSTM(d_in, hidden, rng, dtype)
        self.bwd = LSTM(d_in, hidden, rng, dtype, reverse=True)

    def forward(self, x) -> Tensor:
        return ops.concat([self.fwd(x), self.bwd(x)], axis=-1)
