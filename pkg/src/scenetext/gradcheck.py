"""Central finite-difference verification of tape gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tape, Tensor


def relative_error(analytic: np.ndarray, numeric: np.ndarray, scale: float = 0.0) -> float:
    """Max-norm relative error ``|a - n|_inf / max(|a|_inf, |n|_inf)``.

    ``scale`` is a lower bound for the denominator; when only some entries
    of a tensor are compared it carries the max-norm of the full analytic
    gradient, so the ratio stays relative to the whole tensor.
    """
    scale = max(scale, np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def _scalarize(out: Tensor, weights: Optional[np.ndarray]):
    from . import ops
    if out.size == 1:
        return ops.reshape(out, ())
    return ops.sum(ops.mul(out, weights))


def numeric_grad(f: Callable[[], float], arr: np.ndarray, eps: float = 1e-5,
                 entries: Optional[np.ndarray] = None) -> np.ndarray:
    """Central differences of ``f`` w.r.t. ``arr`` (perturbed in place)."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    idx = range(flat.size) if entries is None else entries
    for i in idx:
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def check(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], seed: int = 0,
          eps: float = 1e-5, max_entries: Optional[int] = None,
          wrt: Optional[Sequence[int]] = None,
          params: Sequence[Tensor] = ()) -> float:
    """Compare tape gradients of ``fn`` against central differences.

    ``fn`` receives one tensor per array in ``inputs`` and returns any
    tensor; it is reduced to a scalar with fixed random weights.  ``params``
    are extra tensors (e.g. layer weights) closed over by ``fn`` that are
    checked as well.  Returns the worst relative error over all checked
    inputs.  When ``max_entries`` is set, a random subset of coordinates of
    each input is perturbed.
    """
    rng = np.random.default_rng(seed)
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    wrt = range(len(arrays)) if wrt is None else wrt

    weights_box: list = []

    def evaluate(record: bool):
        tensors = [Tensor(a, requires_grad=record) for a in arrays]
        if record:
            with Tape() as tape:
                out = fn(*tensors)
                if not weights_box:
                    weights_box.append(rng.normal(size=out.shape))
                loss = _scalarize(out, weights_box[0])
            for p in params:
                p.zero_grad()
            tape.backward(loss)
            return tensors
        out = fn(*tensors)
        return float(_scalarize(out, weights_box[0]).data)

    tensors = evaluate(True)
    analytic = [tensors[i].grad for i in wrt] + [p.grad.copy() for p in params]
    targets = [arrays[i] for i in wrt] + [p.data for p in params]
    worst = 0.0
    for a, arr in zip(analytic, targets):
        entries = None
        if max_entries is not None and arr.size > max_entries:
            entries = rng.choice(arr.size, size=max_entries, replace=False)
        num = numeric_grad(lambda: evaluate(False), arr, eps, entries)
        full_scale = float(np.abs(a).max(initial=0.0))
        if entries is not None:
            a = a.reshape(-1)[entries]
            num = num.reshape(-1)[entries]
        worst = max(worst, relative_error(a, num, full_scale))
    return worst


@dataclass
class CheckResult:
    name: str
    cases: int
    max_rel_err: float
    tolerance: float
    errors: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.errors and self.max_rel_err <= self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f" ({self.errors[0]})" if self.errors else ""
        return (f"{status} {self.name:<28s} cases={self.cases:<4d} "
                f"max_rel_err={self.max_rel_err:.3e} tol={self.tolerance:.0e}{extra}")
