"""Finite-difference verification of every differentiable operation family.

Each family draws random small problems and compares tape gradients with
central differences at 64-bit.  Inputs are drawn away from the points where
an operation is not differentiable (ReLU at 0, max ties, sampler cell
borders), since finite differences are meaningless there.
"""
from __future__ import annotations

import time
from typing import Callable, Iterable, Optional

import numpy as np

from . import ops
from .attention import AttnDecoder
from .ctc import ctc_loss
from .encoder import CBAM
from .gradcheck import CheckResult, check
from .rectifier import Rectifier
from .tensor import Tensor

TOLERANCE = 1e-4
CaseFn = Callable[[np.random.Generator], float]


def _away_from_zero(rng, shape, gap=1e-2):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-30) * gap + x, x)


def _distinct(rng, shape, spacing=1e-2):
    """Values whose pairwise gaps are at least ``spacing`` (no max ties)."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * spacing + rng.uniform(0, spacing / 4, n)).reshape(shape)


# -- families -----------------------------------------------------------------

def case_elementwise(rng) -> float:
    shape = tuple(rng.integers(1, 4, size=rng.integers(1, 4)))
    op = rng.choice(["sigmoid", "tanh", "relu", "exp", "log", "square", "neg",
                     "add", "sub", "mul", "div"])
    a = _away_from_zero(rng, shape)
    if op in ("add", "sub", "mul", "div"):
        # broadcast the second operand over a random subset of axes
        bshape = tuple(1 if rng.random() < 0.4 else s for s in shape)
        b = rng.normal(size=bshape)
        if op == "div":
            b = np.sign(b + 1e-30) * (np.abs(b) + 0.5)
        fn = getattr(ops, op)
        return check(lambda x, y: fn(x, y), [a, b], seed=int(rng.integers(1 << 31)))
    if op == "log":
        a = np.abs(a) + 0.1
    fn = getattr(ops, op)
    return check(lambda x: fn(x), [a], seed=int(rng.integers(1 << 31)))


def case_softmax(rng) -> float:
    shape = tuple(rng.integers(1, 6, size=rng.integers(1, 4)))
    axis = int(rng.integers(-len(shape), len(shape)))
    fn = ops.softmax if rng.random() < 0.5 else ops.log_softmax
    x = rng.normal(scale=2.0, size=shape)
    return check(lambda t: fn(t, axis=axis), [x], seed=int(rng.integers(1 << 31)))


def case_conv(rng) -> float:
    k = int(rng.integers(1, 4))
    stride = [1, 2, (2, 1), (1, 2)][int(rng.integers(4))]
    padding = "same" if rng.random() < 0.6 else "valid"
    h, w = int(rng.integers(k, 7)), int(rng.integers(k, 7))
    cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    x = rng.normal(size=(int(rng.integers(1, 3)), h, w, cin))
    kern = rng.normal(size=(k, k, cin, cout))
    inputs = [x, kern]
    if rng.random() < 0.5:
        inputs.append(rng.normal(size=cout))
        fn = lambda a, b, c: ops.conv2d(a, b, stride, padding, bias=c)  # noqa: E731
    else:
        fn = lambda a, b: ops.conv2d(a, b, stride, padding)  # noqa: E731
    return check(fn, inputs, seed=int(rng.integers(1 << 31)))


def case_pool(rng) -> float:
    kernel = [2, (2, 1), (2, 2), 3][int(rng.integers(4))]
    stride = [None, (2, 1), 1][int(rng.integers(3))]
    kh, kw = kernel if isinstance(kernel, tuple) else (kernel, kernel)
    shape = (int(rng.integers(1, 3)), int(rng.integers(kh, 7)), int(rng.integers(kw, 7)),
             int(rng.integers(1, 3)))
    if rng.random() < 0.5:
        x = _distinct(rng, shape)
        fn = lambda t: ops.maxpool2d(t, kernel, stride)  # noqa: E731
        return check(fn, [x], seed=int(rng.integers(1 << 31)), eps=1e-6)
    x = rng.normal(size=shape)
    return check(lambda t: ops.avgpool2d(t, kernel, stride), [x], seed=int(rng.integers(1 << 31)))


def case_lstm_cell(rng) -> float:
    n, hd = int(rng.integers(1, 4)), int(rng.integers(1, 5))
    inputs = [rng.normal(size=(n, 4 * hd)), rng.normal(size=(n, hd)), rng.normal(size=(n, hd)),
              rng.normal(scale=0.5, size=(hd, 4 * hd))]
    return check(ops.lstm_cell, inputs, seed=int(rng.integers(1 << 31)))


def _interior_grid(rng, n, ho, wo, h, w):
    """Normalized coordinates strictly inside sampler cells."""
    px = rng.integers(0, w - 1, size=(n, ho, wo)) + rng.uniform(0.1, 0.9, size=(n, ho, wo))
    py = rng.integers(0, h - 1, size=(n, ho, wo)) + rng.uniform(0.1, 0.9, size=(n, ho, wo))
    return np.stack([(px + 0.5) / w, (py + 0.5) / h], axis=-1)


def case_sampler_image(rng) -> float:
    n, h, w, c = int(rng.integers(1, 3)), int(rng.integers(2, 6)), int(rng.integers(2, 6)), int(rng.integers(1, 4))
    ho, wo = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    img = rng.normal(size=(n, h, w, c))
    grid = rng.uniform(-0.2, 1.2, size=(n, ho, wo, 2))  # clamped points included
    return check(ops.bilinear_sample, [img, grid], wrt=[0], seed=int(rng.integers(1 << 31)))


def case_sampler_grid(rng) -> float:
    n, h, w, c = int(rng.integers(1, 3)), int(rng.integers(2, 6)), int(rng.integers(2, 6)), int(rng.integers(1, 4))
    ho, wo = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    img = rng.normal(size=(n, h, w, c))
    grid = _interior_grid(rng, n, ho, wo, h, w)
    return check(ops.bilinear_sample, [img, grid], wrt=[1], seed=int(rng.integers(1 << 31)), eps=1e-6)


def _top2_gap(x: np.ndarray) -> float:
    """Smallest gap between the largest and second-largest entry along the last axis."""
    if x.shape[-1] < 2:
        return np.inf
    top = np.sort(x, axis=-1)
    return float((top[..., -1] - top[..., -2]).min())


def _cbam_margin(module: CBAM, x: np.ndarray) -> float:
    """Distance of a CBAM forward pass from its ReLU and max-pool kinks."""
    ch = module.channel
    n, c = x.shape[0], x.shape[-1]
    pre = [d @ ch.w1.data + ch.b1.data for d in (x.mean(axis=(1, 2)), x.reshape(n, -1, c).max(axis=1))]
    refined = x * module.channel(Tensor(x)).data
    return min(float(np.abs(np.concatenate(pre)).min()), _top2_gap(x.reshape(n, -1, c).swapaxes(1, 2)),
               _top2_gap(refined))


def case_cbam(rng) -> float:
    """Redraws until no ReLU input or max-pool runner-up is within 1e-3 of a kink."""
    while True:
        c = int(rng.choice([2, 4, 6]))
        module = CBAM(c, 2, rng)
        for p in module.parameters():
            p.data += rng.normal(scale=0.1, size=p.shape)
        x = rng.normal(size=(int(rng.integers(1, 3)), int(rng.integers(2, 5)), int(rng.integers(2, 5)), c))
        if _cbam_margin(module, x) > 1e-3:
            break
    return check(lambda t: module(t), [x], params=module.parameters(), max_entries=12,
                 seed=int(rng.integers(1 << 31)), eps=1e-6)


def case_ctc(rng) -> float:
    n_cls = int(rng.integers(1, 5))
    b = int(rng.integers(1, 3))
    labels = []
    t_len = int(rng.integers(1, 8))
    for _ in range(b):
        while True:
            lab = list(rng.integers(0, n_cls, size=int(rng.integers(1, 4))))
            need = len(lab) + sum(x == y for x, y in zip(lab, lab[1:]))
            if need <= t_len:
                break
            t_len = need
        labels.append(lab)
    logits = rng.normal(size=(b, t_len, n_cls + 1))
    return check(lambda z: ctc_loss(z, labels), [logits], seed=int(rng.integers(1 << 31)))


def case_attention(rng) -> float:
    n_cls = int(rng.integers(2, 5))
    d, hid, units, emb = int(rng.integers(2, 5)), int(rng.integers(2, 5)), int(rng.integers(2, 5)), 3
    dec = AttnDecoder(n_cls, d, hid, units, emb, rng, max_steps=6)
    b, t_len = int(rng.integers(1, 3)), int(rng.integers(1, 6))
    targets = [list(rng.integers(0, n_cls, size=int(rng.integers(0, 4)))) for _ in range(b)]
    H = rng.normal(size=(b, t_len, d))
    return check(lambda h: dec.loss(h, targets), [H], params=dec.parameters(), max_entries=8,
                 seed=int(rng.integers(1 << 31)))


def case_batch_norm(rng) -> float:
    shape = (int(rng.integers(2, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 4)),
             int(rng.integers(1, 4)))
    c = shape[-1]
    x = rng.normal(size=shape)
    gamma, beta = rng.normal(size=c), rng.normal(size=c)
    if rng.random() < 0.5:
        return check(lambda a, g, b: ops.batch_norm(a, g, b)[0], [x, gamma, beta],
                     seed=int(rng.integers(1 << 31)))
    mean, var = rng.normal(size=c), rng.uniform(0.5, 2.0, size=c)
    return check(lambda a, g, b: ops.affine_norm(a, mean, var, g, b), [x, gamma, beta],
                 seed=int(rng.integers(1 << 31)))


def _cell_margin(grid: np.ndarray, h: int, w: int) -> float:
    """Distance of the nearest sampling coordinate to a sampler kink (cell border or clamp)."""
    px = grid[..., 0] * w - 0.5
    py = grid[..., 1] * h - 0.5
    out = []
    for p, n in ((px, w), (py, h)):
        live = (p > -0.5) & (p < n - 0.5)
        if live.any():
            q = p[live]
            out.append(np.abs(q - np.rint(q)).min())
    return min(out, default=1.0)


def _relu_margin(loc, images: np.ndarray) -> float:
    """Smallest |pre-activation| over every ReLU of the localization network."""
    x, low = Tensor(images), np.inf
    for conv, norm in zip(loc.convs, loc.norms):
        pre = norm(conv(x))
        low = min(low, float(np.abs(pre.data).min()))
        x = ops.relu(pre)
    pre = loc.fc1(ops.reshape(x, (x.shape[0], -1)))
    return min(low, float(np.abs(pre.data).min()))


def case_tps_localization(rng) -> float:
    """Scalar of the rectified image w.r.t. the input and every localization weight.

    Normalization runs on fixed random statistics: with a toy batch the last
    layers normalize a handful of values, which makes batch statistics
    nearly scale-invariant and the finite differences meaningless.  The
    sampler is piecewise bilinear in the grid, so cases whose grid lies near
    a cell border, or whose ReLU inputs lie near zero, are redrawn.  The gradients of the early layers are small
    next to the rounding noise of the objective, hence the larger step.
    """
    while True:
        k = int(rng.choice([4, 6, 10]))
        h, w = int(rng.choice([2, 3])), int(rng.choice([4, 6]))
        rect = Rectifier(h, w, k, (4,) * 6, 4, rng).eval()
        for norm in rect.loc.norms:
            norm._running_mean[...] = rng.normal(scale=0.1, size=norm._running_mean.shape)
            norm._running_var[...] = rng.uniform(0.5, 2.0, size=norm._running_var.shape)
        # move off the identity so the last layer passes gradient; nonzero
        # biases keep all-zero feature rows away from the ReLU kink
        rect.loc.fc2.weight.data[...] = rng.normal(scale=0.3, size=rect.loc.fc2.weight.shape)
        rect.loc.fc2.bias.data += rng.normal(scale=0.1, size=rect.loc.fc2.bias.shape)
        for p in (rect.loc.fc1.bias, *(n.beta for n in rect.loc.norms)):
            p.data[...] = _away_from_zero(rng, p.shape, gap=0.1)
        imgs = rng.normal(size=(2, h, w, 3))
        grid = rect._grid(rect.localize(Tensor(imgs))).data
        if _cell_margin(grid, h, w) > 0.02 and _relu_margin(rect.loc, imgs) > 0.01:
            break
    return check(lambda x: rect(x)[0], [imgs], params=rect.parameters(), max_entries=6,
                 seed=int(rng.integers(1 << 31)), eps=1e-3)


FAMILIES: dict[str, CaseFn] = {
    "elementwise": case_elementwise,
    "softmax": case_softmax,
    "conv2d": case_conv,
    "pooling": case_pool,
    "batch_norm": case_batch_norm,
    "lstm_cell": case_lstm_cell,
    "sampler/image": case_sampler_image,
    "sampler/grid": case_sampler_grid,
    "cbam": case_cbam,
    "ctc_loss": case_ctc,
    "attention_decoder": case_attention,
    "tps_localization": case_tps_localization,
}


def run_family(name: str, case: CaseFn, cases: int = 100, seed: int = 0,
               tolerance: float = TOLERANCE) -> CheckResult:
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    result = CheckResult(name, 0, 0.0, tolerance)
    for _ in range(cases):
        try:
            err = case(rng)
        except Exception as exc:  # a crashing backward is a failure, not an abort
            result.errors.append(f"{type(exc).__name__}: {exc}")
            err = float("inf")
        result.cases += 1
        result.max_rel_err = max(result.max_rel_err, err)
    return result


def end_to_end_case(seed: int = 0, preset: str = "toy", entries: int = 4) -> CheckResult:
    """Whole recognizer (rectifier, encoder, both branches) at 64-bit, sampled weights.

    The model holds thousands of ReLU and max-pool kinks; a small step keeps
    the chance that a perturbation crosses one negligible.
    """
    from .alphabet import Alphabet
    from .model import ModelConfig, Recognizer
    from .trainer import total_loss

    rng = np.random.default_rng(seed)
    model = Recognizer(ModelConfig.preset(preset), Alphabet.from_spec("digits"), seed=seed)
    loc = model.rectifier.loc.fc2.weight if model.rectifier is not None else None
    if loc is not None:
        loc.data[...] = rng.normal(scale=0.01, size=loc.shape)
    imgs = rng.uniform(-1, 1, size=(2, 32, 100, 3))
    labels = [list(rng.integers(0, 10, size=3)), list(rng.integers(0, 10, size=2))]

    def fn(x):
        out = model.forward(x)
        return total_loss(*model.losses(out, labels), 0.1)

    params = model.parameters()
    picked = [params[i] for i in sorted(rng.choice(len(params), size=min(12, len(params)),
                                                   replace=False))]
    result = CheckResult(f"end_to_end/{preset}", 1, 0.0, TOLERANCE)
    try:
        result.max_rel_err = check(fn, [imgs], wrt=[], params=picked, max_entries=entries,
                                   seed=seed, eps=1e-7)
    except Exception as exc:
        result.errors.append(f"{type(exc).__name__}: {exc}")
        result.max_rel_err = float("inf")
    return result


def run_suite(cases: int = 100, seed: int = 0, families: Optional[Iterable[str]] = None,
              tolerance: float = TOLERANCE, extra: Optional[dict] = None,
              report: Optional[Callable[[str], None]] = None) -> list[CheckResult]:
    """Run the selected families (all by default) plus any ``extra`` ones."""
    extra = extra or {}
    table = {**FAMILIES, **extra}
    names = (list(FAMILIES) if families is None else list(families)) + list(extra)
    results = []
    for name in names:
        t0 = time.perf_counter()
        res = run_family(name, table[name], cases, seed, tolerance)
        results.append(res)
        if report:
            report(f"{res.line()} [{time.perf_counter() - t0:.1f}s]")
    return results
