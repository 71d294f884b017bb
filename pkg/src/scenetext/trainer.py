"""Combined-loss training loop, evaluation and deterministic batching."""
from __future__ import annotations

import json
import logging
import queue
import re
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Optional

import numpy as np

from . import ops
from .alphabet import Alphabet
from .augment import AugmentationConfig, augment, prepare
from .checkpoint import save_checkpoint
from .config import RunConfig
from .data import TextDataset
from .model import Recognizer
from .optim import Adadelta, lr_multiplier
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

METRIC_KEYS = ("step", "acc_final", "acc_attn", "acc_ctc", "l_total", "l_attn", "l_ctc")


class TrainingDivergenceError(RuntimeError):
    """A loss became NaN or infinite."""


@dataclass(frozen=True)
class LossReport:
    l_attn: float
    l_ctc: float
    lam: float
    l_total: float
    batch_size: int
    step: int

    def identity_holds(self) -> bool:
        return self.l_total == self.l_attn + self.lam * self.l_ctc

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d


def _check_finite(name: str, t: Tensor) -> None:
    if not np.all(np.isfinite(t.data)):
        raise TrainingDivergenceError(f"{name} is not finite: {t.data}")


def total_loss(l_attn: Optional[Tensor], l_ctc: Optional[Tensor], lam: float) -> Tensor:
    """``l_attn + lam * l_ctc`` in float64, so the identity also holds for the logged floats.

    A missing branch contributes zero.
    """
    if l_attn is None and l_ctc is None:
        raise ValueError("at least one branch loss is required")
    terms = []
    if l_attn is not None:
        _check_finite("attention loss", l_attn)
        terms.append(ops.cast(l_attn, np.float64))
    if l_ctc is not None:
        _check_finite("CTC loss", l_ctc)
        terms.append(ops.mul(ops.cast(l_ctc, np.float64), float(lam)))
    return terms[0] if len(terms) == 1 else ops.add(terms[0], terms[1])


# -- evaluation ---------------------------------------------------------------

_STRIP = re.compile(r"[^0-9a-z]")


def normalize_text(text: str) -> str:
    """Lowercase and drop everything that is not a letter or digit."""
    return _STRIP.sub("", text.lower())


def is_match(prediction: Optional[str], label: str) -> bool:
    return prediction is not None and normalize_text(prediction) == normalize_text(label)


@dataclass
class EvalReport:
    acc_final: float
    acc_attn: Optional[float]
    acc_ctc: Optional[float]
    count: int
    skipped: int
    predictions: list = field(default_factory=list, repr=False)


def evaluate(model: Recognizer, dataset: TextDataset, batch_size: int = 100) -> EvalReport:
    if len(dataset) == 0:
        raise ValueError("evaluation dataset is empty")
    was_training = model.training
    model.eval()
    preds: list[dict] = []
    try:
        for start in range(0, len(dataset), batch_size):
            imgs = np.stack([prepare(im) for im in dataset.images[start:start + batch_size]])
            preds.extend(model.recognize(imgs.astype(model.dtype)))
    finally:
        model.train(was_training)

    def acc(key):
        if preds[0][key] is None:
            return None
        return sum(is_match(p[key], t) for p, t in zip(preds, dataset.texts)) / len(preds)

    return EvalReport(acc("final"), acc("attn"), acc("ctc"), len(preds),
                      len(dataset.skipped_unreadable), preds)


# -- batching -----------------------------------------------------------------

@dataclass
class Batch:
    step: int
    images: np.ndarray
    labels: list
    texts: list


class BatchSampler:
    """Batch ``s`` depends only on ``(seed, s)``: epoch-wise permutations, per-sample rngs."""

    def __init__(self, dataset: TextDataset, alphabet: Alphabet, batch_size: int, seed: int,
                 aug: AugmentationConfig, dtype=np.float32):
        if len(dataset) == 0:
            raise ValueError("training dataset is empty")
        self.dataset = dataset
        self.alphabet = alphabet
        self.batch_size = batch_size
        self.seed = seed
        self.aug = aug
        self.dtype = np.dtype(dtype)
        self._labels = [alphabet.encode(t) for t in dataset.texts]
        self._perms: dict[int, np.ndarray] = {}

    def _perm(self, epoch: int) -> np.ndarray:
        if epoch not in self._perms:
            self._perms = {epoch: np.random.default_rng([self.seed, epoch]).permutation(len(self.dataset))}
        return self._perms[epoch]

    def indices(self, step: int) -> list[int]:
        n = len(self.dataset)
        out = []
        for g in range(step * self.batch_size, (step + 1) * self.batch_size):
            out.append(int(self._perm(g // n)[g % n]))
        return out

    def batch(self, step: int) -> Batch:
        idx = self.indices(step)
        imgs = [augment(self.dataset.images[j], self.aug, np.random.default_rng([self.seed, step, i]))
                for i, j in enumerate(idx)]
        return Batch(step, np.stack(imgs).astype(self.dtype), [self._labels[j] for j in idx],
                     [self.dataset.texts[j] for j in idx])


def prefetch(sampler: BatchSampler, start: int, stop: int, depth: int = 4) -> Iterator[Batch]:
    """Produce batches ``start..stop-1`` on a worker thread through a bounded queue."""
    if depth <= 0:
        for s in range(start, stop):
            yield sampler.batch(s)
        return
    q: queue.Queue = queue.Queue(maxsize=depth)
    stop_flag = threading.Event()

    def work():
        try:
            for s in range(start, stop):
                if stop_flag.is_set():
                    return
                item = sampler.batch(s)
                while not stop_flag.is_set():
                    try:
                        q.put(item, timeout=0.1)
                        break
                    except queue.Full:
                        continue
        except BaseException as exc:  # forwarded to the consumer
            q.put(exc)

    t = threading.Thread(target=work, daemon=True)
    t.start()
    try:
        for _ in range(start, stop):
            item = q.get()
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop_flag.set()
        t.join(timeout=5)


# -- training -----------------------------------------------------------------

def filter_trainable(dataset: TextDataset, max_len: int) -> TextDataset:
    """Drop labels longer than the decoder can emit (logged, never silently)."""
    keep = [i for i, t in enumerate(dataset.texts) if 1 <= len(t) <= max_len]
    if len(keep) == len(dataset):
        return dataset
    log.warning("skipping %d samples with label length outside [1, %d]",
                len(dataset) - len(keep), max_len)
    out = TextDataset(dataset.root, [dataset.paths[i] for i in keep], [dataset.texts[i] for i in keep],
                      [dataset.images[i] for i in keep], dataset.skipped_unreadable,
                      dataset.skipped_alphabet)
    return out


def train_step(model: Recognizer, optimizer: Adadelta, batch: Batch, lam: float, lr: float
               ) -> LossReport:
    model.train()
    with Tape() as tape:
        out = model.forward(batch.images)
        l_attn, l_ctc = model.losses(out, batch.labels)
        loss = total_loss(l_attn, l_ctc, lam)
    tape.backward(loss)
    optimizer.step(lr)
    optimizer.zero_grad()
    for name, p in model.named_parameters():
        if not np.all(np.isfinite(p.data)):
            raise TrainingDivergenceError(f"parameter {name} became non-finite at step {batch.step}")
    a = float(ops.cast(l_attn, np.float64).data) if l_attn is not None else 0.0
    c = float(ops.cast(l_ctc, np.float64).data) if l_ctc is not None else 0.0
    return LossReport(a, c, float(lam), float(loss.data), len(batch.labels), batch.step)


@dataclass
class TrainResult:
    model: Recognizer
    optimizer: Adadelta
    step: int
    reports: list = field(default_factory=list)
    metrics: list = field(default_factory=list)
    elapsed: float = 0.0


def build_model(cfg: RunConfig) -> Recognizer:
    return Recognizer(cfg.model_config(), cfg.make_alphabet(), seed=cfg.seed, dtype=cfg.dtype)


def train(cfg: RunConfig, train_set: TextDataset, test_set: Optional[TextDataset] = None, *,
          model: Optional[Recognizer] = None, optimizer: Optional[Adadelta] = None,
          start_step: int = 0, out_dir=None,
          on_report: Optional[Callable[[LossReport], None]] = None,
          on_metrics: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Run ``cfg.total_steps`` optimizer steps (resuming at ``start_step``).

    Metrics are evaluated every ``eval_every`` steps and after the last step;
    each record carries the most recent training step's losses.  When
    ``out_dir`` is given, metrics go to ``metrics.jsonl``, every loss report to
    ``losses.jsonl`` and checkpoints to ``checkpoint.bin``.
    """
    model = model or build_model(cfg)
    optimizer = optimizer or Adadelta(model.parameters())
    train_set = filter_trainable(train_set, cfg.max_label_len)
    sampler = BatchSampler(train_set, model.alphabet, cfg.batch_size, cfg.seed, cfg.augmentation(),
                           cfg.dtype)
    lam = cfg.effective_lambda
    result = TrainResult(model, optimizer, start_step)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    t0 = time.perf_counter()
    last: Optional[LossReport] = None
    for batch in prefetch(sampler, start_step, cfg.total_steps, cfg.prefetch):
        lr = lr_multiplier(batch.step, cfg.total_steps)
        last = train_step(model, optimizer, batch, lam, lr)
        result.reports.append(last)
        result.step = batch.step + 1
        if on_report:
            on_report(last)
        if out is not None:
            _append_json(out / "losses.jsonl", last.to_dict())
        done = result.step
        if test_set is not None and (done % cfg.eval_every == 0 or done == cfg.total_steps):
            rep = evaluate(model, test_set, cfg.eval_batch_size)
            rec = {"step": done, "acc_final": rep.acc_final, "acc_attn": rep.acc_attn,
                   "acc_ctc": rep.acc_ctc, "l_total": last.l_total, "l_attn": last.l_attn,
                   "l_ctc": last.l_ctc}
            result.metrics.append(rec)
            log.info("step %d: %s", done, rec)
            if on_metrics:
                on_metrics(rec)
            if out is not None:
                _append_json(out / "metrics.jsonl", rec)
        if out is not None and cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
            save_checkpoint(out / "checkpoint.bin", model, cfg, done, optimizer.state)
    if out is not None:
        save_checkpoint(out / "checkpoint.bin", model, cfg, result.step, optimizer.state)
    result.elapsed = time.perf_counter() - t0
    return result


def _append_json(path: Path, record: dict) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record) + "\n")


def load_metrics(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
