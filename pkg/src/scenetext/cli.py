"""Command-line entry point: ``scenetext {synth,train,eval,recognize,gradcheck}``.

Exit codes: 0 success, 1 usage error, 2 runtime or data error, 3 verification failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .alphabet import Alphabet
from .augment import prepare
from .checkpoint import CheckpointError, load_model, read_checkpoint
from .config import ConfigError, RunConfig
from .data import DatasetError, TextDataset, load_image
from .synth import SynthSpec, synth_dataset

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3

log = logging.getLogger("scenetext")


class UsageError(Exception):
    pass


# -- commands (importable, raise on error) -------------------------------------

def cmd_synth(out_dir, charset: str = "digits", count: int = 1000, min_len: int = 1,
              max_len: int = 5, seed: int = 0, style: str = "plain",
              alphabet: str = "digits", overwrite: bool = False) -> Path:
    alpha = Alphabet.from_spec(alphabet)
    chars = Alphabet.from_spec(charset).chars if charset in ("digits", "full") else charset
    if count < 1:
        raise UsageError(f"count must be >= 1, got {count}")
    outside = sorted(alpha.unknown_chars(chars))
    if outside:
        raise UsageError(f"charset characters {outside} are not in the alphabet")
    try:
        return synth_dataset(SynthSpec(chars, min_len, max_len, count, seed, style), out_dir,
                             overwrite=overwrite)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_train(cfg: RunConfig, resume: Optional[str] = None, progress=None):
    from .optim import Adadelta
    from .trainer import build_model, train

    if not cfg.train_dir:
        raise UsageError("train_dir is not set")
    alphabet = cfg.make_alphabet()
    train_set = TextDataset.load(cfg.train_dir, alphabet)
    test_set = TextDataset.load(cfg.test_dir, alphabet) if cfg.test_dir else None
    for name, ds in (("train", train_set), ("test", test_set)):
        if ds is not None and (ds.skipped_alphabet or ds.skipped_unreadable):
            print(f"{name}: skipped {len(ds.skipped_alphabet)} out-of-alphabet labels, "
                  f"{len(ds.skipped_unreadable)} unreadable images", file=sys.stderr)
    model, optimizer, start = None, None, 0
    if resume:
        model, ckpt = load_model(resume)
        optimizer = Adadelta(model.parameters())
        if ckpt.optimizer is not None:
            optimizer.state = ckpt.optimizer
        start = ckpt.step
    elif model is None:
        model = build_model(cfg)
    return train(cfg, train_set, test_set, model=model, optimizer=optimizer, start_step=start,
                 out_dir=cfg.out_dir, on_metrics=progress)


def cmd_eval(checkpoint, data_dir, batch_size: int = 100) -> dict:
    from .trainer import evaluate

    model, _ = load_model(checkpoint)
    ds = TextDataset.load(data_dir, model.alphabet)
    rep = evaluate(model, ds, batch_size)
    return {"count": rep.count, "acc_final": rep.acc_final, "acc_attn": rep.acc_attn,
            "acc_ctc": rep.acc_ctc, "skipped_unreadable": rep.skipped,
            "skipped_alphabet": len(ds.skipped_alphabet)}


def _to_png(img: np.ndarray) -> Image.Image:
    return Image.fromarray((np.clip((img + 1.0) / 2.0, 0, 1) * 255 + 0.5).astype(np.uint8))


def _overlay(img: Image.Image, points: np.ndarray) -> Image.Image:
    from PIL import ImageDraw

    out = img.convert("RGB").resize((img.width * 4, img.height * 4), Image.NEAREST)
    draw = ImageDraw.Draw(out)
    for x, y in points:
        cx, cy = x * out.width, y * out.height
        draw.ellipse([cx - 3, cy - 3, cx + 3, cy + 3], outline=(255, 0, 0))
    return out


def cmd_recognize(checkpoint, paths: Sequence[str], dump_rectified: Optional[str] = None,
                  model=None) -> list[dict]:
    """One record per path: ``{"path", "final", "attn", "ctc"}`` or ``{"path", "error"}``."""
    if not paths:
        raise UsageError("no images given")
    if model is None:
        model, _ = load_model(checkpoint)
    model.eval()
    dump = Path(dump_rectified) if dump_rectified else None
    if dump is not None:
        dump.mkdir(parents=True, exist_ok=True)
    results = []
    for i, path in enumerate(paths):
        try:
            img = prepare(load_image(path))
        except (OSError, ValueError) as exc:
            results.append({"path": str(path), "error": str(exc)})
            continue
        batch = img[None].astype(model.dtype)
        out = model.forward(batch)
        attn, ctc = model.decode(out)
        a = model.alphabet.decode(attn[0]) if attn is not None else None
        c = model.alphabet.decode(ctc[0]) if ctc is not None else None
        results.append({"path": str(path), "final": a if a is not None else c, "attn": a, "ctc": c})
        if dump is not None:
            stem = f"{i:04d}_{Path(path).stem}"
            shown = out.rectified.data[0] if out.rectified is not None else img
            _to_png(shown).save(dump / f"{stem}_rectified.png")
            if out.source_points is not None:
                _overlay(_to_png(img), out.source_points.data[0]).save(dump / f"{stem}_points.png")
    return results


def cmd_gradcheck(preset: str = "toy", seed: int = 0, cases: int = 100, report=print) -> bool:
    from .gradsuite import end_to_end_case, run_suite

    results = run_suite(cases=cases, seed=seed, report=report)
    e2e = end_to_end_case(seed=seed, preset=preset)
    report(e2e.line())
    results.append(e2e)
    failed = [r.name for r in results if not r.passed]
    report(f"{'FAIL' if failed else 'PASS'}: {len(results) - len(failed)}/{len(results)} checks passed")
    return not failed


# -- argument parsing -----------------------------------------------------------

def _overrides(pairs: Sequence[str]) -> dict:
    out = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise UsageError(f"--set expects key=value, got {pair!r}")
        k, v = pair.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scenetext", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render a synthetic text-image dataset")
    s.add_argument("out_dir")
    s.add_argument("--charset", default="digits", help="'digits', 'full' or literal characters")
    s.add_argument("--alphabet", default="digits")
    s.add_argument("--count", type=int, default=1000)
    s.add_argument("--min-len", type=int, default=1)
    s.add_argument("--max-len", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--style", choices=("plain", "curved"), default="plain")

    t = sub.add_parser("train", help="train a recognizer")
    t.add_argument("--config", help="key = value config file")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    t.add_argument("--resume", help="checkpoint to continue from")

    e = sub.add_parser("eval", help="sequence accuracy of a checkpoint on a dataset")
    e.add_argument("checkpoint")
    e.add_argument("data_dir")
    e.add_argument("--batch-size", type=int, default=100)

    r = sub.add_parser("recognize", help="transcribe images")
    r.add_argument("checkpoint")
    r.add_argument("images", nargs="*")
    r.add_argument("--branches", action="store_true", help="also print the CTC transcript")
    r.add_argument("--dump-rectified", metavar="DIR", help="write rectified images here")

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g.add_argument("--preset", default="toy", choices=("toy", "full"))
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--cases", type=int, default=100)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except RuntimeError as exc:  # includes training divergence
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def _dispatch(args) -> int:
    if args.command == "synth":
        path = cmd_synth(args.out_dir, args.charset, args.count, args.min_len, args.max_len,
                         args.seed, args.style, args.alphabet)
        print(path)
        return EXIT_OK
    if args.command == "train":
        overrides = _overrides(args.set)
        if args.config:
            cfg = RunConfig.load(args.config, overrides)
        elif args.resume:
            cfg = read_checkpoint(args.resume).config
            cfg = RunConfig.from_dict({**cfg.to_dict(), **overrides})
        else:
            cfg = RunConfig.from_dict(overrides)
        result = cmd_train(cfg, args.resume,
                           progress=lambda rec: print(json.dumps(rec), flush=True))
        print(f"trained to step {result.step} in {result.elapsed:.0f}s; "
              f"checkpoint in {cfg.out_dir}", file=sys.stderr)
        return EXIT_OK
    if args.command == "eval":
        print(json.dumps(cmd_eval(args.checkpoint, args.data_dir, args.batch_size)))
        return EXIT_OK
    if args.command == "recognize":
        results = cmd_recognize(args.checkpoint, args.images, args.dump_rectified)
        failed = 0
        for rec in results:
            if "error" in rec:
                failed += 1
                print(f"{rec['path']}: error: {rec['error']}", file=sys.stderr)
            elif args.branches:
                print(f"{rec['path']}\t{rec['final']}\tctc={rec['ctc']}")
            else:
                print(f"{rec['path']}\t{rec['final']}")
        return EXIT_RUNTIME if failed else EXIT_OK
    if args.command == "gradcheck":
        ok = cmd_gradcheck(args.preset, args.seed, args.cases)
        return EXIT_OK if ok else EXIT_VERIFY
    raise UsageError(f"unknown command {args.command}")  # pragma: no cover


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
