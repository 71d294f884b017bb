import json

import numpy as np
import pytest
from PIL import Image

from scenetext import cli
from scenetext.checkpoint import (MAGIC, CheckpointError, load_model, read_checkpoint,
                                  save_checkpoint)
from scenetext.config import ConfigError, RunConfig
from scenetext.gradcheck import CheckResult
from scenetext.gradsuite import FAMILIES, run_family, run_suite
from scenetext.optim import Adadelta
from scenetext.tensor import Tape
from scenetext.trainer import build_model, evaluate


# -- config ---------------------------------------------------------------------

def test_config_parse_with_comments_and_overrides():
    text = "# run\npreset = toy\nlambda = 0.25  # weight\nuse_rectifier = false\n\nseed=3\n"
    cfg = RunConfig.parse(text, {"seed": "4"})
    assert cfg.lam == 0.25 and cfg.use_rectifier is False and cfg.seed == 4


@pytest.mark.parametrize("text", ["bogus = 1", "batch_size = many", "preset = huge",
                                  "no equals sign", "num_control_points = 5", "lambda = nan"])
def test_config_rejects_bad_input(text):
    with pytest.raises(ConfigError):
        RunConfig.parse(text)


def test_config_text_round_trip():
    cfg = RunConfig(lam=0.3, branches="attn", augment_color=False, alphabet="abc")
    assert RunConfig.parse(cfg.to_text()) == cfg


def test_single_branch_lambda():
    assert RunConfig(branches="dual", lam=0.1).effective_lambda == 0.1
    assert RunConfig(branches="attn").effective_lambda == 0.0
    assert RunConfig(branches="ctc").effective_lambda == 1.0


# -- checkpoints ----------------------------------------------------------------

@pytest.fixture
def trained(tmp_path):
    """A float64 toy model after one optimizer step, saved to disk."""
    cfg = RunConfig(precision="float64", seed=2)
    model = build_model(cfg)
    opt = Adadelta(model.parameters())
    x = np.random.default_rng(0).uniform(-1, 1, size=(2, 32, 100, 3))
    with Tape() as tape:
        la, lc = model.losses(model.forward(x), [[1, 2], [3]])
        loss = la + lc * 0.1
    tape.backward(loss)
    opt.step(1.0)
    path = save_checkpoint(tmp_path / "ckpt.bin", model, cfg, 7, opt.state)
    return model, opt, cfg, path


def test_checkpoint_round_trip_is_bit_exact(trained):
    model, opt, cfg, path = trained
    loaded, ckpt = load_model(path)
    assert ckpt.step == 7 and ckpt.config == cfg and path.read_bytes()[:8] == MAGIC
    for (name, a), (name2, b) in zip(model.state_dict().items(), loaded.state_dict().items()):
        assert name == name2 and a.dtype == b.dtype and np.array_equal(a, b)
    for a, b in zip(opt.state.sq_grad + opt.state.sq_delta, ckpt.optimizer.sq_grad + ckpt.optimizer.sq_delta):
        assert np.array_equal(a, b)
    assert ckpt.optimizer.steps == 1


def test_checkpoint_preserves_evaluation(trained, tmp_path):
    from scenetext.synth import SynthSpec, in_memory
    from scenetext.data import TextDataset

    model, _, _, path = trained
    images, texts = in_memory(SynthSpec("0123456789", 1, 3, 4, seed=5))
    ds = TextDataset.from_arrays(list(images), texts)
    loaded, _ = load_model(path)
    a, b = evaluate(model, ds), evaluate(loaded, ds)
    assert a.predictions == b.predictions and a.acc_final == b.acc_final


def test_checkpoint_name_set_must_match(trained, tmp_path):
    model, _, cfg, _ = trained
    other = build_model(cfg.replace(branches="attn"))
    path = save_checkpoint(tmp_path / "attn.bin", other, cfg, 0)  # config says dual
    with pytest.raises(CheckpointError):
        load_model(path)


@pytest.mark.parametrize("mutate", [lambda b: b"XXXXXXXX" + b[8:], lambda b: b[:-3],
                                    lambda b: b + b"\0"])
def test_corrupt_checkpoints_rejected(trained, tmp_path, mutate):
    path = tmp_path / "bad.bin"
    path.write_bytes(mutate(trained[3].read_bytes()))
    with pytest.raises(CheckpointError):
        read_checkpoint(path)


# -- commands -------------------------------------------------------------------

def test_synth_command_and_errors(tmp_path, capsys):
    assert cli.main(["synth", str(tmp_path / "a"), "--count", "5", "--seed", "1"]) == cli.EXIT_OK
    assert cli.main(["synth", str(tmp_path / "b"), "--count", "5", "--seed", "1"]) == cli.EXIT_OK
    for f in ("labels.tsv", "images/000004.png"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert cli.main(["synth", str(tmp_path / "c"), "--count", "0"]) == cli.EXIT_USAGE
    assert cli.main(["synth", str(tmp_path / "c"), "--charset", "abc"]) == cli.EXIT_USAGE
    assert cli.main(["synth", str(tmp_path / "a"), "--count", "5"]) == cli.EXIT_RUNTIME
    assert cli.main(["nonsense"]) == cli.EXIT_USAGE


def _image(path, value=128):
    Image.fromarray(np.full((32, 100, 3), value, np.uint8)).save(path)
    return str(path)


def test_recognize_final_is_attention_decode(trained, tmp_path, capsys):
    model, _, _, ckpt = trained
    paths = [_image(tmp_path / f"{i}.png", 40 * i) for i in range(3)]
    results = cli.cmd_recognize(ckpt, paths)
    loaded, _ = load_model(ckpt)
    for rec, p in zip(results, paths):
        from scenetext.augment import prepare
        from scenetext.data import load_image

        out = loaded.forward(prepare(load_image(p))[None])
        attn, _ = loaded.decode(out)
        assert rec["final"] == rec["attn"] == loaded.alphabet.decode(attn[0])
    assert cli.main(["recognize", str(ckpt), *paths, "--branches"]) == cli.EXIT_OK
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 3 and all("ctc=" in line for line in lines)


def test_recognize_continues_after_bad_file(trained, tmp_path, capsys):
    ckpt = trained[3]
    good = _image(tmp_path / "ok.png")
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"not an image")
    code = cli.main(["recognize", str(ckpt), str(bad), good])
    captured = capsys.readouterr()
    assert code == cli.EXIT_RUNTIME
    assert "ok.png" in captured.out and "bad.png" in captured.err


def test_recognize_usage_errors(trained, tmp_path):
    assert cli.main(["recognize", str(trained[3])]) == cli.EXIT_USAGE
    missing = tmp_path / "nope.bin"
    assert cli.main(["recognize", str(missing), _image(tmp_path / "x.png")]) == cli.EXIT_RUNTIME


def test_dump_rectified(trained, tmp_path):
    out = tmp_path / "dump"
    cli.cmd_recognize(trained[3], [_image(tmp_path / "a.png")], dump_rectified=str(out))
    names = sorted(p.name for p in out.iterdir())
    assert names == ["0000_a_points.png", "0000_a_rectified.png"]
    assert Image.open(out / names[1]).size == (100, 32)


def test_train_eval_and_resume(tmp_path, capsys):
    assert cli.main(["synth", str(tmp_path / "tr"), "--count", "6", "--max-len", "3"]) == 0
    with open(tmp_path / "tr" / "labels.tsv", "a", encoding="utf-8") as fh:
        fh.write("images/000000.png\tAB\n")
    capsys.readouterr()
    conf = tmp_path / "run.conf"
    conf.write_text(f"train_dir = {tmp_path / 'tr'}\ntest_dir = {tmp_path / 'tr'}\n"
                    f"out_dir = {tmp_path / 'run'}\nbatch_size = 2\ntotal_steps = 2\n"
                    "eval_every = 1\neval_batch_size = 6\nprecision = float64\nprefetch = 0\n")
    assert cli.main(["train", "--config", str(conf)]) == cli.EXIT_OK
    captured = capsys.readouterr()
    assert "skipped 1 out-of-alphabet" in captured.err
    records = [json.loads(l) for l in captured.out.splitlines()]
    assert [r["step"] for r in records] == [1, 2]
    ckpt = tmp_path / "run" / "checkpoint.bin"
    assert read_checkpoint(ckpt).step == 2

    assert cli.main(["train", "--resume", str(ckpt), "--set", "total_steps=4"]) == cli.EXIT_OK
    out = [json.loads(l) for l in capsys.readouterr().out.splitlines()]
    assert [r["step"] for r in out] == [3, 4]
    assert read_checkpoint(ckpt).step == 4 and read_checkpoint(ckpt).optimizer.steps == 4

    assert cli.main(["eval", str(ckpt), str(tmp_path / "tr")]) == cli.EXIT_OK
    report = json.loads(capsys.readouterr().out)
    assert report["count"] == 6 and report["skipped_alphabet"] == 1

    assert cli.main(["train", "--set", "bogus=1"]) == cli.EXIT_USAGE
    assert cli.main(["train", "--set", "total_steps=1"]) == cli.EXIT_USAGE  # no train_dir


def test_train_divergence_exits_nonzero(tmp_path, monkeypatch):
    from scenetext import trainer

    cli.main(["synth", str(tmp_path / "tr"), "--count", "2"])
    monkeypatch.setattr(trainer, "lr_multiplier", lambda step, total: float("nan"))
    code = cli.main(["train", "--set", f"train_dir={tmp_path / 'tr'}", "--set", "total_steps=2",
                     "--set", "batch_size=2", "--set", f"out_dir={tmp_path / 'run'}"])
    assert code == cli.EXIT_RUNTIME


# -- gradient suite self-test -----------------------------------------------------

def test_report_lists_each_family():
    lines = []
    results = run_suite(cases=1, families=["elementwise", "softmax"], report=lines.append)
    assert [r.name for r in results] == ["elementwise", "softmax"]
    assert "elementwise" in lines[0] and "max_rel_err" in lines[0]
    assert all(r.passed for r in results)


def test_corrupted_gradient_is_reported():
    from scenetext import ops
    from scenetext.gradcheck import check
    from scenetext.tensor import record

    def bad_tanh(x):
        # correct forward, gradient off by 1%
        return record(np.tanh(x.data), (x,), lambda g: (g * (1 - np.tanh(x.data) ** 2) * 1.01,))

    def case(rng):
        return check(bad_tanh, [rng.normal(size=(3, 4))])

    lines = []
    results = run_suite(cases=3, families=["softmax"], extra={"corrupted": case}, report=lines.append)
    assert [r.passed for r in results] == [True, False]
    assert "FAIL" in lines[-1] and "corrupted" in lines[-1]
