import subprocess
import sys

import numpy as np
import pytest
import torch

from sparsecycle.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main, parse_overrides, UsageError
from sparsecycle.config import TrainConfig, all_keys
from sparsecycle.data import load_image, save_image
from sparsecycle.metrics import psnr, to_unit_range
from sparsecycle.networks import NetworkSpec
from sparsecycle.training import Trainer


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_make_dataset_deterministic(tmp_path):
    args = ["make-dataset", "--n", "3", "--size", "16", "--blur-len", "5", "--seed", "2"]
    assert main(args + ["--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(args + ["--out", str(tmp_path / "b")]) == EXIT_OK
    a = tree_bytes(tmp_path / "a")
    assert a == tree_bytes(tmp_path / "b")
    assert sorted(a) == ["blur/0000.ppm", "blur/0001.ppm", "blur/0002.ppm", "manifest.txt",
                         "sharp/0000.ppm", "sharp/0001.ppm", "sharp/0002.ppm"]
    assert "blur_len = 5" in a["manifest.txt"].decode()


def test_make_dataset_empty_and_long_blur(tmp_path):
    assert main(["make-dataset", "--out", str(tmp_path / "e"), "--n", "0"]) == EXIT_OK
    assert sorted(tree_bytes(tmp_path / "e")) == ["manifest.txt"]
    assert (tmp_path / "e" / "blur").is_dir()
    # the long horizontal blur of the motivating example
    assert main(["make-dataset", "--out", str(tmp_path / "l"), "--n", "1", "--size", "128",
                 "--blur-len", "96", "--blur-angle", "0"]) == EXIT_OK


def test_usage_errors(capsys, tmp_path):
    assert main([]) == EXIT_USAGE
    assert main(["bogus"]) == EXIT_USAGE
    assert main(["make-dataset"]) == EXIT_USAGE
    assert main(["eval", "--pred", "a", "--ref", "b", "--extra"]) == EXIT_USAGE
    assert main(["train", "net.nope=1", f"data={tmp_path}"]) == EXIT_USAGE
    assert "net.nope" in capsys.readouterr().err
    assert main(["train", "train.epochs=zero", f"data={tmp_path}"]) == EXIT_USAGE
    assert main(["train", "train.epochs=1"]) == EXIT_USAGE
    assert main(["train", "--config", str(tmp_path / "missing.cfg")]) == EXIT_USAGE


def test_parse_overrides_forms():
    assert parse_overrides(["a=1", "--b", "2", "--c=3"]) == {"a": "1", "b": "2", "c": "3"}
    with pytest.raises(UsageError):
        parse_overrides(["--dangling"])
    with pytest.raises(UsageError):
        parse_overrides(["loose"])


def test_train_help_lists_every_key(capsys):
    with pytest.raises(SystemExit) as info:
        main(["train", "--help"])
    assert info.value.code == 0
    out = capsys.readouterr().out
    for key in all_keys():
        assert key in out


def test_desk_smoke_train_and_resume(tmp_path, capsys):
    data = tmp_path / "data"
    assert main(["make-dataset", "--out", str(data), "--n", "2", "--size", "32"]) == EXIT_OK
    cfg = tmp_path / "desk.cfg"
    cfg.write_text("preset = desk\nablation = full\ntrain.epochs = 2\ntrain.decay_start_epoch = 1\n")
    run = tmp_path / "run"
    code = main(["train", "--config", str(cfg), f"data={data}", "--out", str(run), "save_every=1"])
    assert code == EXIT_OK
    assert {"config.txt", "loss.csv", "epoch0001.ckpt", "epoch0002.ckpt", "final.ckpt"} <= {
        p.name for p in run.iterdir()
    }
    resolved = (run / "config.txt").read_text()
    assert "net.base_channels = 8" in resolved and "train.epochs = 2" in resolved
    rows = (run / "loss.csv").read_text().splitlines()
    assert rows[0] == "epoch,step,loss_g,loss_dx,loss_dy,cyc,perc,adv,gp"
    assert len(rows) == 1 + 2 * 2
    assert all(np.isfinite([float(v) for v in r.split(",")]).all() for r in rows[1:])

    # resume from epoch 1 into a fresh directory reproduces epoch 2
    run2 = tmp_path / "run2"
    code = main(["train", "--config", str(cfg), f"data={data}", f"out={run2}",
                 f"resume={run / 'epoch0001.ckpt'}"])
    assert code == EXIT_OK
    assert (run2 / "loss.csv").read_text().splitlines()[1:] == rows[3:]
    assert (run2 / "final.ckpt").read_bytes() == (run / "final.ckpt").read_bytes()


def test_train_non_finite_exit_code(tmp_path):
    data = tmp_path / "data"
    main(["make-dataset", "--out", str(data), "--n", "1", "--size", "32"])
    code = main(["train", "preset=desk", f"data={data}", f"out={tmp_path / 'r'}",
                 "train.epochs=1", "train.decay_start_epoch=0", "train.lr0=1e30", "train.lambda_gp=1e30"])
    assert code == EXIT_NUMERIC


def _identity_checkpoint(path, size=32):
    tr = Trainer(NetworkSpec(), TrainConfig(epochs=1, decay_start_epoch=0), (3, size, size))
    last = tr.g_x.decoder[-2]
    with torch.no_grad():
        last.weight.zero_()
        last.bias.zero_()
    tr.save_checkpoint(path)


def test_deblur_identity_checkpoint(tmp_path, rng):
    ckpt = tmp_path / "id.ckpt"
    _identity_checkpoint(ckpt)
    src = tmp_path / "in"
    src.mkdir()
    for i in range(2):
        save_image(src / f"{i}.ppm", rng.uniform(-1, 1, (3, 32, 32)))
    save_image(src / "other_size.ppm", rng.uniform(-1, 1, (3, 16, 24)))
    assert main(["deblur", "--ckpt", str(ckpt), "--in", str(src), "--out", str(tmp_path / "out")]) == EXIT_OK
    for i in range(2):
        assert (tmp_path / "out" / f"{i}.ppm").read_bytes() == (src / f"{i}.ppm").read_bytes()
    assert (tmp_path / "out" / "other_size.ppm").read_bytes() == (src / "other_size.ppm").read_bytes()


def test_deblur_skips_bad_inputs(tmp_path, rng, caplog):
    ckpt = tmp_path / "id.ckpt"
    _identity_checkpoint(ckpt)
    src = tmp_path / "in"
    src.mkdir()
    save_image(src / "good.ppm", rng.uniform(-1, 1, (3, 32, 32)))
    save_image(src / "odd.ppm", rng.uniform(-1, 1, (3, 30, 32)))
    save_image(src / "gray.pgm", rng.uniform(-1, 1, (1, 32, 32)))
    (src / "broken.ppm").write_bytes(b"P6\n4 4\n255\n")
    out = tmp_path / "out"
    assert main(["deblur", "--ckpt", str(ckpt), "--in", str(src), "--out", str(out)]) == EXIT_DATA
    assert sorted(p.name for p in out.iterdir()) == ["good.ppm"]
    assert "odd.ppm" in caplog.text and "broken.ppm" in caplog.text


def test_deblur_empty_dir(tmp_path):
    ckpt = tmp_path / "id.ckpt"
    _identity_checkpoint(ckpt)
    (tmp_path / "in").mkdir()
    assert main(["deblur", "--ckpt", str(ckpt), "--in", str(tmp_path / "in"), "--out", str(tmp_path / "out")]) == EXIT_OK
    assert list((tmp_path / "out").iterdir()) == []


def test_eval_identical_offset_and_oracle(tmp_path, rng, capsys):
    pred, ref = tmp_path / "pred", tmp_path / "ref"
    pred.mkdir()
    ref.mkdir()
    images = {f"{i}.ppm": rng.uniform(-1, 1, (3, 24, 24)) for i in range(3)}
    for name, img in images.items():
        save_image(pred / name, img)
        save_image(ref / name, img)
    assert main(["eval", "--pred", str(pred), "--ref", str(ref), "--tsv", "-"]) == EXIT_OK
    rows = [r.split("\t") for r in capsys.readouterr().out.splitlines() if "\t" in r]
    assert all(float(r[1]) == 99.0 and float(r[2]) == 1.0 for r in rows)

    # pixel offset of 51 / 255 = 0.2 on [0, 1] data gives exactly 20 log10(5) dB
    flat_ref = np.full((3, 16, 16), 100, dtype=np.uint8)
    (tmp_path / "p2").mkdir()
    (tmp_path / "r2").mkdir()
    for root, px in (("p2", flat_ref + 51), ("r2", flat_ref)):
        save_image(tmp_path / root / "a.ppm", 2.0 * px / 255.0 - 1.0)
    tsv = tmp_path / "m.tsv"
    assert main(["eval", "--pred", str(tmp_path / "p2"), "--ref", str(tmp_path / "r2"), "--tsv", str(tsv)]) == EXIT_OK
    assert float(tsv.read_text().split("\t")[1]) == pytest.approx(20 * np.log10(5), abs=1e-6)

    # random directory against the metrics module
    for name in images:
        save_image(pred / name, np.clip(images[name] + 0.1 * rng.standard_normal((3, 24, 24)), -1, 1))
    main(["eval", "--pred", str(pred), "--ref", str(ref), "--tsv", str(tsv)])
    got = {r.split("\t")[0]: float(r.split("\t")[1]) for r in tsv.read_text().splitlines()}
    for name in images:
        want = psnr(to_unit_range(load_image(pred / name)), to_unit_range(load_image(ref / name)))
        assert got[name] == pytest.approx(want, abs=1e-6)


def test_eval_unmatched_exit_code(tmp_path, capsys):
    for d in ("p", "r"):
        (tmp_path / d).mkdir()
    save_image(tmp_path / "p" / "a.ppm", np.zeros((3, 16, 16)))
    save_image(tmp_path / "r" / "b.ppm", np.zeros((3, 16, 16)))
    assert main(["eval", "--pred", str(tmp_path / "p"), "--ref", str(tmp_path / "r")]) == EXIT_DATA
    err = capsys.readouterr().err
    assert "unmatched: a.ppm" in err and "unmatched: b.ppm" in err


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--seed", "0"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "conv2d" in out and "gradient_penalty" in out
    assert main(["gradcheck", "--cases", "2", "--corrupt", "tanh"]) == EXIT_NUMERIC
    assert "tanh" in capsys.readouterr().err
    assert main(["gradcheck", "--corrupt", "nonexistent"]) == EXIT_USAGE


def test_module_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "sparsecycle", "make-dataset", "--out", str(tmp_path / "d"), "--n", "1"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    proc = subprocess.run([sys.executable, "-m", "sparsecycle", "nope"], capture_output=True, text=True)
    assert proc.returncode == 64
