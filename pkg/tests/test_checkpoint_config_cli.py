import json
import logging
import struct
from dataclasses import replace

import numpy as np
import pytest
from PIL import Image

from rehit import nn
from rehit.checkpoint import (MAGIC, CheckpointError, config_path, decode, encode, load_into,
                              load_model, save_checkpoint)
from rehit.cli import EXIT_CHECKPOINT, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_OK, main, pad_to_multiple
from rehit.config import ConfigError, load_config, parse_override
from rehit.model import TINY, build_model
from rehit.training import TrainConfig, predict


def _write_rgb(path, arr):
    Image.fromarray(arr.astype(np.uint8), mode="RGB").save(path)


class TestCheckpointFormat:
    def test_layout(self):
        blob = encode([("w", np.array([[1.0, 2.0]], dtype=np.float32))])
        expected = (MAGIC + b"\x01" + struct.pack("<I", 1) + b"w" + b"\x00\x02"
                    + struct.pack("<2I", 1, 2) + np.array([1.0, 2.0], "<f4").tobytes()
                    + struct.pack("<Q", 1))
        assert blob == expected

    def test_round_trip(self, rng):
        records = [("a.b", rng.standard_normal((2, 3))), ("c", rng.standard_normal(4).astype(np.float32)),
                   ("scalar", np.array(1.5))]
        out = decode(encode(records))
        assert [n for n, _ in out] == ["a.b", "c", "scalar"]
        for (_, a), (_, b) in zip(records, out):
            assert a.dtype == b.dtype and np.array_equal(a, b)

    @pytest.mark.parametrize("mutate,match", [
        (lambda b: b"XXXX" + b[4:], "magic"),
        (lambda b: b[:4] + b"\x07" + b[5:], "version"),
        (lambda b: b[:-20] + b[-8:], "past end"),
        (lambda b: b[:-8] + struct.pack("<Q", 5), "count"),
        (lambda b: b[:6], "truncated"),
    ])
    def test_corruption_detected(self, rng, mutate, match):
        blob = encode([("w", rng.standard_normal((3, 3)))])
        with pytest.raises(CheckpointError, match=match):
            decode(mutate(blob))

    def test_unsupported_dtype(self):
        with pytest.raises(CheckpointError, match="dtype"):
            encode([("i", np.arange(3))])


class TestCheckpointModel:
    def test_save_load_save_identical(self, tmp_path, rng):
        model = build_model(TINY, 2)
        nn.randomize_(model, rng, 0.05)
        save_checkpoint(model, tmp_path / "a.reht", TINY)
        save_checkpoint(load_model(tmp_path / "a.reht"), tmp_path / "b.reht", TINY)
        assert (tmp_path / "a.reht").read_bytes() == (tmp_path / "b.reht").read_bytes()
        assert config_path(tmp_path / "a.reht").read_text() == config_path(tmp_path / "b.reht").read_text()

    def test_reloaded_inference_exact(self, tmp_path, rng):
        model = build_model(TINY, 2)
        nn.randomize_(model, rng, 0.05)
        save_checkpoint(model, tmp_path / "m.reht", TINY)
        x = rng.uniform(0, 1, (1, 3, 16, 16))
        assert np.array_equal(predict(model, x), predict(load_model(tmp_path / "m.reht"), x))

    def test_shape_mismatch(self, tmp_path):
        save_checkpoint(build_model(TINY), tmp_path / "m.reht")
        with pytest.raises(CheckpointError):
            load_into(build_model(replace(TINY, base_channels=4, heads=(1, 1, 1))), tmp_path / "m.reht")

    def test_name_mismatch(self, tmp_path):
        save_checkpoint(build_model(TINY), tmp_path / "m.reht")
        with pytest.raises(CheckpointError, match="names"):
            load_into(build_model(replace(TINY, dual_branch=False)), tmp_path / "m.reht")

    def test_missing_sidecar(self, tmp_path):
        save_checkpoint(build_model(TINY), tmp_path / "m.reht")
        with pytest.raises(CheckpointError, match="sidecar"):
            load_model(tmp_path / "m.reht")

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_into(build_model(TINY), tmp_path / "none.reht")


class TestConfig:
    def test_defaults(self):
        cfg = load_config()
        assert cfg.train == TrainConfig() and cfg.model.base_channels == 48 and cfg.mode == "fast"

    def test_file_and_relative_paths(self, tmp_path):
        (tmp_path / "run.toml").write_text(
            'mode = "verify"\n[model]\nbase_channels = 8\nheads = [1, 2, 4]\n'
            '[train]\niters = 7\n[paths]\nmanifest = "data/m.tsv"\nout_dir = "/abs/out"\n')
        cfg = load_config(tmp_path / "run.toml")
        assert cfg.mode == "verify" and cfg.model.heads == (1, 2, 4) and cfg.train.iters == 7
        assert cfg.paths.manifest == tmp_path / "data" / "m.tsv"
        assert str(cfg.paths.out_dir) == "/abs/out"

    def test_overrides(self):
        cfg = load_config(None, ["train.lr_start=2e-3", "model.bins=4", "train.schedule=linear"])
        assert cfg.train.lr_start == 2e-3 and cfg.model.bins == 4 and cfg.train.schedule == "linear"

    def test_parse_override(self):
        assert parse_override("a.b=[1, 2]") == (["a", "b"], [1, 2])
        assert parse_override("a.b=hello") == (["a", "b"], "hello")
        with pytest.raises(ConfigError):
            parse_override("novalue")

    @pytest.mark.parametrize("text,match", [
        ("[model]\nwidth = 3\n", "width"),
        ("bogus = 1\n", "bogus"),
        ("mode = 'turbo'\n", "mode"),
        ("[train]\ncrop = 30\n", "crop"),
        ("[model\n", "c.toml"),
        ("model = 3\n", "table"),
    ])
    def test_rejected(self, tmp_path, text, match):
        (tmp_path / "c.toml").write_text(text)
        with pytest.raises(ConfigError, match=match):
            load_config(tmp_path / "c.toml")

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.toml")


class TestPadding:
    @pytest.mark.parametrize("h,w", [(100, 100), (101, 98), (5, 7), (1, 1), (16, 20)])
    def test_pad_then_crop(self, h, w, rng):
        img = rng.uniform(0, 1, (1, 3, h, w))
        padded, oh, ow = pad_to_multiple(img)
        ph, pw = padded.shape[-2:]
        assert (oh, ow) == (h, w) and ph % 4 == 0 and pw % 4 == 0 and min(ph, pw) >= 16
        assert np.array_equal(padded[..., :h, :w], img)


@pytest.fixture
def trained(tmp_path):
    """Synthetic data, a two-step training run and its final checkpoint."""
    assert main(["synth", "--n", "2", "--size", "16", "--seed", "1", "--out", str(tmp_path / "data")]) == 0
    (tmp_path / "run.toml").write_text(
        "[model]\nbase_channels = 8\nbins = 4\n[train]\ncrop = 16\nbatch = 1\niters = 2\nlog_interval = 1\n"
        '[paths]\nmanifest = "data/manifest.tsv"\nout_dir = "run"\n')
    assert main(["train", "--config", str(tmp_path / "run.toml")]) == 0
    return tmp_path


class TestCLI:
    def test_train_outputs(self, trained, capsys):
        run = trained / "run"
        assert (run / "ckpt_2.reht").is_file() and (run / "ckpt_2.reht.json").is_file()
        assert len((run / "train.log").read_text().splitlines()) == 2

    def test_infer_preserves_dims(self, trained, tmp_path, rng):
        src = tmp_path / "in"
        src.mkdir()
        _write_rgb(src / "big.png", rng.integers(0, 256, (100, 100, 3)))
        _write_rgb(src / "odd.ppm", rng.integers(0, 256, (13, 9, 3)))
        args = ["infer", "--checkpoint", str(trained / "run" / "ckpt_2.reht"), "--input", str(src)]
        assert main(args + ["--output", str(tmp_path / "o1")]) == 0
        assert Image.open(tmp_path / "o1" / "big.png").size == (100, 100)
        assert Image.open(tmp_path / "o1" / "odd.ppm").size == (9, 13)
        assert main(args + ["--output", str(tmp_path / "o2")]) == 0
        for name in ("big.png", "odd.ppm"):
            assert (tmp_path / "o1" / name).read_bytes() == (tmp_path / "o2" / name).read_bytes()

    def test_infer_empty_dir(self, trained, tmp_path, caplog):
        (tmp_path / "empty").mkdir()
        with caplog.at_level(logging.WARNING, logger="rehit"):
            code = main(["infer", "--checkpoint", str(trained / "run" / "ckpt_2.reht"),
                         "--input", str(tmp_path / "empty"), "--output", str(tmp_path / "out")])
        assert code == EXIT_OK and "no PNG/PPM" in caplog.text
        assert list((tmp_path / "out").iterdir()) == []

    def test_infer_bad_checkpoint(self, tmp_path):
        (tmp_path / "x.reht").write_bytes(b"garbage")
        (tmp_path / "in").mkdir()
        assert main(["infer", "--checkpoint", str(tmp_path / "x.reht"), "--input", str(tmp_path / "in"),
                     "--output", str(tmp_path / "o")]) == EXIT_CHECKPOINT

    def test_eval(self, trained, tmp_path, capsys):
        gt = trained / "data" / "target"
        assert main(["eval", "--pred", str(gt), "--gt", str(gt), "--csv", str(tmp_path / "r.csv")]) == 0
        assert "99.000" in capsys.readouterr().out
        assert (tmp_path / "r.csv").read_text().splitlines()[0] == "id,psnr_db,ssim"

    def test_eval_mismatch(self, trained, capsys):
        assert main(["eval", "--pred", str(trained / "data" / "input"),
                     "--gt", str(trained / "data" / "decomp")]) == EXIT_DATA
        assert "0000" in capsys.readouterr().err

    def test_train_config_error(self, tmp_path):
        (tmp_path / "bad.toml").write_text("[train]\nlearning_rate = 1\n")
        assert main(["train", "--config", str(tmp_path / "bad.toml")]) == EXIT_CONFIG

    def test_train_crop_too_large(self, trained):
        assert main(["train", "--config", str(trained / "run.toml"), "--set", "train.crop=32"]) == EXIT_DATA

    def test_synth_reproducible(self, tmp_path, capsys):
        for d in ("a", "b"):
            assert main(["synth", "--n", "1", "--size", "16", "--out", str(tmp_path / d)]) == 0
        for rel in ("input/0000.png", "target/0000.png", "manifest.tsv"):
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_synth_invalid(self, tmp_path):
        assert main(["synth", "--attenuation", "1.5", "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_inspect(self, capsys):
        assert main(["inspect", "--set", "model.base_channels=8", "--height", "16", "--width", "16",
                     "--measure"]) == 0
        out = capsys.readouterr().out
        assert '"base_channels": 8' in out and "ratio to 17.5 M reference" in out
        analytic = int(out.split("flops @ 16x16: ")[1].split(" ")[0].replace(",", ""))
        measured = int(out.split("measured flops: ")[1].split()[0].replace(",", ""))
        assert analytic == measured

    def test_gradcheck_fault_injection(self, capsys):
        assert main(["gradcheck", "--scope", "ops", "--fault", "relu"]) == EXIT_NUMERIC
        out = capsys.readouterr().out
        assert "FAIL ops    relu" in out and "PASS ops    sigmoid" in out

    def test_gradcheck_unknown_fault(self):
        assert main(["gradcheck", "--fault", "nosuchop"]) == EXIT_CONFIG

    def test_gradcheck_ops_pass(self, capsys):
        assert main(["gradcheck", "--scope", "ops"]) == EXIT_OK
        assert "FAIL" not in capsys.readouterr().out

    def test_sidecar_is_json(self, trained):
        cfg = json.loads((trained / "run" / "ckpt_2.reht.json").read_text())
        assert cfg["base_channels"] == 8 and cfg["bins"] == 4
