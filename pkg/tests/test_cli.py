import csv
import hashlib
import os
from pathlib import Path

import pytest

from dmnet.cli import (ConfigFileError, EXIT_CKPT, EXIT_CONFIG, EXIT_STREAM,
                       RunConfig, main)

TINY_CONFIG = """\
# tiny end-to-end settings
channels = 8
classes = 3
height = 32
width = 40
tau = 2
lstm_channels = 8
key_channels = 4
value_channels = 8
learning_rate = 1e-3
epochs = 1
clips_per_video = 1
part_mode = false
num_instruments = 2
video_length = 6
val_videos = 1
"""


def run(argv):
    """Invoke the CLI; returns its exit code."""
    try:
        return main(argv)
    except SystemExit as exc:
        return exc.code


def file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def tree_digest(root):
    return {p.relative_to(root).as_posix(): file_digest(p)
            for p in sorted(Path(root).rglob("*")) if p.is_file()}


@pytest.fixture()
def tiny_cfg_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(TINY_CONFIG)
    return str(path)


class TestRunConfig:
    def test_parse_serialize_round_trip(self):
        cfg = RunConfig.parse(TINY_CONFIG)
        again = RunConfig.parse(cfg.serialize())
        assert again.to_values() == cfg.to_values()

    def test_shared_keys_hit_every_section(self):
        cfg = RunConfig.parse("height=32\nwidth=40\nseed=9\n")
        assert cfg.model.height == cfg.scene.height == 32
        assert cfg.model.seed == cfg.scene.seed == 9

    def test_unknown_key(self):
        with pytest.raises(ConfigFileError, match="unknown config key"):
            RunConfig.parse("coolness=11\n")

    def test_missing_equals(self):
        with pytest.raises(ConfigFileError, match="key=value"):
            RunConfig.parse("just some words\n")

    @pytest.mark.parametrize("raw,expected", [("true", True), ("Yes", True),
                                              ("1", True), ("off", False),
                                              ("0", False), ("FALSE", False)])
    def test_bool_values(self, raw, expected):
        cfg = RunConfig.parse(f"use_aga={raw}\n")
        assert cfg.model.use_aga is expected

    def test_bad_bool(self):
        with pytest.raises(ConfigFileError, match="boolean"):
            RunConfig.parse("use_aga=maybe\n")

    def test_bad_number(self):
        with pytest.raises(ConfigFileError, match="cannot parse"):
            RunConfig.parse("tau=four\n")

    def test_invalid_field_value(self):
        with pytest.raises(ConfigFileError):
            RunConfig.parse("height=33\n")    # not divisible by 8

    def test_comments_and_blanks_ignored(self):
        cfg = RunConfig.parse("\n# comment\ntau=3  # inline\n\n")
        assert cfg.model.tau == 3


class TestGenData:
    def test_writes_video_dirs(self, tmp_path, tiny_cfg_file, capsys):
        out = tmp_path / "data"
        assert run(["gen-data", "--config", tiny_cfg_file,
                    "--out", str(out), "--videos", "2"]) == 0
        assert sorted(d.name for d in out.iterdir()) == ["video_000", "video_001"]
        assert "video_000" in capsys.readouterr().out

    def test_deterministic(self, tmp_path, tiny_cfg_file):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            run(["gen-data", "--config", tiny_cfg_file, "--out", str(out),
                 "--videos", "2"])
        assert tree_digest(a) == tree_digest(b)

    def test_seed_env_override_changes_data(self, tmp_path, tiny_cfg_file,
                                            monkeypatch):
        a, b = tmp_path / "a", tmp_path / "b"
        run(["gen-data", "--config", tiny_cfg_file, "--out", str(a),
             "--videos", "1"])
        monkeypatch.setenv("DMNET_SEED", "123")
        run(["gen-data", "--config", tiny_cfg_file, "--out", str(b),
             "--videos", "1"])
        assert tree_digest(a) != tree_digest(b)

    def test_bad_env_seed(self, tmp_path, tiny_cfg_file, monkeypatch):
        monkeypatch.setenv("DMNET_SEED", "abc")
        code = run(["gen-data", "--config", tiny_cfg_file,
                    "--out", str(tmp_path / "x"), "--videos", "1"])
        assert code == EXIT_CONFIG


class TestPipeline:
    @pytest.fixture()
    def data_dir(self, tmp_path, tiny_cfg_file):
        out = tmp_path / "data"
        run(["gen-data", "--config", tiny_cfg_file, "--out", str(out),
             "--videos", "3"])
        return str(out)

    @pytest.fixture()
    def ckpt(self, tmp_path, tiny_cfg_file, data_dir):
        path = tmp_path / "model.ckpt"
        code = run(["train", "--config", tiny_cfg_file, "--data", data_dir,
                    "--out", str(path)])
        assert code == 0
        return str(path)

    def test_train_writes_ckpt_and_log(self, tmp_path, tiny_cfg_file, data_dir,
                                       capsys):
        path = tmp_path / "fresh.ckpt"
        assert run(["train", "--config", tiny_cfg_file, "--data", data_dir,
                    "--out", str(path)]) == 0
        assert path.exists()
        with open(str(path) + ".log.csv", newline="") as fh:
            log = list(csv.DictReader(fh))
        assert [r["epoch"] for r in log] == ["1"]
        assert "final validation mIoU" in capsys.readouterr().out

    def test_train_refuses_overwrite(self, tmp_path, tiny_cfg_file, data_dir,
                                     ckpt):
        code = run(["train", "--config", tiny_cfg_file, "--data", data_dir,
                    "--out", ckpt])
        assert code == EXIT_CONFIG

    def test_eval_writes_metrics(self, tmp_path, data_dir, ckpt, capsys):
        out = tmp_path / "metrics.csv"
        assert run(["eval", "--ckpt", ckpt, "--data", data_dir,
                    "--out", str(out)]) == 0
        with open(out, newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert rows[-1]["class"] == "mean"
        assert "mIoU" in capsys.readouterr().out

    def test_eval_variant_can_switch_off(self, tmp_path, data_dir, ckpt):
        out = tmp_path / "m.csv"
        assert run(["eval", "--ckpt", ckpt, "--data", data_dir,
                    "--variant", "baseline", "--out", str(out)]) == 0

    def test_eval_variant_cannot_switch_on(self, tmp_path, tiny_cfg_file,
                                           data_dir):
        cfg = tmp_path / "base.cfg"
        cfg.write_text(TINY_CONFIG + "local_aggregator=none\nuse_aga=false\n")
        ckpt = tmp_path / "base.ckpt"
        run(["train", "--config", str(cfg), "--data", data_dir,
             "--out", str(ckpt)])
        code = run(["eval", "--ckpt", str(ckpt), "--data", data_dir,
                    "--variant", "full", "--out", str(tmp_path / "m.csv")])
        assert code == EXIT_CKPT

    def test_eval_missing_ckpt(self, tmp_path, data_dir):
        code = run(["eval", "--ckpt", str(tmp_path / "nope.ckpt"),
                    "--data", data_dir, "--out", str(tmp_path / "m.csv")])
        assert code == EXIT_CKPT

    def test_calibrate_persists_thresholds(self, data_dir, ckpt, capsys):
        from dmnet.model import DMNet
        before = DMNet.load(ckpt).cfg
        assert run(["calibrate", "--ckpt", ckpt, "--data", data_dir]) == 0
        after = DMNet.load(ckpt).cfg
        assert (after.alpha, after.beta) != (before.alpha, before.beta)
        assert "alpha=" in capsys.readouterr().out

    def test_stream(self, tmp_path, data_dir, ckpt):
        frames = Path(data_dir) / "video_000"
        out = tmp_path / "stream_out"
        assert run(["stream", "--ckpt", ckpt, "--in", str(frames),
                    "--out", str(out)]) == 0
        masks = sorted(out.glob("mask_*.pgm"))
        assert len(masks) == 6
        with open(out / "memory_trace.csv", newline="") as fh:
            trace = list(csv.DictReader(fh))
        assert [r["frame"] for r in trace] == [str(t) for t in range(6)]
        assert trace[0]["admitted"] == "1"        # first frame always admitted
        assert trace[0]["s"] == "-inf"

    def test_stream_rejects_gap(self, tmp_path, data_dir, ckpt):
        frames = tmp_path / "gappy"
        frames.mkdir()
        src = Path(data_dir) / "video_000"
        for i, name in enumerate(("frame_0.ppm", "frame_2.ppm")):
            (frames / name).write_bytes((src / f"frame_{i:05d}.ppm").read_bytes())
        code = run(["stream", "--ckpt", ckpt, "--in", str(frames),
                    "--out", str(tmp_path / "out")])
        assert code == EXIT_STREAM

    def test_stream_empty_dir(self, tmp_path, ckpt):
        empty = tmp_path / "empty"
        empty.mkdir()
        code = run(["stream", "--ckpt", ckpt, "--in", str(empty),
                    "--out", str(tmp_path / "out")])
        assert code == EXIT_STREAM


class TestBenchCommand:
    def test_unknown_grid(self, tmp_path, tiny_cfg_file):
        data = tmp_path / "data"
        run(["gen-data", "--config", tiny_cfg_file, "--out", str(data),
             "--videos", "2"])
        code = run(["bench", "--config", tiny_cfg_file, "--data", str(data),
                    "--grid", "nope", "--out", str(tmp_path / "b.csv")])
        assert code == EXIT_CONFIG

    def test_components_grid(self, tmp_path, tiny_cfg_file):
        data = tmp_path / "data"
        run(["gen-data", "--config", tiny_cfg_file, "--out", str(data),
             "--videos", "3"])
        out = tmp_path / "bench.csv"
        assert run(["bench", "--config", tiny_cfg_file, "--data", str(data),
                    "--grid", "components", "--seeds", "0",
                    "--repeats", "2", "--out", str(out)]) == 0
        with open(out, newline="") as fh:
            rows = list(csv.DictReader(fh))
        variants = [r["variant"] for r in rows]
        assert variants.count("full") == 2        # seed row + mean row
