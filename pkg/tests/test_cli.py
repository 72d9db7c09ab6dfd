import csv
import json
import math

import pytest

from cuetrack.cli import (EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, default_run_config, load_run_config, main,
                          merge_config, parse_assignment, parse_grid)
from cuetrack.evaluation import evaluate
from cuetrack.scene_model import ConfigError, ingest_detections

SMALL = ["--set", "train.d_model=8", "--set", "train.n_geo_layers=1", "--set", "train.n_cue_layers=1",
         "--set", "train.mini_seq_len=4", "--set", "train.epochs=1",
         "--set", "scene.n_objects=3", "--set", "scene.n_frames=5", "--set", "data.n_sequences=2"]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture
def synth_dir(tmp_path):
    d = tmp_path / "data"
    assert run("synth", "--out", d, *SMALL) == EXIT_OK
    return d


@pytest.fixture
def checkpoint(tmp_path, synth_dir):
    ckpt = tmp_path / "m.npz"
    assert run("train", "--data", synth_dir, "--out", ckpt, "--log", tmp_path / "loss.csv", *SMALL) == EXIT_OK
    return ckpt


class TestConfig:
    def test_parse_assignment(self):
        assert parse_assignment("train.lr=0.001") == ("train", "lr", 0.001)
        assert parse_assignment("train.cross_mode=vanilla") == ("train", "cross_mode", "vanilla")
        assert parse_assignment("scene.occlusions=[[1,2,3]]") == ("scene", "occlusions", [[1, 2, 3]])

    @pytest.mark.parametrize("text", ["lr=1", "train.lr"])
    def test_bad_assignment(self, text):
        with pytest.raises(ConfigError):
            parse_assignment(text)

    def test_unknown_section_and_key(self):
        with pytest.raises(ConfigError):
            merge_config(default_run_config(), {"model": {}})
        with pytest.raises(ConfigError):
            merge_config(default_run_config(), {"train": {"learning_rate": 1.0}})

    def test_file_then_flags(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"train": {"epochs": 3, "lr": 0.1}}))
        cfg = load_run_config(str(tmp_path / "c.json"), ["train.lr=0.5"])
        assert cfg["train"]["epochs"] == 3 and cfg["train"]["lr"] == 0.5

    def test_invalid_value_rejected(self):
        with pytest.raises(ConfigError):
            load_run_config(None, ["train.cross_mode=maxpool"])

    def test_parse_grid(self):
        assert parse_grid(["train.cross_mode=cue,vanilla", "train.lr=1e-3,2e-3"]) == [
            ("train", "cross_mode", ["cue", "vanilla"]), ("train", "lr", [1e-3, 2e-3])]


class TestExitCodes:
    def test_dump_config_lists_defaults(self, capsys):
        assert run("--dump-config") == EXIT_OK
        doc = json.loads(capsys.readouterr().out)
        assert set(doc) == {"train", "scene", "data", "paths"}
        assert doc["train"]["t_max"] == 7 and doc["train"]["lr"] == 2e-4

    def test_unknown_key(self, tmp_path):
        assert run("synth", "--out", tmp_path, "--set", "train.nope=1") == EXIT_CONFIG

    def test_malformed_config_file(self, tmp_path):
        (tmp_path / "bad.json").write_text("{not json")
        assert run("--config", tmp_path / "bad.json", "synth", "--out", tmp_path) == EXIT_CONFIG

    def test_malformed_detections(self, tmp_path, checkpoint):
        (tmp_path / "bad.jsonl").write_text("{}\n")
        assert run("track", "--checkpoint", checkpoint, "--detections", tmp_path / "bad.jsonl",
                   "--out", tmp_path / "o.jsonl") == EXIT_CONFIG

    def test_gradcheck_pass_and_corrupt(self, capsys):
        assert run("gradcheck", "--instances", "1") == EXIT_OK
        assert run("gradcheck", "--instances", "1", "--corrupt", "0.01") == EXIT_NUMERIC
        assert "FAIL" in capsys.readouterr().out


class TestSynth:
    def test_deterministic(self, tmp_path):
        for name in ("a", "b"):
            assert run("synth", "--out", tmp_path / name, *SMALL, "--set", "scene.seed=1") == EXIT_OK
        for f in (tmp_path / "a").iterdir():
            assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()

    def test_zero_frames(self, tmp_path):
        assert run("synth", "--out", tmp_path, "--set", "scene.n_frames=0", "--set", "data.n_sequences=1") == EXIT_OK
        assert (tmp_path / "seq_0000.det.jsonl").read_text() == ""
        assert (tmp_path / "seq_0000.gt.jsonl").read_text() == ""

    def test_round_trip(self, synth_dir):
        frames = ingest_detections(synth_dir / "seq_0001.gt.jsonl")
        assert len(frames) == 5 and all(len(f.detections) == 3 for f in frames)

    def test_effective_config_reproduces(self, tmp_path, capsys):
        run("synth", "--out", tmp_path / "a", *SMALL, "--set", "scene.sigma_pos=0.2")
        line = capsys.readouterr().err.splitlines()[0]
        (tmp_path / "eff.json").write_text(line.split(": ", 1)[1])
        run("--config", tmp_path / "eff.json", "synth", "--out", tmp_path / "b")
        for f in (tmp_path / "a").iterdir():
            assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


class TestTrainTrackEval:
    def test_loss_log(self, tmp_path, checkpoint):
        with open(tmp_path / "loss.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert list(rows[0]) == ["epoch", "step", "lr", "L_a", "L_p", "L"]
        assert len(rows) == 2 and all(math.isfinite(float(r[k])) for r in rows for k in ("L_a", "L_p", "L"))

    def test_resume_continues_epochs(self, tmp_path, synth_dir, checkpoint):
        assert run("train", "--data", synth_dir, "--out", tmp_path / "m2.npz", "--log", tmp_path / "loss.csv",
                   "--resume", checkpoint, *SMALL, "--set", "train.epochs=2") == EXIT_OK
        with open(tmp_path / "loss.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [int(r["epoch"]) for r in rows] == [1, 1, 2, 2]
        assert [int(r["step"]) for r in rows] == [1, 2, 3, 4]

    def test_empty_training_dir(self, tmp_path):
        (tmp_path / "empty").mkdir()
        assert run("train", "--data", tmp_path / "empty", "--out", tmp_path / "m.npz", *SMALL) == EXIT_CONFIG

    def test_track_empty_input(self, tmp_path, checkpoint, capsys):
        (tmp_path / "none.jsonl").write_text("")
        assert run("track", "--checkpoint", checkpoint, "--detections", tmp_path / "none.jsonl",
                   "--out", tmp_path / "t.jsonl") == EXIT_OK
        assert (tmp_path / "t.jsonl").read_text() == ""

    def test_track_dir_deterministic_with_throughput(self, tmp_path, synth_dir, checkpoint, capsys):
        for name in ("t1", "t2"):
            assert run("track", "--checkpoint", checkpoint, "--detections", synth_dir,
                       "--out", tmp_path / name) == EXIT_OK
        out = capsys.readouterr().out
        fps = [float(line.split("throughput ")[1].split()[0]) for line in out.splitlines() if "throughput" in line]
        assert len(fps) == 4 and min(fps) > 0
        for f in (tmp_path / "t1").iterdir():
            assert f.read_bytes() == (tmp_path / "t2" / f.name).read_bytes()

    def test_eval_perfect_and_fixture(self, tmp_path, synth_dir, capsys):
        gt_path = synth_dir / "seq_0000.gt.jsonl"
        perfect = tmp_path / "perfect.jsonl"
        perfect.write_text(gt_path.read_text().replace('"gt_id"', '"track_id"'))
        assert run("eval", "--gt", gt_path, "--tracks", perfect, "--out", tmp_path / "r.json") == EXIT_OK
        report = json.loads((tmp_path / "r.json").read_text())
        assert {"AMOTA", "AMOTP", "MOTA", "IDS"} <= set(report)
        assert report["MOTA"] == 1.0 and report["AMOTA"] == 1.0
        assert report == evaluate(ingest_detections(gt_path), ingest_detections(perfect))
        assert (tmp_path / "r.txt").exists()

    def test_eval_directory(self, tmp_path, synth_dir, checkpoint, capsys):
        run("track", "--checkpoint", checkpoint, "--detections", synth_dir, "--out", tmp_path / "t")
        assert run("eval", "--gt", synth_dir, "--tracks", tmp_path / "t", "--out", tmp_path / "r.json") == EXIT_OK
        report = json.loads((tmp_path / "r.json").read_text())
        assert report["GT"] == 2 * 5 * 3

    def test_sweep(self, tmp_path, synth_dir, capsys):
        assert run("sweep", "--grid", "train.cross_mode=cue,vanilla", "--data", synth_dir, "--eval-data", synth_dir,
                   "--out", tmp_path / "s.json", *SMALL) == EXIT_OK
        rows = json.loads((tmp_path / "s.json").read_text())
        assert [r["point"] for r in rows] == [{"train.cross_mode": "cue"}, {"train.cross_mode": "vanilla"}]
