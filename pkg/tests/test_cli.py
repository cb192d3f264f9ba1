import numpy as np
import pandas as pd
import pytest
from click.testing import CliRunner

from dualflow.cli import _parse_units, main
from dualflow.config import ModelConfig, parse_config
from dualflow.db import DB_ENV
from dualflow.fileio import LABEL_FLOW, LABEL_MASK, read_flo
from dualflow.model import DualflowModel
from dualflow.registry import get_run, list_runs, register_run


@pytest.fixture(autouse=True)
def run_db(tmp_path, monkeypatch):
    monkeypatch.setenv(DB_ENV, str(tmp_path / "runs.db"))


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    path = tmp_path_factory.mktemp("model") / "model.ckpt"
    DualflowModel(ModelConfig(), "first_order").save(path, iterations=1)
    return path


@pytest.fixture
def square(runner, tmp_path):
    out = tmp_path / "square"
    result = runner.invoke(main, ["genstim", "square", str(out), "--speed", "2"])
    assert result.exit_code == 0, result.output
    return out


class TestGenstim:
    def test_gabor(self, runner, tmp_path):
        result = runner.invoke(main, ["genstim", "gabor", str(tmp_path / "g"), "--f-s", "0.1", "--theta", "45"])
        assert result.exit_code == 0, result.output
        assert len(list((tmp_path / "g").glob("frame_*.png"))) == 15
        assert "Wrote 15 frames" in result.output

    def test_square_has_labels(self, square):
        assert (square / LABEL_FLOW).is_file()
        assert (square / LABEL_MASK).is_file()
        np.testing.assert_allclose(read_flo(square / LABEL_FLOW).mean_vector(), [2 * 625 / 4096, 0.0], atol=0.05)

    def test_toy_dataset(self, runner, tmp_path):
        result = runner.invoke(main, ["genstim", "C", str(tmp_path / "c"), "--seed", "3", "--index", "7"])
        assert result.exit_code == 0, result.output

    def test_aliasing_is_reported(self, runner, tmp_path):
        result = runner.invoke(main, ["genstim", "gabor", str(tmp_path / "g"), "--f-s", "0.2", "--speed", "3"])
        assert result.exit_code == 1
        assert result.stderr.startswith("error[aliasing]:")

    def test_same_seed_writes_identical_frames(self, runner, tmp_path):
        for name in ("a", "b"):
            args = ["genstim", "modulation", str(tmp_path / name), "--seed", "11"]
            result = runner.invoke(main, args)
            assert result.exit_code == 0, result.output
        first = sorted((tmp_path / "a").iterdir())
        second = sorted((tmp_path / "b").iterdir())
        assert [p.name for p in first] == [p.name for p in second]
        for a, b in zip(first, second):
            assert a.read_bytes() == b.read_bytes()
        runner.invoke(main, ["genstim", "modulation", str(tmp_path / "c"), "--seed", "12"])
        assert (tmp_path / "a" / first[0].name).read_bytes() != (tmp_path / "c" / first[0].name).read_bytes()


class TestTrain:
    def test_dump_config(self, runner):
        result = runner.invoke(main, ["train", "--dump-config", "--seed", "9", "--iters", "2", "--channel", "first"])
        assert result.exit_code == 0, result.output
        config = parse_config(result.stdout)
        assert config.train.seed == 9
        assert config.train.iterations == 2
        assert config.train.channel == "first_order"

    def test_bad_config_file(self, runner, tmp_path):
        path = tmp_path / "bad.ini"
        path.write_text("[nope]\nx = 1\n")
        result = runner.invoke(main, ["train", "--dump-config", "--config", str(path)])
        assert result.exit_code == 1
        assert "error[config]" in result.stderr


class TestRuns:
    def test_empty(self, runner):
        result = runner.invoke(main, ["runs"])
        assert result.exit_code == 0
        assert "No runs registered" in result.output

    def test_unknown_run(self, runner):
        result = runner.invoke(main, ["runs", "ghost"])
        assert result.exit_code == 1
        assert "error[unknown-run]" in result.stderr

    def test_registered(self, runner):
        register_run("alpha", "train", "[train]\n", "runs/alpha/model.ckpt", None, 0.5)
        register_run("alpha", "train", "[train]\n", "runs/alpha/model.ckpt", None, 0.25)
        assert [r["name"] for r in list_runs()] == ["alpha"]
        assert get_run("alpha")["final_epe"] == 0.25
        assert get_run("beta") is None
        result = runner.invoke(main, ["runs"])
        assert "alpha" in result.output
        result = runner.invoke(main, ["runs", "alpha"])
        assert result.exit_code == 0
        assert "runs/alpha/model.ckpt" in result.output


class TestModelCommands:
    def test_infer(self, runner, checkpoint, square, tmp_path):
        out = tmp_path / "flow"
        result = runner.invoke(main, ["infer", str(checkpoint), str(square), "--out", str(out), "--all-points"])
        assert result.exit_code == 0, result.output
        assert sorted(p.name for p in out.glob("*.flo")) == ["stage1.flo", "stage2.iter1.flo"]
        assert read_flo(out / "stage2.iter1.flo").shape == (64, 64)
        assert (out / "stage1.png").is_file()

    def test_segment(self, runner, checkpoint, square, tmp_path):
        out = tmp_path / "mask.pgm"
        result = runner.invoke(main, ["segment", str(checkpoint), str(square), "--out", str(out)])
        assert result.exit_code == 0, result.output
        assert out.is_file()

    def test_eval_with_mask(self, runner, checkpoint, square, tmp_path):
        out = tmp_path / "eval.csv"
        args = ["eval", str(checkpoint), str(square), "--mask", str(square / LABEL_MASK), "--out", str(out)]
        result = runner.invoke(main, args)
        assert result.exit_code == 0, result.output
        table = pd.read_csv(out)
        assert list(table["decode_point"]) == ["stage1", "stage2.iter1"]
        assert "iou" in table.columns
        assert table["iou"].between(0.0, 1.0).all()

    def test_analyze_rejects_unknown_stage(self, runner, checkpoint, tmp_path):
        result = runner.invoke(main, ["analyze", str(checkpoint), "--stage", "stage9", "--out", str(tmp_path)])
        assert result.exit_code == 1
        assert "error[config]" in result.stderr

    def test_missing_frames(self, runner, checkpoint, tmp_path):
        empty = tmp_path / "empty"
        empty.mkdir()
        result = runner.invoke(main, ["infer", str(checkpoint), str(empty), "--out", str(tmp_path / "o")])
        assert result.exit_code == 1
        assert "error[sequence-load]" in result.stderr

    @pytest.mark.parametrize("command", ["infer", "segment"])
    def test_zero_iterations_is_a_config_error(self, runner, checkpoint, square, tmp_path, command):
        out = tmp_path / ("o" if command == "infer" else "m.pgm")
        result = runner.invoke(main, [command, str(checkpoint), str(square), "--out", str(out), "--iters", "0"])
        assert result.exit_code == 1
        assert "error[config]: iterations must be >= 1" in result.stderr


def test_unit_ranges():
    assert _parse_units(None) is None
    assert _parse_units("0-2,5") == [0, 1, 2, 5]
