import pytest
from click.testing import CliRunner
from dbos import DBOS

import dualflow.workflows as workflows
from dualflow.cli import main
from dualflow.config import DualflowConfig, TrainConfig
from dualflow.db import DB_ENV
from dualflow.dbos_config import DBOS_URL_ENV, configure_dbos, launch_dbos
from dualflow.stimuli import MODULATIONS
from dualflow.trainer import ABLATION_CONFIGS


@pytest.fixture
def cells(monkeypatch):
    """Replace training with a fixed score per configuration and record each call."""
    calls = []

    def fake_cell(config, channel, material, seed, output_dir=None):
        calls.append((channel, material, seed))
        score = 0.5 if (channel, material) == ("dual", "nondiffuse") else 0.1
        return {kind: score for kind in MODULATIONS}

    monkeypatch.setattr(workflows, "run_ablation_cell", fake_cell)
    return calls


@pytest.fixture
def system_db(tmp_path, monkeypatch):
    monkeypatch.setenv(DBOS_URL_ENV, f"sqlite:///{tmp_path / 'dbos.sqlite'}")
    monkeypatch.setenv(DB_ENV, str(tmp_path / "runs.db"))
    yield
    DBOS.destroy()


@pytest.fixture
def runtime(system_db):
    configure_dbos()
    launch_dbos()


@pytest.fixture
def config():
    return DualflowConfig(train=TrainConfig(run_name="durable"))


def test_workflow_id_names_run_and_seed(config):
    assert workflows.workflow_id(config, 3) == "ablation-durable-s3"


def test_suite_runs_every_configuration(runtime, cells, config):
    report = workflows.run_durable_ablation(config, 2)
    assert [(c, m) for c, m, _ in cells] == list(ABLATION_CONFIGS)
    assert report.seed == 2
    assert report.mean_r("dual", "nondiffuse") == pytest.approx(0.5)
    assert report.mean_r("first_order", "diffuse") == pytest.approx(0.1)


def test_same_workflow_id_does_not_retrain(runtime, cells, config):
    first = workflows.run_durable_ablation(config, 0)
    second = workflows.run_durable_ablation(config, 0)
    assert len(cells) == len(ABLATION_CONFIGS)
    assert second == first


def test_restart_from_a_step_reuses_finished_cells(runtime, cells, config):
    workflows.run_durable_ablation(config, 1)
    wid = workflows.workflow_id(config, 1)
    steps = DBOS.list_workflow_steps(wid)
    assert len(steps) == len(ABLATION_CONFIGS)
    handle = DBOS.fork_workflow(wid, steps[2]["function_id"])
    handle.get_result()
    assert [(c, m) for c, m, _ in cells[len(ABLATION_CONFIGS) :]] == list(ABLATION_CONFIGS[2:])


def test_durable_cli_flag(system_db, cells, tmp_path):
    report = tmp_path / "ablation.csv"
    result = CliRunner().invoke(main, ["ablate", "--durable", "--seed", "4", "--report", str(report)])
    assert result.exit_code == 0, result.output
    assert len(cells) == len(ABLATION_CONFIGS)
    assert report.is_file()
