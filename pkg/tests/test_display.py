from rich.console import Console

from dualflow.display import MISSING, render_ablation_summary, render_runs
from dualflow.trainer import AblationSummary


def recorded() -> Console:
    return Console(record=True, width=160, color_system=None)


def test_unfinished_run_shows_placeholder():
    console = recorded()
    run = {"name": "toy", "kind": "train", "created_at": "2026-01-01", "final_epe": None, "checkpoint_path": None}
    render_runs([run], console)
    row = next(line for line in console.export_text().splitlines() if "toy" in line)
    assert row.count(MISSING) == 2


def test_finished_run_formats_epe():
    console = recorded()
    run = {"name": "toy", "kind": "train", "created_at": "2026-01-01", "final_epe": 0.41234, "checkpoint_path": "m.ckpt"}
    render_runs([run], console)
    text = console.export_text()
    assert "0.412" in text
    assert MISSING not in text


def test_ablation_summary_lists_every_configuration():
    console = recorded()
    summary = AblationSummary(
        seeds=[0, 1],
        means={"dual+nondiffuse": 0.5, "dual+diffuse": 0.25},
        sds={"dual+nondiffuse": 0.01, "dual+diffuse": 0.02},
    )
    render_ablation_summary(summary, console)
    text = console.export_text()
    assert "dual+nondiffuse" in text
    assert "0.250" in text
