"""Rich rendering of runs, reports and summaries for the command line."""

from __future__ import annotations

from collections.abc import Iterable, Sequence
from typing import Any

from rich import box
from rich.console import Console
from rich.panel import Panel
from rich.table import Table

from dualflow.config import TrainConfig
from dualflow.metrics import FlowComparison
from dualflow.neurophys import UnitAnalysis, pattern_fraction
from dualflow.segmentation import SegmentationMask
from dualflow.stimuli import MODULATIONS
from dualflow.trainer import ABLATION_CONFIGS, AblationReport, AblationSummary

MISSING = "\u2014"
LABEL_STYLES = {"pattern": "green", "component": "cyan", "unclassified": "dim"}


def _fmt(value: float | None, digits: int = 3) -> str:
    """Format a number, or :data:`MISSING` when it is undefined."""
    return MISSING if value is None else f"{value:.{digits}f}"


def _table(title: str | None = None) -> Table:
    return Table(box=box.SIMPLE, show_header=True, header_style="bold blue", title=title, padding=(0, 1))


def render_runs(runs: Sequence[dict[str, Any]], console: Console | None = None) -> None:
    """Tabulate registered runs.

    Args:
        runs: Rows as returned by :func:`dualflow.registry.list_runs`.
        console: Optional Rich Console instance.
    """
    console = console or Console()
    if not runs:
        console.print("[yellow]No runs registered.[/yellow]")
        return
    table = _table()
    table.add_column("Run", style="bold", no_wrap=True)
    table.add_column("Kind")
    table.add_column("Created", style="dim")
    table.add_column("EPE", justify="right")
    table.add_column("Checkpoint", style="dim", overflow="fold")
    for run in runs:
        table.add_row(
            run["name"], run["kind"], run["created_at"],
            _fmt(run.get("final_epe")), run.get("checkpoint_path") or MISSING,
        )
    console.print(table)


def render_run_detail(run: dict[str, Any], console: Console | None = None) -> None:
    console = console or Console()
    body = "\n".join(
        f"[bold]{key}[/bold]: {run.get(key) if run.get(key) is not None else MISSING}"
        for key in ("kind", "created_at", "checkpoint_path", "metrics_path", "final_epe")
    )
    console.print(Panel(body, title=f"[bold blue]{run['name']}[/bold blue]", expand=False))
    if run.get("config_text"):
        console.print(Panel(run["config_text"].rstrip(), title="config", border_style="dim", expand=False))


def render_curriculum(config: TrainConfig, console: Console | None = None) -> None:
    console = console or Console()
    table = _table(f"Curriculum ({config.channel}, {config.total_steps} steps)")
    table.add_column("Phase", justify="right")
    table.add_column("Datasets")
    table.add_column("Steps", justify="right")
    for i, phase in enumerate(config.phases, start=1):
        table.add_row(str(i), ", ".join(phase.datasets), str(phase.steps))
    console.print(table)


def render_comparison(rows: Iterable[tuple[str, FlowComparison]], console: Console | None = None) -> None:
    """One row per decode point: EPE, Pearson and partial correlations."""
    console = console or Console()
    table = _table("Model vs response")
    table.add_column("Decode point", style="bold")
    for name in ("EPE", "r uv", "r dir", "r spd", "rho uv", "rho dir", "rho spd"):
        table.add_column(name, justify="right")
    for point, cmp in rows:
        table.add_row(
            point, _fmt(cmp.epe), _fmt(cmp.r_uv), _fmt(cmp.r_dir), _fmt(cmp.r_spd),
            _fmt(cmp.rho_uv), _fmt(cmp.rho_dir), _fmt(cmp.rho_spd),
        )
    console.print(table)


def render_ablation(report: AblationReport, console: Console | None = None) -> None:
    console = console or Console()
    table = _table(f"Second-order benchmark (seed {report.seed})")
    table.add_column("Configuration", style="bold", no_wrap=True)
    for kind in MODULATIONS:
        table.add_column(kind, justify="right")
    table.add_column("mean", justify="right", style="bold")
    for channel, material in ABLATION_CONFIGS:
        scores = {e.modulation: e.r for e in report.entries if e.channel == channel and e.material == material}
        table.add_row(
            f"{channel}+{material}",
            *(_fmt(scores.get(kind)) for kind in MODULATIONS),
            _fmt(report.mean_r(channel, material)),
        )
    console.print(table)


def render_ablation_summary(summary: AblationSummary, console: Console | None = None) -> None:
    console = console or Console()
    table = _table(f"Across seeds {summary.seeds}")
    table.add_column("Configuration", style="bold")
    table.add_column("mean r", justify="right")
    table.add_column("sd", justify="right", style="dim")
    for key, mean in summary.means.items():
        table.add_row(key, _fmt(mean), _fmt(summary.sds[key]))
    console.print(table)


def render_population(records: Sequence[UnitAnalysis], console: Console | None = None, limit: int = 20) -> None:
    console = console or Console()
    if not records:
        console.print("[yellow]No units analysed.[/yellow]")
        return
    counts = {label: sum(r.label == label for r in records) for label in LABEL_STYLES}
    summary = "  ".join(f"[{LABEL_STYLES[k]}]{k}: {v}[/{LABEL_STYLES[k]}]" for k, v in counts.items())
    console.print(
        Panel(
            f"{summary}\npattern fraction: [bold]{pattern_fraction(records):.3f}[/bold]",
            title=f"[bold blue]{records[0].stage}[/bold blue]",
            expand=False,
        )
    )
    table = _table()
    for name in ("Unit", "f_s", "f_t", "R_p", "R_c", "Class", "O"):
        table.add_column(name, justify="right" if name != "Class" else "left")
    for r in records[:limit]:
        style = LABEL_STYLES[r.label]
        table.add_row(
            str(r.unit), _fmt(r.f_s), _fmt(r.f_t), _fmt(r.r_pattern), _fmt(r.r_component),
            f"[{style}]{r.label}[/{style}]", _fmt(r.o_ori),
        )
    if len(records) > limit:
        table.caption = f"{len(records) - limit} more rows in the CSV"
    console.print(table)


def render_segmentation(mask: SegmentationMask, console: Console | None = None) -> None:
    """Coarse text rendering of the node-grid mask."""
    console = console or Console()
    rows = ["".join("█" if cell else "·" for cell in row) for row in mask.foreground]
    note = " [yellow](degenerate)[/yellow]" if mask.degenerate else ""
    console.print(Panel("\n".join(rows), title=f"[bold blue]foreground{note}[/bold blue]", expand=False))
