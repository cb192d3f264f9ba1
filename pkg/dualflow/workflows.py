"""Resumable ablation suite.

Each training configuration is a DBOS step, so an interrupted suite restarted
with the same workflow id skips the configurations that already finished.
Import this module before :func:`dualflow.dbos_config.launch_dbos` so the workflow is registered.
"""

from __future__ import annotations

import logging

from dbos import DBOS, SetWorkflowID

from dualflow.config import DualflowConfig, dump_config, parse_config
from dualflow.trainer import ABLATION_CONFIGS, AblationReport, report_from_cells, run_ablation_cell

logger = logging.getLogger(__name__)


@DBOS.step()
def ablation_cell_step(
    config_text: str,
    channel: str,
    material: str,
    seed: int,
    output_dir: str | None,
) -> dict[str, float]:
    return run_ablation_cell(parse_config(config_text), channel, material, seed, output_dir)


@DBOS.workflow(name="ablation")
def ablation_workflow(config_text: str, seed: int, output_dir: str | None) -> dict:
    cells = {}
    for channel, material in ABLATION_CONFIGS:
        cells[channel, material] = ablation_cell_step(config_text, channel, material, seed, output_dir)
        logger.info("Finished ablation cell %s/%s", channel, material)
    return report_from_cells(seed, cells).model_dump(mode="json")


def workflow_id(config: DualflowConfig, seed: int) -> str:
    return f"ablation-{config.train.run_name}-s{seed}"


def run_durable_ablation(config: DualflowConfig, seed: int, output_dir: str | None = None) -> AblationReport:
    """Run (or resume) the ablation workflow for ``seed``; DBOS must already be launched."""
    wid = workflow_id(config, seed)
    logger.info("Starting durable ablation %s", wid)
    with SetWorkflowID(wid):
        result = ablation_workflow(dump_config(config), seed, output_dir)
    return AblationReport.model_validate(result)
