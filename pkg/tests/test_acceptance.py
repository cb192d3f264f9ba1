"""Full training recipes checked against the thresholds in ``acceptance.json``.

Run with ``pytest --acceptance``; every model is trained once per module.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from dualflow.config import CurriculumPhase, DualflowConfig, StimulusConfig, TrainConfig
from dualflow.metrics import adaptive_iou
from dualflow.model import DualflowModel
from dualflow.neurophys import analyze_population, pattern_fraction
from dualflow.segmentation import segment
from dualflow.stimuli import CarrierTrace, apply_modulation, drift_balanced_gabor, translating_square_scene
from dualflow.tensor_core import default_dtype, no_grad
from dualflow.textures import procedural_texture
from dualflow.trainer import DatasetSampler, held_out_epe, multi_seed_ablation, train

pytestmark = pytest.mark.acceptance

THRESHOLDS = json.loads((Path(__file__).parent / "acceptance.json").read_text())


def recipe(run_name: str, phases: list[CurriculumPhase], **train) -> DualflowConfig:
    return DualflowConfig(train=TrainConfig(run_name=run_name, phases=phases, eval_every=500, **train))


@pytest.fixture(scope="module")
def outdir(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="module")
def curriculum_model(outdir):
    target = THRESHOLDS["full_curriculum"]
    phases = [
        CurriculumPhase(datasets=["B", "C"], steps=target["simple_steps"]),
        CurriculumPhase(datasets=["A", "B", "C", "D", "E"], steps=target["mixed_steps"]),
    ]
    return train(recipe("curriculum", phases), outdir).model


@pytest.fixture(scope="module")
def ablation(outdir):
    target = THRESHOLDS["ablation"]
    base = DualflowConfig(
        train=TrainConfig(run_name="abl", eval_every=500, phases=[CurriculumPhase(datasets=["proxy"], steps=target["steps"])]),
        stimulus=StimulusConfig(benchmark_scenes=target["benchmark_scenes"]),
    )
    _, summary = multi_seed_ablation(target["seeds"], base, outdir)
    seed = target["seeds"][0]
    models = {
        channel: DualflowModel.load(outdir / f"abl-{channel}-nondiffuse-s{seed}" / "model.ckpt")[0]
        for channel in ("first_order", "dual")
    }
    return summary, models


def evaluate(model: DualflowModel, fn):
    with default_dtype(np.float32), no_grad():
        return fn(model)


@pytest.mark.parametrize("name", ["toy_gratings", "toy_curriculum"])
def test_toy_recipe_reaches_endpoint_error(outdir, name):
    target = THRESHOLDS[name]
    config = recipe(name, [CurriculumPhase(datasets=target["datasets"], steps=target["steps"])])
    started = time.monotonic()
    model = train(config, outdir).model
    assert time.monotonic() - started <= THRESHOLDS["runtime_minutes"] * 60
    key = target.get("eval_key", target["datasets"][0])
    held_out = DatasetSampler(config.train.seed, stimulus=config.stimulus, holdout=config.train.holdout).held_out(key)
    error = evaluate(model, lambda m: held_out_epe(m, held_out, config.train.iterations))
    assert error < target["max_epe"]


def test_refinement_is_contractive(curriculum_model):
    seq = translating_square_scene(size=64, speed=2.0, n_frames=15)
    flows = evaluate(curriculum_model, lambda m: m.forward(seq, 5).flows)
    late = np.abs(flows[5].data.data - flows[4].data.data).mean()
    early = np.abs(flows[2].data.data - flows[1].data.data).mean()
    assert late < early


def test_translating_square_is_segmented(curriculum_model):
    seq = translating_square_scene(size=64, speed=2.0, n_frames=15)
    out = evaluate(curriculum_model, lambda m: m.forward(seq, 4))
    mask = segment(out.adjacency, out.grid).upsampled(seq.size)
    assert adaptive_iou(mask, seq.masks[seq.label_index]).value >= THRESHOLDS["square_iou"]


def test_integration_raises_pattern_fraction(curriculum_model):
    stage1 = evaluate(curriculum_model, lambda m: analyze_population(m, "stage1"))
    stage2 = evaluate(curriculum_model, lambda m: analyze_population(m, "stage2.iter4"))
    assert pattern_fraction(stage2) > pattern_fraction(stage1)


def test_dual_nondiffuse_wins_the_ablation(ablation):
    summary, _ = ablation
    best = ("dual", "nondiffuse")
    assert summary.margin(best, ("dual", "diffuse")) > 0
    assert summary.margin(best, ("first_order", "nondiffuse")) > 0


def test_higher_order_channel_sees_drift_balanced_motion(ablation):
    _, models = ablation
    seq = drift_balanced_gabor((1.0, 0.0), size=64, n_frames=15, seed=7)
    mask = seq.masks[seq.label_index]

    def mean_u(source):
        return evaluate(models["dual"], lambda m: m.forward(seq, 4, source=source).final_flow.mean_vector(mask)[0])

    second_order, first_order = mean_u("E2"), mean_u("E1")
    assert second_order > 0
    assert abs(first_order) < second_order


def test_dual_channel_segments_drift_balanced_region(ablation):
    _, models = ablation
    rng = np.random.default_rng(11)
    image = 0.2 + 0.6 * procedural_texture((64, 64), rng)
    seq = apply_modulation(image, CarrierTrace(np.tile([1.0, 0.0], (16, 1))), "drift_balanced", seed=5, start=(22, 32))
    target = seq.masks[seq.label_index]

    def region_iou(model):
        out = evaluate(model, lambda m: m.forward(seq, 4))
        return adaptive_iou(segment(out.adjacency, out.grid).upsampled(seq.size), target).value

    dual, first_order = region_iou(models["dual"]), region_iou(models["first_order"])
    assert dual >= THRESHOLDS["drift_balanced_iou"]
    assert first_order < dual
