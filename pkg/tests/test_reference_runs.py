"""Recorded-run regressions on the full default task.

These take minutes and pin orderings rather than theorems; run them with
`pytest -m reference`.
"""

import time
from io import StringIO

import pandas as pd
import pytest

from app.config.loader import build_plan, load_experiment_config
from app.schemas.config_schema import LAMBDA_SWEEP, Mode
from app.service.harness import SHIFT_STRENGTHS, harness
from app.service.pretrain import pretrain_vlm
from app.service.synthbench import generate_task

pytestmark = pytest.mark.reference


@pytest.fixture(scope="module")
def plan(tmp_path_factory):
    return build_plan(load_experiment_config(), seed=42, out_dir=str(tmp_path_factory.mktemp("ref")))


@pytest.fixture(scope="module")
def task(plan):
    return generate_task(plan.task)


@pytest.fixture(scope="module")
def pretrained(task, plan):
    return pretrain_vlm(task, plan.pretrain, plan.seed)


@pytest.fixture(scope="module")
def runs(task, pretrained, plan):
    """final RunMetrics of every mode, keyed by mode value"""
    out = {}
    for mode in Mode:
        run = harness.run_spec(plan, mode.value, mode=mode)
        result = harness.adapt_task(
            task, pretrained.image_encoder, pretrained.text_encoder, run.config, plan.seed, run.name
        )
        out[mode.value] = result.metrics
    return out


@pytest.fixture(scope="module")
def default_outputs(plan):
    """(files, seconds) of the default plan, the six ablation modes"""
    start = time.perf_counter()
    files = harness.run_plan(plan)
    return files, time.perf_counter() - start


def _acc(runs, mode):
    return runs[mode].final.target_accuracy


def test_pretraining_aligns_source(pretrained):
    assert pretrained.source_zero_shot_acc >= 0.90


def test_pretraining_smoothed_loss_never_rises(pretrained):
    smoothed = pretrained.metrics["loss"].rolling(5).mean().dropna().to_numpy()
    assert len(smoothed) > 0
    assert all(b <= a for a, b in zip(smoothed, smoothed[1:]))


def test_ablation_ordering(runs):
    assert _acc(runs, "pest") >= _acc(runs, "st_vpe_lpe")
    assert _acc(runs, "st_vpe_lpe") >= max(_acc(runs, "st_vpe"), _acc(runs, "st_lpe"))
    assert min(_acc(runs, "st_vpe"), _acc(runs, "st_lpe")) >= _acc(runs, "st")
    assert _acc(runs, "st") >= _acc(runs, "zero_shot")
    assert _acc(runs, "pest") - _acc(runs, "st") >= 0.02


def test_pseudo_labels_stay_ahead(runs):
    pest, st = runs["pest"].rows, runs["st"].rows
    for a, b in zip(pest[3:], st[3:]):
        assert a.pseudo_label_accuracy >= b.pseudo_label_accuracy


def test_beats_multi_prompt_baselines(runs):
    for mode in ("baseline_uniform", "baseline_weighted", "baseline_vote"):
        assert _acc(runs, "pest") > _acc(runs, mode)


def test_lambda_robustness(task, pretrained, plan):
    accuracies = []
    for lam in LAMBDA_SWEEP[:3]:
        run = harness.run_spec(plan, f"pest_lam{lam:g}", mode=Mode.pest, lam=lam)
        result = harness.adapt_task(
            task, pretrained.image_encoder, pretrained.text_encoder, run.config, plan.seed, run.name
        )
        accuracies.append(result.metrics.final.target_accuracy)
    assert max(accuracies) - min(accuracies) <= 0.02


def test_failed_prompts_hurt_pest_less(plan):
    summary = pd.read_csv(StringIO(harness.failure_sweep(plan)["summary.csv"]))
    drop = summary[summary["prompt_failure_rate"] > 0].set_index("mode")["accuracy_drop"]
    assert drop["pest"] <= drop["baseline_uniform"]


def test_zero_shot_degrades_with_shift(plan):
    accuracies = []
    for strength in SHIFT_STRENGTHS:
        task = generate_task(plan.task.model_copy(update={"shift_strength": strength}))
        accuracies.append(harness.zero_shot_accuracy(task, pretrain_vlm(task, plan.pretrain, plan.seed)))
    assert all(a >= b for a, b in zip(accuracies, accuracies[1:]))


def test_no_shift_low_noise_is_nearly_perfect(plan):
    spec = plan.task.model_copy(update={"shift_strength": 0.0, "image_noise_sigma": 0.01, "text_noise_sigma": 0.01})
    task = generate_task(spec)
    assert harness.zero_shot_accuracy(task, pretrain_vlm(task, plan.pretrain, plan.seed)) >= 0.98


def test_default_plan_fits_time_budget(default_outputs):
    _, seconds = default_outputs
    assert seconds < 180.0


def test_default_plan_matches_golden(default_outputs, golden):
    files, _ = default_outputs
    csvs = {rel: text for rel, text in files.items() if rel.endswith(".csv")}
    assert "summary.csv" in csvs
    for rel, text in csvs.items():
        golden(f"default_run/{rel}", text)
