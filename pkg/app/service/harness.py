"""
Experiment orchestration: pretrain once, adapt per run, collect CSVs.

Drivers return an `Outputs` mapping (relative path -> file text); nothing is
written until the whole experiment has finished, see `write_outputs`.
"""

import math
import os
import shutil
import tempfile
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence

import pandas as pd
from loguru import logger
from pydantic import ValidationError

from app.exception.exce import ConfigError, VectorError
from app.schemas.config_schema import (
    ABLATION_MODES,
    BASELINE_MODES,
    LAMBDA_SWEEP,
    AdaptConfig,
    ExperimentPlan,
    Mode,
    RunSpec,
    describe_validation_error,
)
from app.schemas.metrics_schema import SUMMARY_COLUMNS
from app.schemas.task_schema import TaskSpec
from app.service.encoder import LinearEncoder, checkpoint_text, load_checkpoint
from app.service.ensemble import dump_bank
from app.service.pretrain import PretrainResult, pretrain_vlm
from app.service.selftrain import AdaptResult, adapt, class_text_features, evaluate
from app.service.synthbench import SyntheticTask, generate_task, load_task, task_bytes
from app.utils.utils import ensure_writable

Outputs = Dict[str, str]

FAILURE_RATES = (0.0, 0.3)
SHIFT_STRENGTHS = (0.0, 0.2, 0.4, 0.8)


def to_csv(frame: pd.DataFrame) -> str:
    return frame.to_csv(index=False, lineterminator="\n")


def _blocked(out_dir: str, rel: str) -> Optional[str]:
    """the existing path that stops `rel` from being written, if any"""
    parts = rel.split("/")
    path = out_dir
    for part in parts[:-1]:
        path = os.path.join(path, part)
        if os.path.exists(path) and not os.path.isdir(path):
            return path
    target = os.path.join(path, parts[-1])
    return target if os.path.isdir(target) else None


def write_outputs(out_dir: str, outputs: Outputs, binaries: Optional[Dict[str, bytes]] = None) -> None:
    """Write all files or none.

    Files are staged in a scratch directory under `out_dir` and moved into
    place only once every one of them has been written.
    """
    ensure_writable(out_dir)
    blobs = [(rel, text.encode("utf-8")) for rel, text in outputs.items()]
    blobs.extend((binaries or {}).items())
    for rel, _ in blobs:
        blocked = _blocked(out_dir, rel)
        if blocked:
            raise ConfigError(f"cannot write {rel}: {blocked!r} is in the way")

    staging = tempfile.mkdtemp(prefix=".staging-", dir=out_dir)
    try:
        staged = []
        for i, (rel, blob) in enumerate(blobs):
            path = os.path.join(staging, f"{i}.part")
            with open(path, "wb") as f:
                f.write(blob)
            staged.append((path, os.path.join(out_dir, rel)))
        for path, target in staged:
            os.makedirs(os.path.dirname(target), exist_ok=True)
            os.replace(path, target)
    except OSError as e:
        raise ConfigError(f"cannot write outputs to {out_dir!r}: {e}") from e
    finally:
        shutil.rmtree(staging, ignore_errors=True)
    logger.info(f"wrote {len(blobs)} files to {out_dir}")


@dataclass(frozen=True)
class RunOutcome:
    spec: RunSpec
    result: AdaptResult

    def summary_row(self) -> dict:
        final = self.result.metrics.final
        return {
            "run": self.spec.name,
            "mode": self.spec.config.mode.value,
            "lam": self.spec.config.lam,
            "target_accuracy": final.target_accuracy,
            "pseudo_label_accuracy": final.pseudo_label_accuracy,
        }


class ExperimentHarness:
    def load_task(self, plan: ExperimentPlan) -> SyntheticTask:
        if plan.task_path:
            return load_task(plan.task_path)
        return generate_task(plan.task)

    def pretrain(self, task: SyntheticTask, plan: ExperimentPlan) -> PretrainResult:
        return pretrain_vlm(task, plan.pretrain, plan.seed)

    def adapt_task(
        self,
        task: SyntheticTask,
        image_encoder: LinearEncoder,
        text_encoder: LinearEncoder,
        cfg: AdaptConfig,
        seed: int,
        name: str,
    ) -> AdaptResult:
        """Run `adapt` on a task, handing it only the unlabelled side of the target."""
        text_before = text_encoder.fingerprint()
        result = adapt(
            task.unlabelled_target(),
            task.class_prompts(),
            image_encoder,
            text_encoder,
            cfg,
            task.evaluator(),
            seed=seed,
            run_name=name,
        )
        if text_encoder.fingerprint() != text_before:
            raise VectorError(f"text encoder changed during run {name}")
        return result

    def zero_shot_accuracy(self, task: SyntheticTask, pretrained: PretrainResult) -> float:
        text_feats = class_text_features(pretrained.text_encoder, task.class_prompts(), Mode.zero_shot)
        return evaluate(pretrained.image_encoder, text_feats, task.unlabelled_target(), task.evaluator())

    def _run_all(
        self, task: SyntheticTask, pretrained: PretrainResult, runs: Sequence[RunSpec], seed: int
    ) -> List[RunOutcome]:
        return [
            RunOutcome(
                spec=run,
                result=self.adapt_task(
                    task, pretrained.image_encoder, pretrained.text_encoder, run.config, seed, run.name
                ),
            )
            for run in runs
        ]

    def _run_files(self, outcomes: Iterable[RunOutcome]) -> Outputs:
        files: Outputs = OrderedDict()
        for outcome in outcomes:
            files[f"runs/{outcome.spec.name}.csv"] = to_csv(outcome.result.metrics.to_frame())
            if outcome.result.bank is not None:
                files[f"runs/{outcome.spec.name}_centroids.csv"] = to_csv(dump_bank(outcome.result.bank))
        return files

    def run_plan(self, plan: ExperimentPlan, include_pretrain_row: bool = True) -> Outputs:
        """pretrain once, then every run of the plan in order"""
        files, rows = self._execute(plan, include_pretrain_row)
        files["summary.csv"] = to_csv(pd.DataFrame.from_records(rows, columns=SUMMARY_COLUMNS))
        return files

    def _execute(self, plan: ExperimentPlan, include_pretrain_row: bool):
        if not plan.runs:
            logger.warning("plan has no adaptation runs; only pretraining will be reported")
        task = self.load_task(plan)
        pretrained = self.pretrain(task, plan)
        outcomes = self._run_all(task, pretrained, plan.runs, plan.seed)

        rows = []
        if include_pretrain_row:
            acc = self.zero_shot_accuracy(task, pretrained)
            rows.append(
                {
                    "run": "pretrain",
                    "mode": "pretrain",
                    "lam": math.nan,
                    "target_accuracy": acc,
                    "pseudo_label_accuracy": acc,
                }
            )
        rows.extend(o.summary_row() for o in outcomes)

        files: Outputs = OrderedDict()
        files["pretrain_metrics.csv"] = to_csv(pretrained.metrics)
        files["image_encoder.json"] = checkpoint_text(pretrained.image_encoder)
        files["text_encoder.json"] = checkpoint_text(pretrained.text_encoder)
        files.update(self._run_files(outcomes))
        return files, rows

    def _with_runs(self, plan: ExperimentPlan, runs: List[RunSpec]) -> ExperimentPlan:
        return plan.model_copy(update={"runs": runs})

    def run_spec(self, plan: ExperimentPlan, name: str, **overrides) -> RunSpec:
        """the plan's `adapt` defaults with `overrides` applied, as a named run"""
        merged = {**plan.adapt.model_dump(), **overrides}
        try:
            return RunSpec(name=name, config=AdaptConfig.model_validate(merged))
        except ValidationError as e:
            raise ConfigError(f"run {name}: {describe_validation_error(e)}") from e

    def ablation(self, plan: ExperimentPlan) -> Outputs:
        runs = [self.run_spec(plan, mode.value, mode=mode) for mode in ABLATION_MODES]
        return self.run_plan(self._with_runs(plan, runs), include_pretrain_row=False)

    def baselines(self, plan: ExperimentPlan) -> Outputs:
        runs = [self.run_spec(plan, mode.value, mode=mode) for mode in BASELINE_MODES]
        return self.run_plan(self._with_runs(plan, runs), include_pretrain_row=False)

    def lambda_sweep(self, plan: ExperimentPlan, lams: Sequence[float] = LAMBDA_SWEEP) -> Outputs:
        runs = [self.run_spec(plan, f"pest_lam{lam:g}", mode=Mode.pest, lam=lam) for lam in lams]
        files, rows = self._execute(self._with_runs(plan, runs), include_pretrain_row=False)
        summary = pd.DataFrame.from_records(rows, columns=SUMMARY_COLUMNS)
        summary["spread"] = summary["target_accuracy"].max() - summary["target_accuracy"].min()
        files["summary.csv"] = to_csv(summary)
        return files

    def failure_sweep(self, plan: ExperimentPlan, rates: Sequence[float] = FAILURE_RATES) -> Outputs:
        """pest vs uniform prompt averaging as more prompt generations fail"""
        base = self.load_task(plan).spec
        modes = [Mode.pest, Mode.baseline_uniform]
        rows, outcomes = [], []
        for rate in rates:
            task = generate_task(base.model_copy(update={"prompt_failure_rate": rate}))
            pretrained = self.pretrain(task, plan)
            runs = [self.run_spec(plan, f"{mode.value}_pfail{rate:g}", mode=mode) for mode in modes]
            for outcome in self._run_all(task, pretrained, runs, plan.seed):
                outcomes.append(outcome)
                rows.append({"prompt_failure_rate": rate, **outcome.summary_row()})

        summary = pd.DataFrame.from_records(rows)
        clean = summary[summary["prompt_failure_rate"] == rates[0]].set_index("mode")["target_accuracy"]
        summary["accuracy_drop"] = [clean[m] - acc for m, acc in zip(summary["mode"], summary["target_accuracy"])]
        files = self._run_files(outcomes)
        files["summary.csv"] = to_csv(summary)
        return files

    def shift_sweep(self, plan: ExperimentPlan, strengths: Sequence[float] = SHIFT_STRENGTHS) -> Outputs:
        """zero-shot target accuracy of the pretrained model as the domain shift grows"""
        base = self.load_task(plan).spec
        rows = []
        for strength in strengths:
            task = generate_task(base.model_copy(update={"shift_strength": strength}))
            acc = self.zero_shot_accuracy(task, self.pretrain(task, plan))
            logger.info(f"shift {strength:g}: zero-shot target accuracy {acc:.4f}")
            rows.append({"shift_strength": strength, "zero_shot_accuracy": acc})
        return OrderedDict([("summary.csv", to_csv(pd.DataFrame.from_records(rows)))])

    def pretrain_only(self, plan: ExperimentPlan) -> Outputs:
        task = self.load_task(plan)
        pretrained = self.pretrain(task, plan)
        return OrderedDict(
            [
                ("pretrain_metrics.csv", to_csv(pretrained.metrics)),
                ("image_encoder.json", checkpoint_text(pretrained.image_encoder)),
                ("text_encoder.json", checkpoint_text(pretrained.text_encoder)),
            ]
        )

    def adapt_once(
        self,
        plan: ExperimentPlan,
        mode: Mode,
        image_checkpoint: Optional[str] = None,
        text_checkpoint: Optional[str] = None,
    ) -> Outputs:
        """One run of `mode`, from saved checkpoints or a fresh pretraining."""
        task = self.load_task(plan)
        if image_checkpoint and text_checkpoint:
            image_encoder, text_encoder = load_checkpoint(image_checkpoint), load_checkpoint(text_checkpoint)
        elif image_checkpoint or text_checkpoint:
            raise ConfigError("give both --image-encoder and --text-encoder, or neither")
        else:
            pretrained = self.pretrain(task, plan)
            image_encoder, text_encoder = pretrained.image_encoder, pretrained.text_encoder

        run = self.run_spec(plan, mode.value, mode=mode)
        result = self.adapt_task(task, image_encoder, text_encoder, run.config, plan.seed, run.name)
        outcome = RunOutcome(spec=run, result=result)
        files = self._run_files([outcome])
        files["adapted_image_encoder.json"] = checkpoint_text(result.image_encoder)
        files["summary.csv"] = to_csv(pd.DataFrame.from_records([outcome.summary_row()], columns=SUMMARY_COLUMNS))
        return files

    def task_file(self, spec: TaskSpec) -> bytes:
        return task_bytes(generate_task(spec))


harness = ExperimentHarness()
