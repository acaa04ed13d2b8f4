"""
Command-line entry point.

    python -m app.main run --config experiment.yaml --out outputs/ --seed 42
    python -m app.main ablation | lambda-sweep | baselines | failure-sweep | shift-sweep
    python -m app.main gen-task | pretrain | adapt --mode pest

Exit codes: 0 success, 1 usage / config error, 2 runtime numeric error.
"""

import argparse
import sys
from typing import List, Optional

from loguru import logger

from app.config.config import settings
from app.config.loader import build_plan, load_experiment_config
from app.exception.exce import AdaptationError, ConfigError, UsageError, VectorError
from app.schemas.config_schema import LAMBDA_SWEEP, Mode
from app.service.harness import harness, write_outputs
from app.utils.utils import ensure_writable

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=settings.DEFAULT_SEED)
    common.add_argument("--config", default=None, help="YAML experiment file")
    common.add_argument("--out", default=settings.DEFAULT_OUT_DIR, help="output directory")
    common.add_argument("--task", default=None, help="task file written by gen-task")
    common.add_argument("--eq4-raw-weights", action="store_true", help="keep negative prompt weights")
    common.add_argument("--eq7-raw-product", action="store_true", help="no clamping in the centroid score")

    parser = _Parser(prog="app.main", description=settings.DESCRIPTION)
    verbs = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)
    verbs.add_parser("gen-task", parents=[common], help="generate and save a synthetic task")
    verbs.add_parser("pretrain", parents=[common], help="contrastive pretraining only")
    adapt = verbs.add_parser("adapt", parents=[common], help="one adaptation run")
    adapt.add_argument("--mode", type=Mode, default=Mode.pest, choices=list(Mode))
    adapt.add_argument("--image-encoder", default=None, help="pretrained image encoder checkpoint")
    adapt.add_argument("--text-encoder", default=None, help="pretrained text encoder checkpoint")
    verbs.add_parser("run", parents=[common], help="pretrain then every run in the config")
    verbs.add_parser("ablation", parents=[common], help="the six ablation modes")
    sweep = verbs.add_parser("lambda-sweep", parents=[common], help="pest over several lambdas")
    sweep.add_argument("--lambdas", type=float, nargs="+", default=LAMBDA_SWEEP)
    verbs.add_parser("baselines", parents=[common], help="pest vs multi-prompt baselines")
    verbs.add_parser("failure-sweep", parents=[common], help="pest vs uniform as prompts fail")
    verbs.add_parser("shift-sweep", parents=[common], help="zero-shot accuracy vs domain shift")
    return parser


def dispatch(args: argparse.Namespace) -> None:
    config = load_experiment_config(args.config)
    plan = build_plan(
        config,
        seed=args.seed,
        out_dir=args.out,
        task_path=args.task,
        eq4_raw_weights=args.eq4_raw_weights,
        eq7_raw_product=args.eq7_raw_product,
    )

    if args.verb == "gen-task":
        if args.task:
            raise ConfigError("gen-task generates a task; drop --task")
        write_outputs(plan.out_dir, {}, binaries={"task.bin": harness.task_file(plan.task)})
        return

    if args.verb == "pretrain":
        outputs = harness.pretrain_only(plan)
    elif args.verb == "adapt":
        outputs = harness.adapt_once(plan, args.mode, args.image_encoder, args.text_encoder)
    elif args.verb == "run":
        outputs = harness.run_plan(plan)
    elif args.verb == "ablation":
        outputs = harness.ablation(plan)
    elif args.verb == "lambda-sweep":
        outputs = harness.lambda_sweep(plan, args.lambdas)
    elif args.verb == "baselines":
        outputs = harness.baselines(plan)
    elif args.verb == "failure-sweep":
        outputs = harness.failure_sweep(plan)
    else:
        outputs = harness.shift_sweep(plan)
    write_outputs(plan.out_dir, outputs)


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        # fail on an unwritable output directory before any work is done
        ensure_writable(args.out)
        dispatch(args)
    except UsageError as e:
        logger.error(str(e))
        return EXIT_USAGE
    except OSError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_USAGE
    except (VectorError, AdaptationError) as e:
        logger.error(str(e))
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
