"""Command-line entry point for the traffic density pipeline."""
import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from app.api.commands import (
    EXIT_OK,
    CommandError,
    cmd_check_grad,
    cmd_eval,
    cmd_predict,
    cmd_synth,
    cmd_train,
    format_check_report,
)
from app.config import settings

logger = logging.getLogger(__name__)


def configure_logging(level: Optional[str] = None) -> None:
    logging.basicConfig(
        level=(level or settings.log_level).upper(),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S',
        stream=sys.stderr,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="traffic-density",
        description="Vehicle density estimation with rank-constrained block regression",
    )
    parser.add_argument("--log-level", default=None, help="override LOG_LEVEL from the environment")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="generate a synthetic traffic dataset")
    synth.add_argument("--config", type=Path, required=True, help="scene config JSON")
    synth.add_argument("--out", type=Path, default=None, help="dataset output directory")
    synth.add_argument("--seed", type=int, default=None, help="override the scene seed")

    train = sub.add_parser("train", help="fit the rank-constrained block regressors")
    train.add_argument("--config", type=Path, required=True, help="experiment config JSON")
    train.add_argument("--out", type=Path, default=None, help="output directory for model and log")
    train.add_argument("--seed", type=int, default=None, help="override the optimizer seed")

    predict = sub.add_parser("predict", help="per-frame counts and traffic density")
    predict.add_argument("--model", type=Path, required=True)
    predict.add_argument("--manifest", type=Path, required=True)
    predict.add_argument("--out", type=Path, default=None)

    evaluate = sub.add_parser("eval", help="score a model against annotated frames")
    evaluate.add_argument("--model", type=Path, required=True)
    evaluate.add_argument("--manifest", type=Path, default=None,
                          help="dataset to score; defaults to the config's test_manifest")
    evaluate.add_argument("--config", type=Path, default=None,
                          help="experiment config whose feature settings must match the model")
    evaluate.add_argument("--out", type=Path, default=None)

    check = sub.add_parser("check-grad", help="finite-difference gradient checks")
    check.add_argument("--tol", type=float, default=None, help=f"default {settings.gradcheck_tol}")
    check.add_argument("--seed", type=int, default=0)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        if args.command == "synth":
            summary = cmd_synth(args.config, args.out, args.seed)
            print(f"frames={summary.frames} vehicles_total={summary.vehicles_total}")
        elif args.command == "train":
            summary = cmd_train(args.config, args.out, args.seed)
            print(
                f"model={summary.model_path} objective={summary.final_objective:.6g} "
                f"train_mae={summary.train_mae:.4f} config_hash={summary.config_hash}"
            )
        elif args.command == "predict":
            path = cmd_predict(args.model, args.manifest, args.out)
            print(f"predictions={path}")
        elif args.command == "eval":
            summary = cmd_eval(args.model, args.manifest, args.config, args.out)
            r = summary.result
            print(f"mae={r.mae:.6g} mse={r.mse:.6g} ara={r.ara:.6g}")
        elif args.command == "check-grad":
            report = cmd_check_grad(args.tol, args.seed)
            for line in format_check_report(report):
                print(line)
    except CommandError as e:
        for line in e.lines:
            print(line)
        logger.error(e.detail)
        print(f"error: {e.detail}", file=sys.stderr)
        return e.exit_code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
