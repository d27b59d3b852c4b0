"""Command-line entry point: ``python -m app.cli <subcommand> --config run.toml``.

Exit status: 0 on success, 1 when a step fails, 2 on configuration errors.
"""

from __future__ import annotations

import argparse
import logging
import sys
from typing import List, Optional, Sequence

from app.core.config import get_settings
from app.core.errors import ConfigError, ReportIoError
from app.core.logging_config import configure_logging
from app.models.run_config import RunConfig, load_config
from app.services.report_service import emit_report
from app.services.workflow_service import SUBCOMMANDS, AnalysisWorkflowService

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_STEP_FAILED = 1
EXIT_CONFIG = 2

FLAGS = ("observation-folds", "observation-placebo")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sdidml",
        description="Structural DID with double machine learning: diagnostics, estimation and robustness.",
    )
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", required=True, help="Path to the TOML run configuration")
    parser.add_argument("--out", help="Output directory (overrides [output].directory and SDIDML_OUTPUT_DIR)")
    parser.add_argument("--seed", type=int, help="Overrides [dml].seed")
    parser.add_argument("--threads", type=int, help="Worker count; results do not depend on it")
    parser.add_argument(
        "--flag",
        action="append",
        default=[],
        choices=FLAGS,
        help="Replication modes: observation-level folds or observation-level placebo shuffling",
    )
    return parser


def apply_overrides(config: RunConfig, seed: Optional[int], flags: Sequence[str]) -> RunConfig:
    dml = config.dml
    if seed is not None:
        if seed < 0:
            raise ConfigError("seed must be non-negative", key="--seed", expected="integer >= 0")
        dml = dml.model_copy(update={"seed": seed})
    if "observation-folds" in flags:
        dml = dml.model_copy(update={"fold_level": "observation"})
    robustness = config.robustness
    if "observation-placebo" in flags:
        robustness = robustness.model_copy(update={"placebo_scheme": "observation"})
    return config.model_copy(update={"dml": dml, "robustness": robustness})


def resolve_output_dir(config: RunConfig, out: Optional[str]) -> str:
    if out:
        return out
    return get_settings().output_dir or config.output.directory


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    settings = get_settings()
    threads = args.threads if args.threads is not None else settings.threads
    configure_logging(settings.log_level, workers=threads > 1)
    if threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_CONFIG

    try:
        config = apply_overrides(load_config(args.config), args.seed, args.flag)
        workflow = AnalysisWorkflowService(config, n_jobs=threads)
        outcome = workflow.run(args.subcommand)
    except ConfigError as e:
        logger.error("Configuration error: %s", e)
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    out_dir = resolve_output_dir(config, args.out)
    try:
        emit_report(outcome.bundle, out_dir)
    except ReportIoError as e:
        logger.error("Report could not be written: %s", e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_STEP_FAILED

    for step in outcome.bundle.steps:
        print(f"[{step.status}] {step.step}" + (f": {step.headline}" if step.headline else ""))
    if outcome.failure is not None:
        print(f"error: {outcome.failure}", file=sys.stderr)
        return EXIT_STEP_FAILED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
