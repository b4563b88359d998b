import argparse
import logging
import sys
from dataclasses import dataclass, field
from typing import Optional

from PySide6.QtCore import QObject, Slot

from Core.Core_Formation import FormationError
from Core.Core_LoadConfig import ConfigError, load_overrides
from Lib.Lib_Export import OutputExistsError, write_outputs
from Lib.Lib_Scenarios import SCENARIO_LABELS, ScenarioError, ScenarioRunner, build_scenario, run_batch, summarize

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

# flag dest -> scenario override name
FLAG_OVERRIDES = {"frames": "frames", "agents": "agents", "gain": "gain", "dt": "dt", "radius": "radius"}


@dataclass(frozen=True)
class CliConfig:
    scenario: str
    seed: int = 0
    out_dir: str = "./out"
    format: str = "csv"
    plot: bool = False
    force: bool = False
    config_path: Optional[str] = None
    batch: Optional[int] = None
    workers: int = 1
    log_level: str = "WARNING"
    overrides: dict = field(default_factory=dict)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="RaftFormation_Sim",
        description="Raft-replicated multi-agent formation control scenarios",
    )
    parser.add_argument("--scenario", required=True, type=str.upper, choices=SCENARIO_LABELS,
                        help="Scenario label A..G")
    parser.add_argument("--seed", type=int, default=None, help="Run seed (default 0)")
    parser.add_argument("--out", dest="out_dir", default="./out", help="Output directory (default ./out)")
    parser.add_argument("--format", choices=("csv", "json"), default="csv")
    parser.add_argument("--frames", type=int)
    parser.add_argument("--agents", type=int)
    parser.add_argument("--gain", type=float)
    parser.add_argument("--dt", type=float)
    parser.add_argument("--radius", type=float)
    parser.add_argument("--plot", action="store_true", help="Also write SVG line charts")
    parser.add_argument("--force", action="store_true", help="Overwrite existing output files")
    parser.add_argument("--config", dest="config_path", help="Scenario override file")
    parser.add_argument("--batch", type=int, help="Run N consecutive seeds and report pass/fail counts")
    parser.add_argument("--workers", type=int, default=1, help="Processes for --batch")
    parser.add_argument("--log-level", default="WARNING",
                        choices=("DEBUG", "INFO", "WARNING", "ERROR"), type=str.upper)
    return parser


def parse_args(argv):
    """
    Parse command-line flags.

    Raises:
        SystemExit: usage error (argparse prints the usage message)
    """
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.batch is not None and args.batch < 1:
        parser.error("--batch needs a positive count")
    if args.workers < 1:
        parser.error("--workers needs a positive count")

    overrides = {name: getattr(args, flag) for flag, name in FLAG_OVERRIDES.items()
                 if getattr(args, flag) is not None}
    if args.seed is not None:
        overrides["seed"] = args.seed

    return CliConfig(
        scenario=args.scenario,
        seed=args.seed if args.seed is not None else 0,
        out_dir=args.out_dir,
        format=args.format,
        plot=args.plot,
        force=args.force,
        config_path=args.config_path,
        batch=args.batch,
        workers=args.workers,
        log_level=args.log_level,
        overrides=overrides,
    )


def build_spec(config, seed=None):
    """Scenario spec from the override file, then the command-line flags on top."""
    options = load_overrides(config.config_path) if config.config_path else {}
    options.update(config.overrides)
    if seed is not None:
        options["seed"] = seed
    return build_scenario(config.scenario, **options)


class StatusLogger(QObject):
    """Forwards runner status messages to the log."""

    @Slot(str, int)
    def on_status(self, message, timeout):
        logger.info(message)


def _fail(code, message):
    print(f"error: {message}", file=sys.stderr)
    return code


def main(argv=None):
    try:
        config = parse_args(sys.argv[1:] if argv is None else argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE

    logging.basicConfig(level=config.log_level, format="%(levelname)s %(name)s: %(message)s")

    try:
        spec = build_spec(config)
        if config.batch:
            base = spec.seed
            specs = [spec] + [build_spec(config, seed=base + i) for i in range(1, config.batch)]
            spec.controller.check_stability(max(len(spec.all_agents()) - 1, 0))
    except (ConfigError, ScenarioError, FormationError) as e:
        return _fail(EXIT_USAGE, e)

    if config.batch:
        report = run_batch(specs, workers=config.workers)
        print(f"Scenario {spec.label}: {report.passed} passed, {report.failed} failed "
              f"(seeds {spec.seed}..{spec.seed + config.batch - 1})")
        return EXIT_OK if report.failed == 0 else EXIT_FAILURE

    runner = ScenarioRunner()
    status = StatusLogger()
    runner.status_message.connect(status.on_status)
    try:
        record = runner.run(spec)
    except FormationError as e:
        return _fail(EXIT_USAGE, e)

    try:
        paths = write_outputs(record, config)
    except (OutputExistsError, OSError) as e:
        return _fail(EXIT_FAILURE, e)

    summary = summarize(record)
    if not summary.safe:
        for violation in summary.violations:
            logger.warning("%s", violation)
    print(f"Scenario {spec.label} seed {spec.seed}: final E = {summary.final_error:.6g}, "
          f"converged at frame {summary.convergence_frame}, {len(paths)} file(s) in {config.out_dir}")
    return EXIT_OK
