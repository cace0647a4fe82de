import argparse
import sys
from functools import partial
from pathlib import Path

from pydantic import ValidationError

from broker import explore_with_broker
from memsim.core.dependency.container_init import init_container
from memsim.core.errors import CheckFailed, ConfigError, SimulationError
from memsim.core.logging import report_logger, setup_logging
from memsim.schemas.scenario import Experiment, ScenarioSpec


EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_CHECK = 3

SUBCOMMANDS = {
    "explore": Experiment.EXPLORE_EVICTIONS,
    "covert": Experiment.COVERT_BENCH,
    "template": Experiment.TEMPLATE,
    "rowhammer": Experiment.ROWHAMMER_SWEEP,
    "detect": Experiment.DETECT_SUITE,
    "oracles": Experiment.ORACLE_SUITE,
    "dedup": Experiment.DEDUP_DEMO,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="seed машины и эксперимента")
    common.add_argument("--out", type=Path, default=None, help="каталог отчетов")
    common.add_argument("--format", choices=["csv", "json"], default=None)
    common.add_argument("--machine", default=None, help="имя пресета или путь к JSON машины")
    common.add_argument("--check", action="store_true", help="проверять приемочные условия")
    common.add_argument("--workers", type=int, default=None)
    common.add_argument("--trials", type=int, default=None)
    common.add_argument("--noise", type=float, default=None,
                        help="covert: вероятность ошибки символа, иначе сигма джиттера")
    common.add_argument("--bytes", type=int, default=None, help="объем данных covert")
    common.add_argument("--debug", action="store_true", help="человекочитаемые логи")

    parser = argparse.ArgumentParser(prog="memsim", description="Симулятор иерархии памяти и атак на нее")
    commands = parser.add_subparsers(dest="command", required=True)
    run = commands.add_parser("run", parents=[common], help="сценарий из JSON-файла")
    run.add_argument("scenario", type=Path)
    for name, experiment in SUBCOMMANDS.items():
        commands.add_parser(name, parents=[common], help=experiment.value)
    return parser


def load_scenario(path: Path) -> ScenarioSpec:
    try:
        return ScenarioSpec.model_validate_json(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"Cannot read scenario {path}: {e}")
    except ValidationError as e:
        raise ConfigError(f"Invalid scenario {path}: {e}")


def scenario_from_args(args: argparse.Namespace) -> ScenarioSpec:
    if args.command == "run":
        spec = load_scenario(args.scenario)
    else:
        spec = ScenarioSpec(experiment=SUBCOMMANDS[args.command])
    # Флаги командной строки перекрывают файл сценария
    overrides = {
        "machine": args.machine,
        "seeds": [args.seed] if args.seed is not None else None,
        "out_dir": args.out,
        "format": args.format,
        "trials": args.trials,
        "noise": args.noise,
        "bytes": args.bytes,
        "workers": args.workers,
    }
    overrides = {key: value for key, value in overrides.items() if value is not None}
    if args.check:
        overrides["check"] = True
    try:
        return ScenarioSpec.model_validate({**spec.model_dump(), **overrides})
    except ValidationError as e:
        raise ConfigError(f"Invalid arguments: {e}")


def run_scenario(spec: ScenarioSpec) -> list[Path]:
    container = init_container(reuse=False, explorer=partial(explore_with_broker, workers=spec.workers))
    config = container.get_machine(spec.machine)
    written = []
    for seed in spec.seeds:
        out_dir = spec.out_dir / f"seed_{seed}" if len(spec.seeds) > 1 else spec.out_dir
        writer = container.get_report_writer(out_dir, spec.format)
        service = container.get_experiment_service(
            config, writer, seed=seed, check=spec.check, trials=spec.trials, noise=spec.noise,
            payload_bytes=spec.bytes, workers=spec.workers,
        )
        written.extend(service.run(spec.experiment))
    return written


def run_cli(argv: list[str] | None = None) -> int:
    """Точка входа CLI; возвращает код завершения."""
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(debug=True if args.debug else None)
    try:
        spec = scenario_from_args(args)
        written = run_scenario(spec)
    except ConfigError as e:
        report_logger.error("Configuration error", error=e.message)
        print(f"config error: {e.message}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckFailed as e:
        print(f"check failed: {e.message}", file=sys.stderr)
        return EXIT_CHECK
    except SimulationError as e:
        report_logger.error("Simulation failed", error=e.message)
        print(f"error: {e.message}", file=sys.stderr)
        return EXIT_FAILED
    for path in written:
        print(path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(run_cli())
