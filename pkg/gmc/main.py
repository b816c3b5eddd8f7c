# --- Command-line harness ---
# Description: `gmc run | suite | sample-field`. Loads and validates a JSON experiment
#              config, resolves workers / output directory / seed, runs the experiment,
#              writes CSV and NDJSON outputs (renamed from `.partial` on success) and an
#              atomic run manifest, and maps the outcome to an exit code.
# -----------------------------------------------------------------

import argparse
import json
import logging
import os
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import List, Optional, Sequence

from pydantic import ValidationError

from gmc import __version__
from gmc.errors import ConfigError, GMCError
from gmc.experiments import ExperimentResult, dump_realization, run_experiment
from gmc.kernels import drain_jitter_events
from gmc.utils import (
    config_hash,
    finalize_artifact,
    load_environment,
    ndjson_text,
    resolve_workers,
    save_artifact,
    write_json,
    write_table,
)
from gmc.validation_models import ExperimentConfig, ExperimentKind, RunManifest
from gmc.validation_models.experiment_model import SuiteBlock

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_ERROR = 2
DEFAULT_OUTPUT_ROOT = "runs"
MANIFEST_NAME = "manifest.json"


# ---- Config Loading ----

def _key_path(error: dict) -> str:
    return ".".join(str(part) for part in error.get("loc", ()))


def load_config(path: os.PathLike, seed: Optional[int] = None) -> ExperimentConfig:
    """Reads and validates a config; raises ConfigError naming the offending key."""
    try:
        with open(path, "r", encoding="utf-8") as handle:
            payload = json.load(handle)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(payload, dict):
        raise ConfigError("config must be a JSON object")
    if seed is not None:
        payload["master_seed"] = seed
    try:
        config = ExperimentConfig.model_validate(payload)
    except ValidationError as exc:
        first = exc.errors()[0]
        raise ConfigError(first["msg"], _key_path(first)) from exc
    if config.kind != ExperimentKind.SUITE and config.kernel is None:
        raise ConfigError("missing kernel block", "kernel")
    logger.info(f"Loaded {config.kind.value} config from {path}")
    return config


def hashed_payload(config: ExperimentConfig) -> dict:
    """Config fields that determine the numeric outputs; worker count and output directory are excluded."""
    return config.model_dump(mode="json", exclude={"workers", "output_dir"})


def resolve_output_dir(cli_value: Optional[str], config: ExperimentConfig) -> Path:
    """CLI flag > config > GMC_OUTPUT_DIR > runs/<kind>."""
    if cli_value:
        return Path(cli_value)
    if config.output_dir:
        return Path(config.output_dir)
    load_environment()
    env_value = os.getenv("GMC_OUTPUT_DIR")
    if env_value:
        return Path(env_value)
    return Path(DEFAULT_OUTPUT_ROOT) / config.kind.value


# ---- Output Writing ----

def write_outputs(result: ExperimentResult, directory: Path, digest: str) -> List[Path]:
    """Writes every table and record stream as `.partial` files; returns their paths."""
    partials = []
    for table in result.tables:
        path, _ = write_table(directory, table.name, table.header, table.rows, digest)
        partials.append(path)
    for name, records in result.records.items():
        partials.append(save_artifact(ndjson_text(records), directory / name, partial=True))
    return partials


def execute(
    config: ExperimentConfig,
    output_dir: Path,
    workers: int,
    dump_path: Optional[os.PathLike] = None,
) -> int:
    """Runs one experiment end to end and returns its exit code."""
    digest = config_hash(hashed_payload(config))
    started_at = datetime.now(timezone.utc).isoformat()
    start = time.perf_counter()
    drain_jitter_events()
    result = run_experiment(config, workers)
    if dump_path is not None:
        dump_realization(config, dump_path)
    partials = write_outputs(result, output_dir, digest)
    outputs = [finalize_artifact(path).name for path in partials]
    manifest = RunManifest(
        tool_version=__version__,
        kind=config.kind,
        config_hash=digest,
        master_seed=config.master_seed,
        n_replicas=config.n_replicas,
        workers=workers,
        started_at=started_at,
        wall_time_seconds=time.perf_counter() - start,
        jitter_events=drain_jitter_events(),
        checks=result.checks,
        outputs=outputs,
    )
    write_json(output_dir / MANIFEST_NAME, manifest.model_dump(mode="json"))
    failed = [check.name for check in result.checks if not check.passed]
    logger.info(f"Wrote {len(outputs)} outputs and the manifest to {output_dir}")
    if failed:
        logger.warning(f"{len(failed)} of {len(result.checks)} checks failed: {', '.join(failed)}")
        return EXIT_FAILED
    logger.info(f"All {len(result.checks)} checks passed")
    return EXIT_OK


# ---- Argument Parsing ----

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gmc", description="Gaussian multiplicative chaos simulation and verification")
    parser.add_argument("--version", action="version", version=f"gmc {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    def common(sub: argparse.ArgumentParser) -> None:
        sub.add_argument("config", help="experiment config (JSON)")
        sub.add_argument("--out", help="output directory")
        sub.add_argument("--workers", type=int, help="worker processes (falls back to GMC_WORKERS)")
        sub.add_argument("--seed", type=int, help="override the config master seed")
        sub.add_argument("--verbose", action="store_true", help="debug logging")

    common(commands.add_parser("run", help="run the experiment a config describes"))
    common(commands.add_parser("suite", help="run the acceptance battery"))
    sample = commands.add_parser("sample-field", help="sample a field ensemble and optionally dump one realization")
    common(sample)
    sample.add_argument("--dump", help="write replica 0 as a GMCF binary file")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO)
    try:
        if args.workers is not None and args.workers < 1:
            raise ConfigError("worker count must be at least 1", "workers")
        config = load_config(args.config, seed=args.seed)
        if args.command == "suite" and config.kind != ExperimentKind.SUITE:
            config = config.model_copy(update={"kind": ExperimentKind.SUITE, "suite": config.suite or SuiteBlock()})
        if args.command == "sample-field" and config.kind != ExperimentKind.SAMPLE_FIELD:
            config = config.model_copy(update={"kind": ExperimentKind.SAMPLE_FIELD})
        workers = resolve_workers(args.workers, config.workers)
        output_dir = resolve_output_dir(args.out, config)
        return execute(config, output_dir, workers, dump_path=getattr(args, "dump", None))
    except ConfigError as exc:
        logger.error(f"Invalid config: {exc}")
        return EXIT_ERROR
    except GMCError as exc:
        logger.error(f"Run failed: {type(exc).__name__}: {exc}")
        return EXIT_ERROR
    except Exception as exc:
        logger.exception(f"Unexpected error: {exc}")
        return EXIT_ERROR
