# --- Helper module for the gmc toolkit ---
# Description: environment loading, seed lineage, the replica worker pool and
#              artifact management (CSV / NDJSON / JSON manifests) shared by the
#              samplers, the analysis layer and the command-line harness.
# -----------------------------------------------------------------

import csv
import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from io import StringIO
from pathlib import Path
from typing import Any, Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from dotenv import load_dotenv

logger = logging.getLogger(__name__)

PARTIAL_SUFFIX = ".partial"
DEFAULT_WORKERS = 1


# --- Environment Setup ---

def _find_project_root() -> str:
    """
    Finds the project root by searching upwards for a known marker
    ('.git', '.env' or 'requirements.txt'); falls back to the working directory.
    """
    path = os.getcwd()
    while path != os.path.dirname(path):
        if any(os.path.exists(os.path.join(path, marker)) for marker in [".git", ".env", "requirements.txt"]):
            return path
        path = os.path.dirname(path)
    logger.debug("Project root marker not found. Defaulting to current directory.")
    return os.getcwd()


def load_environment() -> Optional[str]:
    """Loads environment variables from a .env file in the project root, if any."""
    dotenv_path = os.path.join(_find_project_root(), ".env")
    if os.path.exists(dotenv_path):
        load_dotenv(dotenv_path=dotenv_path)
        return dotenv_path
    logger.debug(".env file not found; relying on the process environment.")
    return None


def resolve_workers(cli_value: Optional[int] = None, config_value: Optional[int] = None) -> int:
    """CLI flag > config > GMC_WORKERS > 1."""
    if cli_value is not None:
        return max(1, int(cli_value))
    if config_value is not None:
        return max(1, int(config_value))
    load_environment()
    env_value = os.getenv("GMC_WORKERS")
    if env_value:
        try:
            return max(1, int(env_value))
        except ValueError:
            logger.warning(f"Ignoring non-integer GMC_WORKERS={env_value!r}")
    return DEFAULT_WORKERS


# --- Seeds ---

def seed_sequence(master_seed: int, replica: int = 0, level: int = 0) -> np.random.SeedSequence:
    """Splittable counter scheme: master seed -> replica -> level."""
    return np.random.SeedSequence(int(master_seed), spawn_key=(int(replica), int(level)))


def derive_rng(master_seed: int, replica: int = 0, level: int = 0) -> np.random.Generator:
    """Generator for one (replica, level) cell of the seed lineage."""
    return np.random.default_rng(seed_sequence(master_seed, replica, level))


def config_hash(payload: Any) -> str:
    """SHA-256 of the canonical JSON form of a config payload."""
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


# --- Replica Worker Pool ---

def run_replicas(task: Callable[[Any], Any], arguments: Sequence[Any], workers: int = 1) -> List[Any]:
    """
    Runs `task` over `arguments` and returns results in argument order.

    With workers > 1 the calls are dispatched to a process pool; `task` and its
    arguments must then be picklable (module-level functions, frozen dataclasses).
    """
    if workers <= 1 or len(arguments) <= 1:
        return [task(argument) for argument in arguments]
    chunksize = max(1, len(arguments) // (4 * workers))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(task, arguments, chunksize=chunksize))


# --- Artifact Management ---

def _atomic_write_text(path: Path, content: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    temporary = path.with_name(path.name + ".tmp")
    with open(temporary, "w", encoding="utf-8", newline="") as handle:
        handle.write(content)
    os.replace(temporary, path)


def save_artifact(content: str, file_path: os.PathLike, partial: bool = False) -> Path:
    """
    Saves text content, creating directories if needed.

    With partial=True the file is written under a `.partial` name; `finalize_artifact`
    renames it once the run has succeeded.
    """
    path = Path(file_path)
    target = path.with_name(path.name + PARTIAL_SUFFIX) if partial else path
    _atomic_write_text(target, content)
    logger.info(f"Saved artifact to: {target}")
    return target


def finalize_artifact(partial_path: os.PathLike) -> Path:
    """Drops the `.partial` suffix of a successfully written artifact."""
    partial_path = Path(partial_path)
    if not partial_path.name.endswith(PARTIAL_SUFFIX):
        return partial_path
    final = partial_path.with_name(partial_path.name[: -len(PARTIAL_SUFFIX)])
    os.replace(partial_path, final)
    return final


def load_artifact(file_path: os.PathLike) -> Optional[str]:
    """Loads text content from a file path; None when missing."""
    try:
        with open(file_path, "r", encoding="utf-8") as handle:
            return handle.read()
    except FileNotFoundError:
        logger.error(f"Artifact file not found at {file_path}.")
        return None


def _format_cell(value: Any) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (np.integer,)):
        return str(int(value))
    return str(value)


def csv_text(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    """Renders rows as CSV with a header row; floats use repr for bit-stable output."""
    lines: List[List[str]] = [list(header)]
    lines.extend([_format_cell(value) for value in row] for row in rows)
    buffer = StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerows(lines)
    return buffer.getvalue()


def ndjson_text(records: Iterable[dict]) -> str:
    """One JSON object per line, keys sorted."""
    return "".join(json.dumps(record, sort_keys=True, default=_json_default) + "\n" for record in records)


def _json_default(value: Any) -> Any:
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def write_json(path: os.PathLike, payload: dict) -> Path:
    """Atomic JSON write (temp file + rename)."""
    path = Path(path)
    _atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def write_table(
    directory: os.PathLike, name: str, header: Sequence[str], rows: Iterable[Sequence[Any]], manifest_hash: str
) -> Tuple[Path, Path]:
    """
    Writes `<name>` as a `.partial` CSV plus its manifest sidecar; returns both paths.
    The sidecar references the run manifest by config hash.
    """
    directory = Path(directory)
    table = save_artifact(csv_text(header, rows), directory / name, partial=True)
    sidecar = write_json(directory / f"{name}.manifest.json", {"config_hash": manifest_hash, "table": name})
    return table, sidecar
