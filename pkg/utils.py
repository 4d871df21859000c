import json
import logging
import math
import os
import tempfile
from pathlib import Path

import numpy as np
import toml
from rich.logging import RichHandler

from errors import InvalidInputError

logger = logging.getLogger(__name__)

THREADS_ENV_VAR = "LAYERFUSE_THREADS"


def setup_logging(level="INFO"):
    root = logging.getLogger()
    root.setLevel(level.upper() if isinstance(level, str) else level)
    if not any(isinstance(h, RichHandler) for h in root.handlers):
        handler = RichHandler(show_path=False, rich_tracebacks=False)
        handler.setFormatter(logging.Formatter("%(message)s"))
        root.addHandler(handler)


def thread_count():
    """
    Number of worker threads allowed by LAYERFUSE_THREADS.

    Returns:
        int: the configured cap, or os.cpu_count() when the variable is unset or 0
    """
    raw = os.environ.get(THREADS_ENV_VAR, "0").strip() or "0"
    try:
        value = int(raw)
    except ValueError:
        raise InvalidInputError(f"{THREADS_ENV_VAR} must be an integer, got {raw!r}")
    if value < 0:
        raise InvalidInputError(f"{THREADS_ENV_VAR} must be >= 0, got {value}")
    return value or (os.cpu_count() or 1)


def load_config_file(path):
    """
    Read a `key = value` TOML file whose keys are long-flag names.

    Dashes and underscores are interchangeable in keys; the returned dict uses underscores
    so it lines up with click parameter names.
    """
    try:
        raw = toml.load(path)
    except toml.TomlDecodeError as e:
        raise InvalidInputError(f"Cannot parse config file {path}: {e}")
    nested = [k for k, v in raw.items() if isinstance(v, dict)]
    if nested:
        raise InvalidInputError(
            f"Config file {path} must be flat key = value pairs; found tables {nested}"
        )
    return {key.replace("-", "_"): value for key, value in raw.items()}


def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def _round_floats(obj, digits=9):
    """Plain JSON types; floats rounded to `digits` significant digits (None keeps them exact)."""
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (float, np.floating)):
        value = float(obj)
        if not math.isfinite(value):
            return None
        return value if digits is None else float(f"{value:.{digits}g}")
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return [_round_floats(x, digits) for x in obj.tolist()]
    if isinstance(obj, dict):
        return {str(k): _round_floats(v, digits) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(x, digits) for x in obj]
    return obj


def to_json(obj, indent=2):
    """Serialise a report with sorted keys and floats fixed at 9 significant digits."""
    return json.dumps(_round_floats(obj), sort_keys=True, indent=indent) + "\n"


def to_json_line(obj):
    # merge logs are replayed, so floats keep full precision
    return json.dumps(_round_floats(obj, digits=None), sort_keys=True, separators=(",", ":"))


def write_json(path, obj):
    atomic_write_text(path, to_json(obj))


def write_resolved_config(out_dir, command, params: dict):
    """
    Record every resolved parameter of a run so it can be reproduced exactly.

    Args:
        out_dir: output directory of the run
        command: subcommand name
        params: resolved parameter values (flags merged with the config file)
    """
    record = {"command": command}
    for key, value in sorted(params.items()):
        if value is None:
            continue
        if isinstance(value, Path):
            value = str(value)
        if isinstance(value, tuple):
            value = list(value)
        record[key.replace("_", "-")] = value
    path = Path(out_dir) / "resolved_config.toml"
    atomic_write_text(path, toml.dumps(record))
    logger.info("Resolved config written to %s", path)
    return path
