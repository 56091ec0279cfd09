import json
import os

from .errors import DataError
from .settings import (
    CONFIG_ENV,
    DEFAULT_CONFIG_FILE,
    LEGACY_CONFIG_FILE,
    WORKERS_ENV,
)


def resolve_config_path(config_file):
    if config_file:
        return os.path.expanduser(config_file)

    env_path = os.environ.get(CONFIG_ENV)
    if env_path:
        return os.path.expanduser(env_path)

    candidates = [
        os.path.join(os.getcwd(), DEFAULT_CONFIG_FILE),
        os.path.join(os.getcwd(), LEGACY_CONFIG_FILE),
    ]
    for candidate in candidates:
        if os.path.exists(candidate):
            return candidate
    return None


def load_config(config_file=None):
    """Read the key-value JSON config; keys are CLI option dests.

    Keys may also be given with dashes (``train-days``). Sections keyed by a
    subcommand name (``{"train": {...}}``) apply to that subcommand only.
    """
    path = resolve_config_path(config_file)
    if not path:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as handle:
            data = json.load(handle)
    except FileNotFoundError as exc:
        raise DataError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"config file {path}: invalid JSON ({exc.msg})") from exc
    if not isinstance(data, dict):
        raise DataError(f"config file {path}: expected a JSON object")
    return {normalize_key(key): value for key, value in data.items()}


def normalize_key(key):
    return str(key).strip().replace("-", "_")


def config_for_command(config, command):
    values = {}
    for key, value in config.items():
        if isinstance(value, dict):
            continue
        values[key] = value
    section = config.get(command)
    if isinstance(section, dict):
        for key, value in section.items():
            values[normalize_key(key)] = value
    return values


def resolve_workers(workers=None):
    if workers is not None:
        return max(1, int(workers))
    raw = os.environ.get(WORKERS_ENV)
    if not raw:
        return 1
    try:
        return max(1, int(raw))
    except ValueError as exc:
        raise DataError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from exc
