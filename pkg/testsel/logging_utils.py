"""Console log lines: ``[HH:MM:SS] LEVEL: message | key=value | ...``.

Domain keys come first in a fixed order so lines from different phases
line up; the rest follow alphabetically.
"""

import os
import sys
import time

from .settings import LOG_LEVEL_ENV


LEVELS = {"DEBUG": 10, "INFO": 20, "WARN": 30, "ERROR": 40}
DEFAULT_LEVEL = "INFO"
FIELD_RANK = {
    key: rank
    for rank, key in enumerate(
        (
            "phase",
            "cycle",
            "commit",
            "change",
            "test",
            "count",
            "total",
            "rows",
            "positives",
            "config",
            "score",
            "f1",
            "apfd",
            "napfd",
            "elapsed_s",
            "reason",
            "error",
            "path",
        )
    )
}
LEVEL_COLORS = {
    "DEBUG": "\x1b[2m",
    "INFO": "\x1b[32m",
    "WARN": "\x1b[33m",
    "ERROR": "\x1b[31m",
}
RESET_COLOR = "\x1b[0m"
_LOG_HANDLER = None


def _threshold():
    name = (os.getenv(LOG_LEVEL_ENV) or DEFAULT_LEVEL).strip().upper()
    return LEVELS.get(name, LEVELS[DEFAULT_LEVEL])


def normalize_log_value(value):
    if value is None:
        return ""
    if hasattr(value, "item") and callable(value.item):
        # numpy scalars
        try:
            value = value.item()
        except (TypeError, ValueError):
            pass
    if isinstance(value, bool):
        return "yes" if value else "no"
    if isinstance(value, float):
        return f"{value:.6g}"
    if isinstance(value, (list, tuple, set, frozenset)):
        items = sorted(value) if isinstance(value, (set, frozenset)) else value
        return ",".join(normalize_log_value(item) for item in items)
    return " ".join(str(value).split())


def format_log_fields(fields):
    keys = sorted(fields, key=lambda key: (FIELD_RANK.get(key, len(FIELD_RANK)), key))
    parts = []
    for key in keys:
        text = normalize_log_value(fields[key])
        if not text:
            continue
        if " " in text or "=" in text or "|" in text:
            text = '"' + text.replace('"', "'") + '"'
        parts.append(f"{key}={text}")
    return " | ".join(parts)


def _stream_is_tty(stream):
    isatty = getattr(stream, "isatty", None)
    return callable(isatty) and isatty()


def colorize_level(level, stream=None):
    stream = stream if stream is not None else sys.stderr
    if stream is None or not _stream_is_tty(stream) or os.getenv("NO_COLOR"):
        return level
    color = LEVEL_COLORS.get(level)
    return f"{color}{level}{RESET_COLOR}" if color else level


def format_log_line(level, message, fields, timestamp=None, level_text=None):
    timestamp = timestamp or time.strftime("%H:%M:%S")
    head = f"[{timestamp}] {level_text or level}: {message}"
    suffix = format_log_fields(fields)
    return f"{head} | {suffix}" if suffix else head


def log(level, message, **fields):
    if LEVELS.get(level, LEVELS["ERROR"]) < _threshold():
        return
    if _LOG_HANDLER is not None:
        _LOG_HANDLER(format_log_line(level, message, fields))
        return
    stream = sys.stderr
    if stream is None:
        return
    print(format_log_line(level, message, fields, level_text=colorize_level(level, stream)), file=stream)


def set_log_handler(handler):
    """Send formatted lines to ``handler(line)`` instead of stderr; None restores stderr."""
    global _LOG_HANDLER
    _LOG_HANDLER = handler


def log_debug(message, **fields):
    log("DEBUG", message, **fields)


def log_info(message, **fields):
    log("INFO", message, **fields)


def log_warn(message, **fields):
    log("WARN", message, **fields)


def log_error(message, **fields):
    log("ERROR", message, **fields)
