import json
import os
import re
import tempfile
from datetime import datetime
from pathlib import Path

from .logging_utils import log_info, log_warn


LOGS_DIR = "logs"
LOG_TYPES = {"train", "evaluate", "bench", "predict", "synth", "validate", "importance"}
DEFAULT_LOG_TYPE = "evaluate"


class ArtifactTracker:
    """Collects artifacts written by one command so a failure can remove them."""

    def __init__(self):
        self.paths = []

    def write_text(self, path, text):
        path = str(path)
        dir_name = os.path.dirname(path)
        if dir_name:
            os.makedirs(dir_name, exist_ok=True)
        handle, tmp_path = tempfile.mkstemp(
            prefix=".tmp-", dir=dir_name or ".", text=True
        )
        try:
            with os.fdopen(handle, "w", encoding="utf-8", newline="\n") as out:
                out.write(text)
            os.replace(tmp_path, path)
        except BaseException:
            if os.path.exists(tmp_path):
                os.remove(tmp_path)
            raise
        self.paths.append(path)
        return path

    def write_json(self, path, payload):
        text = json.dumps(payload, ensure_ascii=False, indent=2, sort_keys=True)
        return self.write_text(path, text + "\n")

    def write_lines(self, path, lines):
        text = "".join(f"{line}\n" for line in lines)
        return self.write_text(path, text)

    def write_frame_csv(self, path, frame):
        return self.write_text(path, frame.to_csv(index=False, lineterminator="\n"))

    def rollback(self):
        for path in reversed(self.paths):
            try:
                os.remove(path)
                log_warn("Partial artifact removed.", path=path)
            except FileNotFoundError:
                continue
        self.paths = []


def _next_run_number(date_dir, prefix):
    max_run = 0
    for path in date_dir.glob(f"{prefix}*_*.xlsx"):
        match = re.match(rf"{re.escape(prefix)}(\d+)_", path.stem)
        if not match:
            continue
        max_run = max(max_run, int(match.group(1)))
    return max_run + 1


def build_run_log_path(*, now=None, log_type=None, logs_dir=LOGS_DIR):
    now = now or datetime.now()
    log_type = (log_type or DEFAULT_LOG_TYPE).strip().lower()
    if log_type not in LOG_TYPES:
        log_type = DEFAULT_LOG_TYPE
    date_dir = Path(logs_dir) / log_type / now.strftime("%Y%m%d")
    date_dir.mkdir(parents=True, exist_ok=True)
    run_number = _next_run_number(date_dir, log_type)
    return date_dir / f"{log_type}{run_number}_{now.strftime('%H%M')}.xlsx"


def write_run_log(rows, output_path, columns=None):
    """Write report rows to an Excel run log (pandas, openpyxl as fallback)."""
    if columns is None:
        columns = []
        for row in rows:
            for key in row:
                if key not in columns:
                    columns.append(key)
    try:
        import pandas as pd
    except ImportError:
        pd = None

    if pd:
        pd.DataFrame(rows, columns=columns).to_excel(output_path, index=False)
    else:
        import openpyxl

        workbook = openpyxl.Workbook()
        sheet = workbook.active
        sheet.append(columns)
        for row in rows:
            sheet.append([row.get(col, "") for col in columns])
        workbook.save(output_path)
        workbook.close()
    log_info("Run log written.", rows=len(rows), path=str(output_path))
    return output_path
