import io
import json
import math
import os
import re

from .datamodel import (
    ChangeSet,
    CICycle,
    CommitRecord,
    FileChange,
    TestCase,
    TestVerdict,
)
from .errors import DataError
from .logging_utils import log_info, log_warn
from .settings import CHANGE_TYPES, CI_CSV_SCHEMAS, SECONDS_PER_DAY, VERDICTS


def normalize_text(value):
    if value is None:
        return ""
    if isinstance(value, float):
        if math.isnan(value):
            return ""
        if value.is_integer():
            return str(int(value))
    return " ".join(str(value).split())


def normalize_header(value):
    return normalize_text(value).lower()


def header_matches(header, name):
    if not header:
        return False
    name = name.lower()
    return header == name or header.replace(" ", "") == name


def read_lines(path):
    with open(os.path.expanduser(path), "r", encoding="utf-8") as handle:
        return handle.read().splitlines()


def _iter_records(stream):
    for lineno, line in enumerate(stream, start=1):
        text = line.strip()
        if not text:
            continue
        try:
            record = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DataError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
        if not isinstance(record, dict):
            raise DataError(f"line {lineno}: expected a JSON object")
        yield lineno, record


def _field(record, name, kind, lineno, required=True, default=None):
    if name not in record or record[name] is None:
        if required:
            raise DataError(f"line {lineno}: missing field {name!r}")
        return default
    value = record[name]
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise DataError(f"line {lineno}: field {name!r} must be an integer")
        if isinstance(value, float) and not value.is_integer():
            raise DataError(f"line {lineno}: field {name!r} must be an integer")
        return int(value)
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise DataError(f"line {lineno}: field {name!r} must be a number")
        return float(value)
    if not isinstance(value, kind) or isinstance(value, bool):
        kinds = kind if isinstance(kind, tuple) else (kind,)
        expected = " or ".join(item.__name__ for item in kinds)
        raise DataError(f"line {lineno}: field {name!r} must be {expected}")
    return value


def _parse_file_change(entry, lineno, index):
    where = f"files[{index}]"
    if not isinstance(entry, dict):
        raise DataError(f"line {lineno}: {where} must be an object")
    path = _field(entry, "path", str, lineno)
    change_type = _field(entry, "type", str, lineno)
    if change_type not in CHANGE_TYPES:
        raise DataError(
            f"line {lineno}: {where}.type unknown change_type {change_type!r}"
        )
    added = _field(entry, "add", int, lineno, required=False, default=0)
    deleted = _field(entry, "del", int, lineno, required=False, default=0)
    try:
        return FileChange(path, change_type, added, deleted)
    except DataError as exc:
        raise DataError(f"line {lineno}: {where}: {exc}") from exc


def _commit_from_record(record, lineno):
    commit_id = _field(record, "id", str, lineno)
    timestamp = _field(record, "ts", int, lineno)
    author = _field(record, "author", str, lineno, required=False, default="")
    files = _field(record, "files", list, lineno, required=False, default=[])
    changes = []
    seen = set()
    for index, entry in enumerate(files):
        change = _parse_file_change(entry, lineno, index)
        if change.path in seen:
            raise DataError(
                f"line {lineno}: files[{index}].path duplicate path {change.path!r}"
            )
        seen.add(change.path)
        changes.append(change)
    return CommitRecord(commit_id, timestamp, author, tuple(changes))


def parse_commit_log(stream):
    """Parse the line-delimited commit-log export, preserving input order."""
    return [_commit_from_record(record, lineno) for lineno, record in _iter_records(stream)]


def _read_results(stream):
    cycles = []
    catalog = {}
    for lineno, record in _iter_records(stream):
        cycle_id = str(_field(record, "cycle", (str, int), lineno))
        timestamp = _field(record, "ts", int, lineno)
        commit_ids = _field(record, "commits", list, lineno, required=False, default=[])
        results = _field(record, "results", list, lineno, required=False, default=[])
        verdicts = []
        for index, entry in enumerate(results):
            if not isinstance(entry, dict):
                raise DataError(f"line {lineno}: results[{index}] must be an object")
            test_id = str(_field(entry, "test", (str, int), lineno))
            verdict = _field(entry, "verdict", str, lineno)
            if verdict not in VERDICTS:
                raise DataError(
                    f"line {lineno}: results[{index}].verdict must be one of "
                    f"{VERDICTS}, got {verdict!r}"
                )
            duration = _field(entry, "duration", float, lineno, required=False)
            verdicts.append(
                TestVerdict(
                    cycle_id,
                    test_id,
                    timestamp,
                    verdict,
                    duration,
                    bool(entry.get("flaky") or False),
                    bool(entry.get("broken") or False),
                )
            )
            path = entry.get("path")
            if path and test_id not in catalog:
                catalog[test_id] = TestCase(test_id, path, entry.get("module"))
        try:
            cycle = CICycle(
                cycle_id,
                timestamp,
                tuple(str(item) for item in commit_ids),
                tuple(verdicts),
            )
        except DataError as exc:
            raise DataError(f"line {lineno}: {exc}") from exc
        cycles.append((timestamp, len(cycles), cycle))
    ordered = [cycle for _, _, cycle in sorted(cycles, key=lambda item: item[:2])]
    return ordered, catalog


def parse_test_results(stream):
    """Parse test-result cycles, sorted ascending by timestamp."""
    cycles, _ = _read_results(stream)
    return cycles


def parse_test_results_with_catalog(stream):
    cycles, catalog = _read_results(stream)
    return cycles, [catalog[test_id] for test_id in sorted(catalog)]


def parse_test_catalog(stream):
    tests = {}
    for lineno, record in _iter_records(stream):
        test_id = str(_field(record, "test", (str, int), lineno))
        path = _field(record, "path", str, lineno, required=False, default="")
        module = _field(record, "module", str, lineno, required=False)
        if test_id in tests:
            raise DataError(f"line {lineno}: duplicate test {test_id!r}")
        tests[test_id] = TestCase(test_id, path, module)
    return list(tests.values())


def parse_change(record):
    """Build the ChangeSet for ``predict`` from one commit-log style record.

    Returns ``(change, diff_text, language)``; the last two may be None.
    """
    if isinstance(record, str):
        try:
            record = json.loads(record)
        except json.JSONDecodeError as exc:
            raise DataError(f"change file: invalid JSON ({exc.msg})") from exc
    if not isinstance(record, dict):
        raise DataError("change file: expected a JSON object")
    commit = _commit_from_record(record, 1)
    diff = record.get("diff")
    language = record.get("language")
    if diff is not None and not isinstance(diff, str):
        raise DataError("change file: field 'diff' must be a string")
    return ChangeSet.from_commit(commit), diff, language


def _cycle_sort_key(value):
    text = str(value)
    if re.fullmatch(r"-?\d+", text):
        return (0, int(text), text)
    return (1, 0, text)


def parse_ci_csv(stream, schema_name="iofrol_gsdtsr", failure_codes=None):
    """Parse a public CI dataset CSV into cycles without change data."""
    import pandas as pd

    schema = CI_CSV_SCHEMAS.get(schema_name)
    if schema is None:
        raise DataError(f"unknown CSV schema {schema_name!r}")
    codes = {str(code).strip() for code in (failure_codes or schema["failure_codes"])}

    if isinstance(stream, str) and "\n" in stream:
        stream = io.StringIO(stream)
    try:
        df = pd.read_csv(stream, sep=schema["delimiter"], dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        return []

    headers = [normalize_header(column) for column in df.columns]

    def find_col(name):
        for index, header in enumerate(headers):
            if header_matches(header, name):
                return df.columns[index]
        return None

    columns = {}
    for name in schema["required"]:
        column = find_col(name)
        if column is None:
            raise DataError(f"missing required column: {name}")
        columns[name] = column
    for name in schema["optional"]:
        columns[name] = find_col(name)

    if df.empty:
        return []

    test_col = columns["Name"] or columns["Id"]
    frame = pd.DataFrame(
        {
            "cycle": df[columns["Cycle"]].map(normalize_text),
            "test": df[test_col].map(normalize_text),
            "failed": df[columns["Verdict"]].map(normalize_text).isin(codes),
            "last_run": pd.to_datetime(
                df[columns["LastRun"]], errors="coerce", utc=True
            ),
        }
    )
    if columns["Duration"] is not None:
        frame["duration"] = pd.to_numeric(df[columns["Duration"]], errors="coerce")
    else:
        frame["duration"] = float("nan")

    duplicates = int(frame.duplicated(["cycle", "test"]).sum())
    if duplicates:
        log_warn(
            "Duplicate (cycle, test) rows merged; failed wins.",
            count=duplicates,
        )

    cycles = []
    previous_ts = None
    cycle_keys = sorted(frame["cycle"].unique(), key=_cycle_sort_key)
    grouped = dict(tuple(frame.groupby("cycle", sort=False)))
    for index, cycle_key in enumerate(cycle_keys):
        group = grouped[cycle_key]
        stamps = group["last_run"].dropna()
        if len(stamps):
            timestamp = int(stamps.max().timestamp())
        else:
            timestamp = index * SECONDS_PER_DAY
        if previous_ts is not None and timestamp < previous_ts:
            timestamp = previous_ts
        previous_ts = timestamp

        merged = {}
        for test_id, failed, duration in zip(
            group["test"], group["failed"], group["duration"]
        ):
            duration = None if duration != duration else float(duration)
            if test_id in merged:
                prev_failed, prev_duration = merged[test_id]
                merged[test_id] = (
                    prev_failed or bool(failed),
                    prev_duration if duration is None else duration,
                )
            else:
                merged[test_id] = (bool(failed), duration)
        verdicts = tuple(
            TestVerdict(
                str(cycle_key),
                test_id,
                timestamp,
                "failed" if failed else "passed",
                duration,
            )
            for test_id, (failed, duration) in merged.items()
        )
        cycles.append(CICycle(str(cycle_key), timestamp, (), verdicts))

    log_info(
        "CI dataset parsed.",
        cycle=len(cycles),
        count=sum(len(cycle.verdicts) for cycle in cycles),
    )
    return cycles


def chronological_split(cycles, train_days, val_days):
    """Split into a training window followed by a strictly later validation window.

    Windows are measured back from the last cycle's timestamp in exact
    86 400-second days; cycles older than both windows are dropped.
    """
    if train_days <= 0 or val_days <= 0:
        raise DataError("train_days and val_days must be positive")
    cycles = list(cycles)
    if len(cycles) < 2:
        raise DataError("insufficient history")
    reference = cycles[-1].timestamp
    val_start = reference - val_days * SECONDS_PER_DAY
    train_start = val_start - train_days * SECONDS_PER_DAY
    train = [c for c in cycles if train_start < c.timestamp <= val_start]
    val = [c for c in cycles if c.timestamp > val_start]
    if not train or not val:
        raise DataError("insufficient history")
    return train, val


def split_by_fraction(cycles, holdout_fraction):
    cycles = list(cycles)
    if not 0.0 < holdout_fraction < 1.0:
        raise DataError("holdout_fraction must be in (0, 1)")
    if len(cycles) < 2:
        raise DataError("insufficient history")
    n_holdout = min(len(cycles) - 1, max(1, int(round(len(cycles) * holdout_fraction))))
    cut = len(cycles) - n_holdout
    boundary = cycles[cut].timestamp
    train = [c for c in cycles[:cut] if c.timestamp < boundary]
    if not train:
        raise DataError("insufficient history")
    return train, cycles[cut:]


def dump_commit_log(commits):
    lines = []
    for commit in commits:
        record = {
            "id": commit.commit_id,
            "ts": commit.timestamp,
            "author": commit.author_id,
            "files": [
                {
                    "path": change.path,
                    "type": change.change_type,
                    "add": change.lines_added,
                    "del": change.lines_deleted,
                }
                for change in commit.changes
            ],
        }
        lines.append(json.dumps(record, ensure_ascii=False, sort_keys=True))
    return lines


def dump_test_results(cycles, tests=None):
    paths = {}
    for test in tests or ():
        paths[test.test_id] = test
    lines = []
    for cycle in cycles:
        results = []
        for verdict in cycle.verdicts:
            entry = {"test": verdict.test_id, "verdict": verdict.verdict}
            test = paths.get(verdict.test_id)
            if test is not None and test.test_path:
                entry["path"] = test.test_path
                if test.module_id:
                    entry["module"] = test.module_id
            if verdict.duration is not None:
                entry["duration"] = verdict.duration
            if verdict.flaky:
                entry["flaky"] = True
            if verdict.broken:
                entry["broken"] = True
            results.append(entry)
        record = {
            "cycle": cycle.cycle_id,
            "ts": cycle.timestamp,
            "commits": list(cycle.commit_ids),
            "results": results,
        }
        lines.append(json.dumps(record, ensure_ascii=False, sort_keys=True))
    return lines


def dump_test_catalog(tests):
    lines = []
    for test in tests:
        record = {"test": test.test_id, "path": test.test_path}
        if test.module_id:
            record["module"] = test.module_id
        lines.append(json.dumps(record, ensure_ascii=False, sort_keys=True))
    return lines
