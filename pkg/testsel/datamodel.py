"""In-memory history types shared by every stage of the pipeline.

All records are frozen dataclasses; collections are stored as tuples so a
history can be shared read-only between workers.
"""

import hashlib
import json
import math
import posixpath
import unicodedata
from dataclasses import dataclass, field
from functools import cached_property
from types import MappingProxyType

from .errors import DataError
from .settings import (
    CHANGE_TYPES,
    CHANGE_WINDOWS_DAYS,
    CROSS_NEIGHBORS,
    DEFAULT_MAX_CHANGE_FRACTION,
    DEFAULT_MIN_CHANGES_56D,
    EXECUTION_WINDOW_DAYS,
    FAILURE_WINDOWS_DAYS,
    FEATURE_GROUPS,
    OTHER_EXTENSION,
    VERDICTS,
)


FILE_FEATURE_NAMES = (
    ("change_flag", "n_distinct_authors", "lines_added", "lines_deleted")
    + tuple(f"change_type_{name}" for name in CHANGE_TYPES)
    + tuple(f"n_changes_{days}d" for days in CHANGE_WINDOWS_DAYS)
)
TEST_FEATURE_NAMES = (
    tuple(f"failure_rate_{days}d" for days in FAILURE_WINDOWS_DAYS)
    + ("last_failed", f"executions_{EXECUTION_WINDOW_DAYS}d")
)
UNKNOWN_FEATURE_NAMES = (
    "n_filtered_files",
    "lines_added_sum",
    "lines_deleted_sum",
) + tuple(f"mean_n_changes_{days}d" for days in CHANGE_WINDOWS_DAYS)
CO_FAILURE_FEATURE_NAMES = (
    "rate_max",
    "count_max",
    "n_files",
)


def normalize_path(path):
    if path is None:
        return ""
    text = unicodedata.normalize("NFC", str(path)).strip().replace("\\", "/")
    while text.startswith("./"):
        text = text[2:]
    while "//" in text:
        text = text.replace("//", "/")
    return text.strip("/")


def path_extension(path):
    name = posixpath.basename(path)
    if "." not in name.lstrip("."):
        return ""
    return name.rsplit(".", 1)[1].lower()


@dataclass(frozen=True)
class FileChange:
    path: str
    change_type: str = "modified"
    lines_added: int = 0
    lines_deleted: int = 0

    def __post_init__(self):
        path = normalize_path(self.path)
        if not path:
            raise DataError("file change path must be non-empty")
        object.__setattr__(self, "path", path)
        if self.change_type not in CHANGE_TYPES:
            raise DataError(
                f"unknown change_type {self.change_type!r} for {path}"
            )
        if self.lines_added < 0 or self.lines_deleted < 0:
            raise DataError(f"negative line counts for {path}")
        if self.change_type == "deleted" and self.lines_added:
            raise DataError(f"deleted file {path} cannot add lines")


@dataclass(frozen=True)
class CommitRecord:
    commit_id: str
    timestamp: int
    author_id: str
    changes: tuple = ()

    def __post_init__(self):
        if not self.commit_id:
            raise DataError("commit_id must be non-empty")
        changes = tuple(self.changes)
        seen = set()
        for change in changes:
            if change.path in seen:
                raise DataError(
                    f"duplicate path {change.path!r} in commit {self.commit_id}"
                )
            seen.add(change.path)
        object.__setattr__(self, "changes", changes)
        object.__setattr__(self, "timestamp", int(self.timestamp))

    @property
    def paths(self):
        return tuple(change.path for change in self.changes)


@dataclass(frozen=True)
class TestCase:
    __test__ = False

    test_id: str
    test_path: str = ""
    module_id: str = None

    def __post_init__(self):
        if not self.test_id:
            raise DataError("test_id must be non-empty")
        object.__setattr__(self, "test_path", normalize_path(self.test_path))


@dataclass(frozen=True)
class TestVerdict:
    __test__ = False

    cycle_id: str
    test_id: str
    timestamp: int
    verdict: str
    duration: float = None
    flaky: bool = False
    broken: bool = False

    def __post_init__(self):
        if self.verdict not in VERDICTS:
            raise DataError(
                f"verdict must be one of {VERDICTS}, got {self.verdict!r}"
            )
        object.__setattr__(self, "timestamp", int(self.timestamp))

    @property
    def failed(self):
        return self.verdict == "failed"

    @property
    def unstable(self):
        return self.flaky or self.broken


@dataclass(frozen=True)
class CICycle:
    cycle_id: str
    timestamp: int
    commit_ids: tuple = ()
    verdicts: tuple = ()

    def __post_init__(self):
        verdicts = tuple(self.verdicts)
        seen = set()
        for verdict in verdicts:
            if verdict.cycle_id != self.cycle_id:
                raise DataError(
                    f"verdict for {verdict.test_id} belongs to cycle "
                    f"{verdict.cycle_id}, not {self.cycle_id}"
                )
            if verdict.test_id in seen:
                raise DataError(
                    f"duplicate verdict for {verdict.test_id} in cycle "
                    f"{self.cycle_id}"
                )
            seen.add(verdict.test_id)
        object.__setattr__(self, "verdicts", verdicts)
        object.__setattr__(self, "commit_ids", tuple(self.commit_ids))
        object.__setattr__(self, "timestamp", int(self.timestamp))

    @property
    def test_ids(self):
        return tuple(verdict.test_id for verdict in self.verdicts)


@dataclass(frozen=True)
class ChangeSet:
    """A scored unit: one commit at inference, a cycle's commits in training."""

    change_id: str
    timestamp: int
    files: tuple = ()
    author_id: str = ""

    def __post_init__(self):
        merged = {}
        for change in self.files:
            previous = merged.get(change.path)
            if previous is None:
                merged[change.path] = change
                continue
            lines_added = previous.lines_added + change.lines_added
            if change.change_type == "deleted":
                lines_added = 0
            merged[change.path] = FileChange(
                change.path,
                change.change_type,
                lines_added,
                previous.lines_deleted + change.lines_deleted,
            )
        files = tuple(merged[path] for path in sorted(merged))
        object.__setattr__(self, "files", files)
        object.__setattr__(self, "timestamp", int(self.timestamp))

    @property
    def paths(self):
        return tuple(change.path for change in self.files)

    @classmethod
    def from_commit(cls, commit):
        return cls(
            commit.commit_id,
            commit.timestamp,
            commit.changes,
            commit.author_id,
        )

    @classmethod
    def from_commits(cls, change_id, timestamp, commits):
        ordered = sorted(commits, key=lambda c: (c.timestamp, c.commit_id))
        files = [change for commit in ordered for change in commit.changes]
        return cls(change_id, timestamp, tuple(files))


@dataclass(frozen=True)
class FeatureRow:
    key: str
    test_id: str
    sparse_features: MappingProxyType = field(default_factory=dict)
    label: int = None
    vocab_fingerprint: str = None

    def __post_init__(self):
        cleaned = {}
        for feature_id, value in sorted(dict(self.sparse_features).items()):
            value = float(value)
            if not math.isfinite(value):
                raise DataError(
                    f"non-finite value for feature {feature_id} in row "
                    f"{self.key}/{self.test_id}"
                )
            if value != 0.0:
                cleaned[int(feature_id)] = value
        object.__setattr__(self, "sparse_features", MappingProxyType(cleaned))
        if self.label is not None and self.label not in (0, 1):
            raise DataError(f"label must be 0 or 1, got {self.label!r}")


@dataclass(frozen=True)
class FeatureVocabulary:
    """Position layout of a feature row.

    Blocks, in order: one block of ``file_width`` slots per known file, the
    test block, ``cross_slots`` neighbour blocks, the unknown-files block and
    the co-failure block.
    """

    files: tuple = ()
    extensions: tuple = ()
    distance_sentinel: int = 1
    groups: tuple = FEATURE_GROUPS
    min_changes_56d: int = DEFAULT_MIN_CHANGES_56D
    max_change_fraction: float = DEFAULT_MAX_CHANGE_FRACTION

    def __post_init__(self):
        object.__setattr__(self, "files", tuple(sorted(set(self.files))))
        object.__setattr__(self, "extensions", tuple(sorted(set(self.extensions))))
        unknown = [group for group in self.groups if group not in FEATURE_GROUPS]
        if unknown:
            raise DataError(f"unknown feature groups: {unknown}")
        object.__setattr__(
            self,
            "groups",
            tuple(group for group in FEATURE_GROUPS if group in self.groups),
        )

    @cached_property
    def file_index(self):
        if "file" not in self.groups:
            return {}
        return {path: slot for slot, path in enumerate(self.files)}

    @property
    def file_width(self):
        return len(FILE_FEATURE_NAMES)

    @property
    def test_width(self):
        return len(TEST_FEATURE_NAMES) if "test" in self.groups else 0

    @property
    def extension_slots(self):
        return self.extensions + (OTHER_EXTENSION,)

    @property
    def cross_width(self):
        return self.file_width + len(self.extension_slots) + 1

    @property
    def cross_slots(self):
        return CROSS_NEIGHBORS if "cross" in self.groups else 0

    @property
    def unknown_width(self):
        return len(UNKNOWN_FEATURE_NAMES) if "file" in self.groups else 0

    @property
    def test_offset(self):
        return len(self.file_index) * self.file_width

    @property
    def cross_offset(self):
        return self.test_offset + self.test_width

    @property
    def unknown_offset(self):
        return self.cross_offset + self.cross_slots * self.cross_width

    @property
    def co_failure_width(self):
        return len(CO_FAILURE_FEATURE_NAMES) if "co_failure" in self.groups else 0

    @property
    def co_failure_offset(self):
        return self.unknown_offset + self.unknown_width

    @property
    def size(self):
        return self.co_failure_offset + self.co_failure_width

    def file_offset(self, path):
        slot = self.file_index.get(path)
        if slot is None:
            return None
        return slot * self.file_width

    def extension_slot(self, extension):
        if extension in self.extensions:
            return self.extensions.index(extension)
        return len(self.extensions)

    def group_of(self, feature_id):
        if not 0 <= feature_id < self.size:
            raise DataError(f"feature id {feature_id} outside vocabulary")
        if feature_id < self.test_offset:
            return "file"
        if feature_id < self.cross_offset:
            return "test"
        if feature_id < self.unknown_offset:
            return "cross"
        if feature_id < self.co_failure_offset:
            return "unknown"
        return "co_failure"

    def feature_name(self, feature_id):
        group = self.group_of(feature_id)
        if group == "file":
            slot, position = divmod(feature_id, self.file_width)
            return f"file[{self.files[slot]}].{FILE_FEATURE_NAMES[position]}"
        if group == "test":
            return f"test.{TEST_FEATURE_NAMES[feature_id - self.test_offset]}"
        if group == "cross":
            neighbor, position = divmod(
                feature_id - self.cross_offset, self.cross_width
            )
            if position < self.file_width:
                name = FILE_FEATURE_NAMES[position]
            elif position < self.cross_width - 1:
                extension = self.extension_slots[position - self.file_width]
                name = f"extension_{extension}"
            else:
                name = "distance"
            return f"cross[{neighbor}].{name}"
        if group == "co_failure":
            return f"co_failure.{CO_FAILURE_FEATURE_NAMES[feature_id - self.co_failure_offset]}"
        return f"unknown.{UNKNOWN_FEATURE_NAMES[feature_id - self.unknown_offset]}"

    def to_dict(self):
        return {
            "files": list(self.files),
            "extensions": list(self.extensions),
            "distance_sentinel": int(self.distance_sentinel),
            "groups": list(self.groups),
            "min_changes_56d": int(self.min_changes_56d),
            "max_change_fraction": float(self.max_change_fraction),
            "file_features": list(FILE_FEATURE_NAMES),
            "test_features": list(TEST_FEATURE_NAMES),
            "unknown_features": list(UNKNOWN_FEATURE_NAMES),
            "co_failure_features": list(CO_FAILURE_FEATURE_NAMES),
        }

    @classmethod
    def from_dict(cls, data):
        if list(data.get("file_features", FILE_FEATURE_NAMES)) != list(
            FILE_FEATURE_NAMES
        ) or list(data.get("test_features", TEST_FEATURE_NAMES)) != list(
            TEST_FEATURE_NAMES
        ) or list(data.get("co_failure_features", CO_FAILURE_FEATURE_NAMES)) != list(
            CO_FAILURE_FEATURE_NAMES
        ):
            raise DataError("vocabulary feature layout does not match this build")
        return cls(
            files=tuple(data.get("files") or ()),
            extensions=tuple(data.get("extensions") or ()),
            distance_sentinel=int(data.get("distance_sentinel", 1)),
            groups=tuple(data.get("groups") or FEATURE_GROUPS),
            min_changes_56d=int(data.get("min_changes_56d", DEFAULT_MIN_CHANGES_56D)),
            max_change_fraction=float(
                data.get("max_change_fraction", DEFAULT_MAX_CHANGE_FRACTION)
            ),
        )

    @cached_property
    def fingerprint(self):
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass
class ValidationReport:
    entries: list = field(default_factory=list)

    def add(self, kind, item_id, detail=""):
        self.entries.append({"kind": kind, "id": item_id, "detail": detail})

    def of_kind(self, kind):
        return [entry for entry in self.entries if entry["kind"] == kind]

    def counts(self):
        totals = {}
        for entry in self.entries:
            totals[entry["kind"]] = totals.get(entry["kind"], 0) + 1
        return totals

    @property
    def is_clean(self):
        return not self.entries

    def to_dict(self):
        return {"entries": list(self.entries), "counts": self.counts()}


def validate_history(commits, cycles, tests=None):
    """Report data-quality issues; the inputs are never modified."""
    report = ValidationReport()

    seen_commits = set()
    previous_ts = None
    for commit in commits:
        if commit.commit_id in seen_commits:
            report.add("duplicate_commit_id", commit.commit_id)
        seen_commits.add(commit.commit_id)
        if previous_ts is not None and commit.timestamp < previous_ts:
            report.add(
                "non_monotone_commit",
                commit.commit_id,
                f"{commit.timestamp} < {previous_ts}",
            )
        previous_ts = commit.timestamp
        if not commit.changes:
            report.add("empty_commit", commit.commit_id)

    known_tests = None
    if tests is not None:
        known_tests = {
            test.test_id if isinstance(test, TestCase) else str(test)
            for test in tests
        }

    seen_cycles = set()
    previous_ts = None
    for cycle in cycles:
        if cycle.cycle_id in seen_cycles:
            report.add("duplicate_cycle_id", cycle.cycle_id)
        seen_cycles.add(cycle.cycle_id)
        if previous_ts is not None and cycle.timestamp < previous_ts:
            report.add(
                "non_monotone_cycle",
                cycle.cycle_id,
                f"{cycle.timestamp} < {previous_ts}",
            )
        previous_ts = cycle.timestamp
        for commit_id in cycle.commit_ids:
            if commit_id not in seen_commits:
                report.add("dangling_commit_ref", cycle.cycle_id, commit_id)
        if known_tests is not None:
            for verdict in cycle.verdicts:
                if verdict.test_id not in known_tests:
                    report.add("unknown_test", verdict.test_id, cycle.cycle_id)
    return report
