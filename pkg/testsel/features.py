"""Feature families and the commit-as-bag-of-files row layout.

Every windowed feature looks at events in ``[as_of - W, as_of)`` only, and
the commits of the change being scored never count toward its own history.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .datamodel import (
    ChangeSet,
    FeatureRow,
    FeatureVocabulary,
    FileChange,
    TestCase,
    path_extension,
)
from .logging_utils import log_info, log_warn
from .settings import (
    AUTHOR_WINDOW_DAYS,
    CHANGE_TYPES,
    CHANGE_WINDOWS_DAYS,
    CO_FAILURE_WINDOW_DAYS,
    CROSS_NEIGHBORS,
    DEFAULT_EXTENSION_MIN_COUNT,
    DEFAULT_MAX_CHANGE_FRACTION,
    DEFAULT_MIN_CHANGES_56D,
    DEFAULT_STABILITY_POLICY,
    EXECUTION_WINDOW_DAYS,
    FAILURE_WINDOWS_DAYS,
    FEATURE_GROUPS,
    SECONDS_PER_DAY,
)


ACTIVITY_WINDOW_DAYS = CHANGE_WINDOWS_DAYS[-1]


class HistoryIndex:
    """Read-only lookup structure over commits and CI cycles."""

    def __init__(self, commits=(), cycles=()):
        self.commits = tuple(sorted(commits, key=lambda c: (c.timestamp, c.commit_id)))
        self.commit_by_id = {commit.commit_id: commit for commit in self.commits}
        self.cycles = tuple(sorted(cycles, key=lambda c: c.timestamp))

        per_path = {}
        for commit in self.commits:
            for change in commit.changes:
                entry = per_path.setdefault(change.path, ([], [], []))
                entry[0].append(commit.timestamp)
                entry[1].append(commit.author_id)
                entry[2].append(commit.commit_id)
        self.path_times = {
            path: np.asarray(entry[0], dtype=np.int64) for path, entry in per_path.items()
        }
        self.path_authors = {path: tuple(entry[1]) for path, entry in per_path.items()}
        self.path_commits = {path: tuple(entry[2]) for path, entry in per_path.items()}
        self.commit_times = np.asarray([c.timestamp for c in self.commits], dtype=np.int64)
        self.cycle_times = np.asarray([c.timestamp for c in self.cycles], dtype=np.int64)

        per_test = {}
        flagged = {}
        durations = {}
        for cycle in self.cycles:
            for verdict in cycle.verdicts:
                if verdict.duration is not None:
                    durations.setdefault(verdict.test_id, []).append(verdict.duration)
                if verdict.unstable:
                    flagged.setdefault(verdict.test_id, []).append(
                        (verdict.timestamp, verdict.flaky, verdict.broken)
                    )
                    continue
                entry = per_test.setdefault(verdict.test_id, ([], []))
                entry[0].append(verdict.timestamp)
                entry[1].append(1 if verdict.failed else 0)
        self.test_times = {}
        self.test_failed_cum = {}
        self.test_failed = {}
        for test_id, (times, failed) in per_test.items():
            failed = np.asarray(failed, dtype=np.int64)
            self.test_times[test_id] = np.asarray(times, dtype=np.int64)
            self.test_failed[test_id] = failed
            self.test_failed_cum[test_id] = np.concatenate(([0], np.cumsum(failed)))
        self.flagged = flagged

        # cycle-level view: which paths each cycle changed and which tests it failed
        per_path_cycles = {}
        self.cycle_failures = []
        for index, cycle in enumerate(self.cycles):
            self.cycle_failures.append(
                tuple(v.test_id for v in cycle.verdicts if v.failed and not v.unstable)
            )
            touched = {}
            for commit_id in cycle.commit_ids:
                commit = self.commit_by_id.get(commit_id)
                if commit is None:
                    continue
                for path in commit.paths:
                    touched.setdefault(path, []).append(commit_id)
            for path, commit_ids in touched.items():
                entry = per_path_cycles.setdefault(path, ([], [], []))
                entry[0].append(cycle.timestamp)
                entry[1].append(index)
                entry[2].append(tuple(commit_ids))
        self.path_cycle_times = {
            path: np.asarray(entry[0], dtype=np.int64) for path, entry in per_path_cycles.items()
        }
        self.path_cycle_index = {path: tuple(entry[1]) for path, entry in per_path_cycles.items()}
        self.path_cycle_commits = {path: tuple(entry[2]) for path, entry in per_path_cycles.items()}
        self.mean_durations = {
            test_id: float(np.mean(values)) for test_id, values in durations.items()
        }

    @property
    def test_ids(self):
        ids = set(self.test_times) | set(self.flagged)
        return sorted(ids)

    def file_paths(self):
        return sorted(self.path_times)

    def cycles_in_window(self, start, end):
        lo = np.searchsorted(self.cycle_times, start, side="left")
        hi = np.searchsorted(self.cycle_times, end, side="left")
        if hi > lo:
            return int(hi - lo)
        # no CI cycles in the window: count distinct commit days instead
        lo = np.searchsorted(self.commit_times, start, side="left")
        hi = np.searchsorted(self.commit_times, end, side="left")
        return int(np.unique(self.commit_times[lo:hi] // SECONDS_PER_DAY).size)


def ensure_history(history_or_commits, cycles=()):
    if isinstance(history_or_commits, HistoryIndex):
        return history_or_commits
    return HistoryIndex(history_or_commits or (), cycles)


def as_test_case(test):
    if isinstance(test, TestCase):
        return test
    return TestCase(str(test))


@dataclass(frozen=True)
class FileFeatureVector:
    __test__ = False

    change_flag: int = 0
    n_distinct_authors: int = 0
    lines_added: int = 0
    lines_deleted: int = 0
    change_type: str = None
    n_changes_3d: int = 0
    n_changes_14d: int = 0
    n_changes_56d: int = 0

    def values(self):
        one_hot = [1.0 if self.change_type == name else 0.0 for name in CHANGE_TYPES]
        return (
            [
                float(self.change_flag),
                float(self.n_distinct_authors),
                float(self.lines_added),
                float(self.lines_deleted),
            ]
            + one_hot
            + [
                float(self.n_changes_3d),
                float(self.n_changes_14d),
                float(self.n_changes_56d),
            ]
        )


@dataclass(frozen=True)
class TestFeatureVector:
    __test__ = False

    failure_rate_7d: float = 0.0
    failure_rate_14d: float = 0.0
    failure_rate_28d: float = 0.0
    last_failed: int = 0
    executions_28d: int = 0

    def values(self):
        return [
            self.failure_rate_7d,
            self.failure_rate_14d,
            self.failure_rate_28d,
            float(self.last_failed),
            float(self.executions_28d),
        ]


@dataclass(frozen=True)
class CrossNeighbor:
    path: str
    features: FileFeatureVector
    extension: str
    distance: int


@dataclass(frozen=True)
class CrossFeatureVector:
    neighbors: tuple = ()
    has_test_path: bool = False

    def values(self, vocab):
        width = vocab.cross_width
        out = [0.0] * (vocab.cross_slots * width)
        # padding only applies once at least one neighbour exists
        if not self.has_test_path or not self.neighbors:
            return out
        for slot in range(vocab.cross_slots):
            base = slot * width
            if slot >= len(self.neighbors):
                out[base + width - 1] = float(vocab.distance_sentinel)
                continue
            neighbor = self.neighbors[slot]
            out[base:base + vocab.file_width] = neighbor.features.values()
            out[base + vocab.file_width + vocab.extension_slot(neighbor.extension)] = 1.0
            out[base + width - 1] = float(neighbor.distance)
        return out


@dataclass(frozen=True)
class UnknownFilesAggregate:
    n_filtered_files: int = 0
    lines_added_sum: int = 0
    lines_deleted_sum: int = 0
    mean_n_changes_3d: float = 0.0
    mean_n_changes_14d: float = 0.0
    mean_n_changes_56d: float = 0.0

    @classmethod
    def from_vectors(cls, vectors):
        vectors = list(vectors)
        if not vectors:
            return cls()
        count = len(vectors)
        return cls(
            count,
            sum(v.lines_added for v in vectors),
            sum(v.lines_deleted for v in vectors),
            sum(v.n_changes_3d for v in vectors) / count,
            sum(v.n_changes_14d for v in vectors) / count,
            sum(v.n_changes_56d for v in vectors) / count,
        )

    def values(self):
        return [
            float(self.n_filtered_files),
            float(self.lines_added_sum),
            float(self.lines_deleted_sum),
            self.mean_n_changes_3d,
            self.mean_n_changes_14d,
            self.mean_n_changes_56d,
        ]


@dataclass(frozen=True)
class CoFailureVector:
    """How strongly the test failed together with the change's files before."""

    rate_max: float = 0.0
    count_max: int = 0
    n_files: int = 0

    def values(self):
        return [self.rate_max, float(self.count_max), float(self.n_files)]


def _directories(path, is_dir=False):
    parts = [part for part in path.split("/") if part]
    return parts if is_dir else parts[:-1]


def _tree_distance(dirs_a, dirs_b):
    common = 0
    for left, right in zip(dirs_a, dirs_b):
        if left != right:
            break
        common += 1
    return (len(dirs_a) - common) + (len(dirs_b) - common)


def directory_distance(path_a, path_b):
    """Tree distance between the directories holding two files."""
    return _tree_distance(_directories(path_a), _directories(path_b))


def directory_tree_distance(dir_a, dir_b):
    return _tree_distance(_directories(dir_a, True), _directories(dir_b, True))


def _window_entries(history, path, as_of, days, exclude):
    times = history.path_times.get(path)
    if times is None:
        return []
    lo = int(np.searchsorted(times, as_of - days * SECONDS_PER_DAY, side="left"))
    hi = int(np.searchsorted(times, as_of, side="left"))
    commit_ids = history.path_commits[path]
    return [i for i in range(lo, hi) if commit_ids[i] not in exclude]


def file_features(path, commits, as_of, current_change=None, exclude_commits=()):
    history = ensure_history(commits)
    exclude = set(exclude_commits)
    counts = []
    for days in CHANGE_WINDOWS_DAYS:
        counts.append(len(_window_entries(history, path, as_of, days, exclude)))
    author_entries = _window_entries(history, path, as_of, AUTHOR_WINDOW_DAYS, exclude)
    authors = {history.path_authors[path][i] for i in author_entries}
    if current_change is None:
        return FileFeatureVector(0, len(authors), 0, 0, None, *counts)
    return FileFeatureVector(
        1,
        len(authors),
        current_change.lines_added,
        current_change.lines_deleted,
        current_change.change_type,
        *counts,
    )


def test_features(test_id, cycles, as_of):
    history = ensure_history((), cycles) if not isinstance(cycles, HistoryIndex) else cycles
    times = history.test_times.get(test_id)
    if times is None or not len(times):
        return TestFeatureVector()
    cum = history.test_failed_cum[test_id]
    hi = int(np.searchsorted(times, as_of, side="left"))
    rates = []
    for days in FAILURE_WINDOWS_DAYS:
        lo = int(np.searchsorted(times, as_of - days * SECONDS_PER_DAY, side="left"))
        runs = hi - lo
        rates.append(float(cum[hi] - cum[lo]) / runs if runs else 0.0)
    lo = int(np.searchsorted(times, as_of - EXECUTION_WINDOW_DAYS * SECONDS_PER_DAY, side="left"))
    last_failed = int(history.test_failed[test_id][hi - 1]) if hi > 0 else 0
    return TestFeatureVector(rates[0], rates[1], rates[2], last_failed, hi - lo)


def co_failure_counts(path, commits, as_of, exclude_commits=()):
    """Window cycles that changed ``path`` and the failures each test had in them.

    Returns ``(n_cycles, {test_id: failures})``. A cycle whose commits touching
    ``path`` are all excluded does not count.
    """
    history = ensure_history(commits)
    times = history.path_cycle_times.get(path)
    if times is None:
        return 0, {}
    exclude = set(exclude_commits)
    lo = int(np.searchsorted(times, as_of - CO_FAILURE_WINDOW_DAYS * SECONDS_PER_DAY, side="left"))
    hi = int(np.searchsorted(times, as_of, side="left"))
    n_cycles = 0
    failures = {}
    for i in range(lo, hi):
        if all(commit_id in exclude for commit_id in history.path_cycle_commits[path][i]):
            continue
        n_cycles += 1
        for test_id in history.cycle_failures[history.path_cycle_index[path][i]]:
            failures[test_id] = failures.get(test_id, 0) + 1
    return n_cycles, failures


def co_failure_features(test_id, counts):
    """Fold per-file ``(n_cycles, failures)`` pairs into one vector for a test."""
    rate_max = 0.0
    count_max = 0
    n_files = 0
    for n_cycles, failures in counts:
        failed = failures.get(test_id, 0)
        if not failed:
            continue
        n_files += 1
        count_max = max(count_max, failed)
        rate_max = max(rate_max, failed / n_cycles)
    return CoFailureVector(rate_max, count_max, n_files)


def _thresholds(thresholds):
    if isinstance(thresholds, FeatureVocabulary):
        return thresholds.min_changes_56d, thresholds.max_change_fraction
    thresholds = thresholds or {}
    return (
        int(thresholds.get("min_changes_56d", DEFAULT_MIN_CHANGES_56D)),
        float(thresholds.get("max_change_fraction", DEFAULT_MAX_CHANGE_FRACTION)),
    )


def partition_known_files(changed_files, commits, as_of, thresholds=None, exclude_commits=()):
    """Split changed files into known and unknown (too rare or too frequent)."""
    history = ensure_history(commits)
    min_changes, max_fraction = _thresholds(thresholds)
    exclude = set(exclude_commits)
    window_start = as_of - ACTIVITY_WINDOW_DAYS * SECONDS_PER_DAY
    n_cycles = history.cycles_in_window(window_start, as_of)
    known = []
    unknown = []
    ordered = sorted(
        changed_files,
        key=lambda item: item.path if isinstance(item, FileChange) else str(item),
    )
    for item in ordered:
        path = item.path if isinstance(item, FileChange) else str(item)
        n_changes = len(_window_entries(history, path, as_of, ACTIVITY_WINDOW_DAYS, exclude))
        too_rare = n_changes < min_changes
        too_frequent = n_cycles > 0 and n_changes / n_cycles > max_fraction
        if too_rare or too_frequent:
            unknown.append(item)
        else:
            known.append(item)
    return known, unknown


def cross_file_features(test, known_changed_files, commits, as_of, file_vectors=None, exclude_commits=()):
    test = as_test_case(test)
    if not test.test_path:
        return CrossFeatureVector()
    history = ensure_history(commits)
    ranked = []
    for change in known_changed_files:
        ranked.append((directory_distance(change.path, test.test_path), change.path, change))
    ranked.sort(key=lambda item: (item[0], item[1]))
    neighbors = []
    for distance, path, change in ranked[:CROSS_NEIGHBORS]:
        if file_vectors is not None and path in file_vectors:
            vector = file_vectors[path]
        else:
            vector = file_features(path, history, as_of, change, exclude_commits)
        neighbors.append(CrossNeighbor(path, vector, path_extension(path), distance))
    return CrossFeatureVector(tuple(neighbors), True)


@dataclass(frozen=True)
class PreparedChange:
    change: ChangeSet
    base_features: dict
    known_changes: tuple
    file_vectors: dict
    exclude_commits: frozenset
    co_failures: tuple = ()


def prepare_change(change, histories, vocab, exclude_commits=None):
    """Compute the per-change blocks once; rows for each test reuse them."""
    history = ensure_history(histories)
    exclude = set(exclude_commits or ())
    exclude.add(change.change_id)
    exclude = frozenset(exclude)
    as_of = change.timestamp

    base = {}
    file_vectors = {}
    known = []
    if "file" in vocab.groups or "cross" in vocab.groups:
        for item in change.files:
            file_vectors[item.path] = file_features(item.path, history, as_of, item, exclude)
        known, unknown = partition_known_files(change.files, history, as_of, vocab, exclude)
        if "file" in vocab.groups:
            routed = [file_vectors[item.path] for item in unknown]
            for item in known:
                offset = vocab.file_offset(item.path)
                if offset is None:
                    routed.append(file_vectors[item.path])
                    continue
                for position, value in enumerate(file_vectors[item.path].values()):
                    if value:
                        base[offset + position] = value
            aggregate = UnknownFilesAggregate.from_vectors(routed)
            for position, value in enumerate(aggregate.values()):
                if value:
                    base[vocab.unknown_offset + position] = value
    co_failures = ()
    if "co_failure" in vocab.groups:
        co_failures = tuple(
            co_failure_counts(item.path, history, as_of, exclude) for item in change.files
        )
    return PreparedChange(change, base, tuple(known), file_vectors, exclude, co_failures)


def row_for_test(prepared, test, histories, vocab, label=None, key=None):
    history = ensure_history(histories)
    test = as_test_case(test)
    as_of = prepared.change.timestamp
    features = dict(prepared.base_features)
    if "test" in vocab.groups:
        for position, value in enumerate(test_features(test.test_id, history, as_of).values()):
            if value:
                features[vocab.test_offset + position] = value
    if vocab.cross_slots:
        cross = cross_file_features(
            test,
            prepared.known_changes,
            history,
            as_of,
            prepared.file_vectors,
            prepared.exclude_commits,
        )
        for position, value in enumerate(cross.values(vocab)):
            if value:
                features[vocab.cross_offset + position] = value
    if "co_failure" in vocab.groups:
        vector = co_failure_features(test.test_id, prepared.co_failures)
        for position, value in enumerate(vector.values()):
            if value:
                features[vocab.co_failure_offset + position] = value
    return FeatureRow(
        key if key is not None else prepared.change.change_id,
        test.test_id,
        features,
        label,
        vocab.fingerprint,
    )


def build_row(change, test, histories, vocab, exclude_commits=None):
    prepared = prepare_change(change, histories, vocab, exclude_commits)
    return row_for_test(prepared, test, histories, vocab)


def build_vocabulary(
    commits,
    cycles=(),
    tests=(),
    groups=FEATURE_GROUPS,
    thresholds=None,
    min_extension_count=DEFAULT_EXTENSION_MIN_COUNT,
):
    """Layout built from the training history (sorted universe, deterministic)."""
    min_changes, max_fraction = _thresholds(thresholds)
    paths = set()
    extension_counts = {}
    for commit in commits:
        for change in commit.changes:
            paths.add(change.path)
            extension = path_extension(change.path)
            if extension:
                extension_counts[extension] = extension_counts.get(extension, 0) + 1
    extensions = sorted(
        ext for ext, count in extension_counts.items() if count >= min_extension_count
    )

    test_dirs = set()
    for test in tests:
        test = as_test_case(test)
        if test.test_path:
            test_dirs.add(tuple(_directories(test.test_path)))
    file_dirs = {tuple(_directories(path)) for path in paths}
    max_distance = 0
    for test_dir in test_dirs:
        for file_dir in file_dirs:
            max_distance = max(max_distance, _tree_distance(test_dir, file_dir))

    vocab = FeatureVocabulary(
        files=tuple(paths),
        extensions=tuple(extensions),
        distance_sentinel=max_distance + 1,
        groups=tuple(groups),
        min_changes_56d=min_changes,
        max_change_fraction=max_fraction,
    )
    log_info(
        "Feature vocabulary built.",
        count=len(vocab.files),
        total=vocab.size,
        config=",".join(vocab.groups),
    )
    return vocab


def _catalog(tests):
    catalog = {}
    for test in tests or ():
        test = as_test_case(test)
        catalog[test.test_id] = test
    return catalog


def build_training_matrix(
    cycles,
    commits,
    vocab,
    stability_policy=None,
    tests=None,
    history=None,
    workers=1,
):
    """One labeled row per (cycle, executed stable test), features as of the cycle."""
    policy = dict(DEFAULT_STABILITY_POLICY)
    policy.update(stability_policy or {})
    history = history or HistoryIndex(commits, cycles)
    catalog = _catalog(tests)

    def rows_for_cycle(cycle):
        cycle_commits = []
        for commit_id in cycle.commit_ids:
            commit = history.commit_by_id.get(commit_id)
            if commit is None:
                log_warn("Cycle references unknown commit.", cycle=cycle.cycle_id, commit=commit_id)
                continue
            cycle_commits.append(commit)
        change = ChangeSet.from_commits(cycle.cycle_id, cycle.timestamp, cycle_commits)
        prepared = prepare_change(change, history, vocab, set(cycle.commit_ids))
        rows = []
        for verdict in cycle.verdicts:
            if verdict.flaky and policy["drop_flaky"]:
                continue
            if verdict.broken and policy["drop_broken"]:
                continue
            test = catalog.get(verdict.test_id) or TestCase(verdict.test_id)
            rows.append(
                row_for_test(
                    prepared,
                    test,
                    history,
                    vocab,
                    label=1 if verdict.failed else 0,
                    key=cycle.cycle_id,
                )
            )
        return rows

    cycles = list(cycles)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            batches = list(pool.map(rows_for_cycle, cycles))
    else:
        batches = [rows_for_cycle(cycle) for cycle in cycles]
    rows = [row for batch in batches for row in batch]
    log_info(
        "Training rows built.",
        cycle=len(cycles),
        rows=len(rows),
        positives=sum(row.label for row in rows),
    )
    return rows

