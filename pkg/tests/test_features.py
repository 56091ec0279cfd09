import itertools

import numpy as np
import pytest

from conftest import DAY, T0, make_commit, make_cycle
from testsel import features
from testsel.datamodel import (
    FILE_FEATURE_NAMES,
    ChangeSet,
    FeatureVocabulary,
    FileChange,
    TestCase,
)
from testsel.features import (
    CoFailureVector,
    FileFeatureVector,
    HistoryIndex,
    build_row,
    build_training_matrix,
    build_vocabulary,
    co_failure_counts,
    co_failure_features,
    cross_file_features,
    directory_distance,
    file_features,
    partition_known_files,
)
from testsel.synth import synth_generate, synth_universe


D = len(FILE_FEATURE_NAMES)


class TestDirectoryDistance:
    @pytest.mark.parametrize(
        "path_a, path_b, expected",
        [
            ("src/app/pay/Pay.kt", "src/app/pay/PayTest.kt", 0),
            ("src/app/pay/Pay.kt", "src/app/pay/tests/PayTest.kt", 1),
            ("src/app/login/L.kt", "src/app/pay/tests/PayTest.kt", 3),
            ("Root.kt", "a/b/C.kt", 2),
        ],
    )
    def test_examples(self, path_a, path_b, expected):
        assert directory_distance(path_a, path_b) == expected

    def test_metric_properties(self):
        dirs = ["", "a", "a/b", "a/b/c", "a/d", "e", "e/f"]
        paths = [f"{d}/F.kt" if d else "F.kt" for d in dirs]
        for a, b, c in itertools.product(paths, repeat=3):
            assert directory_distance(a, a) == 0
            assert directory_distance(a, b) == directory_distance(b, a)
            assert directory_distance(a, c) <= directory_distance(a, b) + directory_distance(b, c)


class TestFileFeatures:
    AS_OF = T0 + 10 * DAY

    def _commits(self):
        return [
            make_commit("c1", T0, ["src/A.kt"], author="a"),
            make_commit("c2", T0 + DAY, ["src/A.kt"], author="b"),
            make_commit("c3", T0 + 8 * DAY, ["src/A.kt"], author="a"),
        ]

    def test_never_seen_file_is_all_zero(self):
        vector = file_features("src/Nope.kt", self._commits(), self.AS_OF)
        assert vector == FileFeatureVector()
        assert all(value == 0.0 for value in vector.values())

    def test_windows_and_authors(self):
        vector = file_features("src/A.kt", self._commits(), self.AS_OF)
        assert vector.n_distinct_authors == 2
        assert (vector.n_changes_3d, vector.n_changes_14d, vector.n_changes_56d) == (1, 3, 3)
        assert vector.change_flag == 0 and vector.lines_added == 0

    def test_current_change_fills_change_fields(self):
        change = FileChange("src/A.kt", "renamed", 7, 2)
        vector = file_features("src/A.kt", self._commits(), self.AS_OF, change)
        values = vector.values()
        assert values[:4] == [1.0, 2.0, 7.0, 2.0]
        assert values[4:9] == [0.0, 0.0, 0.0, 1.0, 0.0]

    def test_change_at_as_of_is_excluded(self):
        boundary = make_commit("c4", self.AS_OF, ["src/A.kt"], author="z")
        with_boundary = file_features("src/A.kt", self._commits() + [boundary], self.AS_OF)
        assert with_boundary == file_features("src/A.kt", self._commits(), self.AS_OF)

    def test_excluded_commits_do_not_count(self):
        vector = file_features("src/A.kt", self._commits(), self.AS_OF, exclude_commits={"c3"})
        assert vector.n_changes_14d == 2 and vector.n_changes_3d == 0


class TestTestFeatures:
    AS_OF = T0 + 30 * DAY

    def test_rates_in_window(self):
        cycles = [
            make_cycle(f"n{k}", self.AS_OF - k * 3600, [], {"T1": "failed" if k in (3, 5) else "passed"})
            for k in range(10, 0, -1)
        ]
        cycles.append(make_cycle("late", self.AS_OF, [], {"T1": "failed"}))
        cycles.append(make_cycle("flaky", self.AS_OF - 60, [], {"T1": ("failed", "flaky")}))
        vector = features.test_features("T1", cycles, self.AS_OF)
        assert vector.failure_rate_7d == pytest.approx(0.2)
        assert vector.failure_rate_28d == pytest.approx(0.2)
        assert vector.last_failed == 0
        assert vector.executions_28d == 10

    def test_no_runs_gives_zero(self):
        cycles = [make_cycle("old", self.AS_OF - 40 * DAY, [], {"T1": "failed"})]
        vector = features.test_features("T1", cycles, self.AS_OF)
        assert vector.failure_rate_7d == 0.0 and vector.failure_rate_28d == 0.0
        assert vector.last_failed == 1
        assert features.test_features("T9", cycles, self.AS_OF).values() == [0.0] * 5

    def test_all_failed(self):
        cycles = [make_cycle(f"n{k}", self.AS_OF - k * DAY, [], {"T1": "failed"}) for k in (5, 3, 1)]
        vector = features.test_features("T1", cycles, self.AS_OF)
        assert vector.failure_rate_7d == 1.0
        assert vector.last_failed == 1


class TestPartitionKnownFiles:
    AS_OF = T0 + 60 * DAY

    def _history(self):
        cycles = [make_cycle(f"n{i:03d}", self.AS_OF - (i + 1) * 40000) for i in range(100)]
        commits = []
        for i in range(100):
            paths = ["hot.kt"]
            if i < 5:
                paths.append("warm.kt")
            if i == 0:
                paths.append("once.kt")
            commits.append(make_commit(f"c{i:03d}", self.AS_OF - (i + 1) * 40000 - 10, paths))
        return HistoryIndex(commits, cycles)

    def test_examples(self):
        changed = [FileChange("warm.kt"), FileChange("hot.kt"), FileChange("never.kt"), FileChange("once.kt")]
        known, unknown = partition_known_files(changed, self._history(), self.AS_OF)
        assert [item.path for item in known] == ["warm.kt"]
        assert [item.path for item in unknown] == ["hot.kt", "never.kt", "once.kt"]

    def test_thresholds_override(self):
        known, _ = partition_known_files(
            ["once.kt", "hot.kt"],
            self._history(),
            self.AS_OF,
            {"min_changes_56d": 1, "max_change_fraction": 1.0},
        )
        assert known == ["hot.kt", "once.kt"]

    def test_commit_days_stand_in_for_missing_cycles(self):
        commits = [make_commit(f"c{i}", T0 + i * DAY, ["hot.kt"] + (["warm.kt"] if i < 2 else [])) for i in range(10)]
        known, unknown = partition_known_files(["hot.kt", "warm.kt"], commits, T0 + 10 * DAY)
        assert known == ["warm.kt"]
        assert unknown == ["hot.kt"]

    def test_cycles_after_as_of_do_not_change_the_split(self):
        commits = [make_commit(f"c{i}", T0 + i * DAY, ["hot.kt"] + (["warm.kt"] if i < 2 else [])) for i in range(10)]
        history = HistoryIndex(commits, [make_cycle("n1", T0 + 20 * DAY)])
        known, unknown = partition_known_files(["hot.kt", "warm.kt"], history, T0 + 10 * DAY)
        assert (known, unknown) == (["warm.kt"], ["hot.kt"])


class TestCrossFileFeatures:
    TEST = TestCase("T1", "src/app/pay/tests/PayTest.kt")
    VOCAB = FeatureVocabulary(extensions=("kt",), distance_sentinel=9)

    def test_single_neighbor_is_padded_with_sentinel(self):
        cross = cross_file_features(self.TEST, [FileChange("src/app/pay/Pay.kt")], [], T0)
        assert [n.distance for n in cross.neighbors] == [1]
        values = cross.values(self.VOCAB)
        width = self.VOCAB.cross_width
        assert values[0] == 1.0
        assert values[D] == 1.0
        assert values[width - 1] == 1.0
        assert values[2 * width - 1] == 9.0 and values[3 * width - 1] == 9.0
        assert sum(values[width:2 * width - 1]) == 0.0

    def test_neighbors_sorted_by_distance_then_path(self):
        changed = [
            FileChange("src/app/pay/B.kt"),
            FileChange("src/app/pay/A.kt"),
            FileChange("src/app/pay/tests/Z.kt"),
            FileChange("docs/readme.md"),
        ]
        cross = cross_file_features(self.TEST, changed, [], T0)
        assert [n.path for n in cross.neighbors] == [
            "src/app/pay/tests/Z.kt",
            "src/app/pay/A.kt",
            "src/app/pay/B.kt",
        ]

    def test_test_without_path_is_zero(self):
        cross = cross_file_features(TestCase("T1"), [FileChange("src/A.kt")], [], T0)
        assert cross.neighbors == ()
        assert cross.values(self.VOCAB) == [0.0] * (3 * self.VOCAB.cross_width)

    def test_unknown_extension_goes_to_other(self):
        cross = cross_file_features(self.TEST, [FileChange("src/app/pay/x.gradle")], [], T0)
        values = cross.values(self.VOCAB)
        assert values[D] == 0.0 and values[D + 1] == 1.0


class TestCoFailure:
    AS_OF = T0 + 4 * DAY

    def _history(self, extra_commits=(), extra_cycles=()):
        commits = [
            make_commit("c0", T0 - 90 * DAY, ["src/a.kt"]),
            make_commit("c1", T0 + 1 * DAY, ["src/a.kt"]),
            make_commit("c2", T0 + 2 * DAY, ["src/a.kt", "src/b.kt"]),
            make_commit("c3", T0 + 3 * DAY, ["src/b.kt"]),
        ] + list(extra_commits)
        cycles = [
            make_cycle("n0", T0 - 90 * DAY + 100, ["c0"], {"T1": "failed", "T2": "failed"}),
            make_cycle("n1", T0 + 1 * DAY + 100, ["c1"], {"T1": "failed", "T2": "passed"}),
            make_cycle("n2", T0 + 2 * DAY + 100, ["c2"], {"T1": "failed", "T2": "failed"}),
            make_cycle("n3", T0 + 3 * DAY + 100, ["c3"], {"T1": "passed", "T2": ("failed", "flaky")}),
        ] + list(extra_cycles)
        return HistoryIndex(commits, cycles)

    def test_counts_per_changed_file(self):
        history = self._history()
        assert co_failure_counts("src/a.kt", history, self.AS_OF) == (2, {"T1": 2, "T2": 1})
        assert co_failure_counts("src/b.kt", history, self.AS_OF) == (2, {"T1": 1, "T2": 1})
        assert co_failure_counts("src/never.kt", history, self.AS_OF) == (0, {})

    def test_excluded_commits_and_later_cycles_do_not_count(self):
        later = [make_commit("c4", self.AS_OF - 10, ["src/a.kt"])]
        later_cycles = [make_cycle("n4", self.AS_OF, ["c4"], {"T2": "failed"})]
        history = self._history(later, later_cycles)
        assert co_failure_counts("src/a.kt", history, self.AS_OF) == (2, {"T1": 2, "T2": 1})
        assert co_failure_counts("src/a.kt", history, self.AS_OF, {"c2"}) == (1, {"T1": 1})

    def test_folded_vector(self):
        history = self._history()
        counts = [co_failure_counts(path, history, self.AS_OF) for path in ("src/a.kt", "src/b.kt")]
        assert co_failure_features("T1", counts) == CoFailureVector(1.0, 2, 2)
        assert co_failure_features("T2", counts) == CoFailureVector(0.5, 1, 2)
        assert co_failure_features("T9", counts).values() == [0.0, 0.0, 0.0]

    def test_row_block(self):
        history = self._history()
        vocab = build_vocabulary(history.commits, history.cycles)
        change = ChangeSet("x1", self.AS_OF, (FileChange("src/b.kt"), FileChange("src/a.kt")))
        row = build_row(change, TestCase("T1"), history, vocab)
        offset = vocab.co_failure_offset
        assert [row.sparse_features.get(offset + i) for i in range(3)] == [1.0, 2.0, 2.0]
        narrow = build_vocabulary(history.commits, history.cycles, groups=("file", "test", "cross"))
        row = build_row(change, TestCase("T1"), history, narrow)
        assert max(row.sparse_features) < narrow.size == narrow.co_failure_offset


class TestBuildRow:
    AS_OF = T0 + 21 * DAY
    TEST = TestCase("T1", "src/tests/T1Test.kt")

    def _history(self, extra_commits=(), extra_cycles=()):
        commits = [
            make_commit("c1", T0 + 1 * DAY - 5, ["src/a.kt"]),
            make_commit("c2", T0 + 2 * DAY - 5, ["src/b.kt"]),
            make_commit("c3", T0 + 3 * DAY - 5, ["src/c.kt"]),
            make_commit("c5", T0 + 5 * DAY - 5, ["src/a.kt"]),
            make_commit("c6", T0 + 6 * DAY - 5, ["src/b.kt"]),
            make_commit("c7", T0 + 7 * DAY - 5, ["src/c.kt"]),
        ] + list(extra_commits)
        cycles = [
            make_cycle(f"n{day}", T0 + day * DAY, [], {"T1": "failed" if day % 4 == 0 else "passed"})
            for day in range(1, 21)
        ] + list(extra_cycles)
        return commits, cycles

    def _vocab(self):
        commits, cycles = self._history()
        return build_vocabulary(commits, cycles, [self.TEST])

    def test_block_layout(self):
        commits, cycles = self._history()
        vocab = self._vocab()
        assert vocab.files == ("src/a.kt", "src/b.kt", "src/c.kt")
        change = ChangeSet("x1", self.AS_OF, (FileChange("src/b.kt", "modified", 4, 1),))
        row = build_row(change, self.TEST, HistoryIndex(commits, cycles), vocab)
        for feature_id in row.sparse_features:
            assert D <= feature_id < 2 * D or feature_id >= vocab.test_offset
        assert row.sparse_features[D] == 1.0
        assert row.sparse_features[D + 2] == 4.0
        assert not any(fid >= vocab.unknown_offset for fid in row.sparse_features)
        assert row.vocab_fingerprint == vocab.fingerprint
        file_block = [fid for fid in row.sparse_features if fid < vocab.test_offset]
        assert len(file_block) <= len(change.files) * D

    def test_empty_change_only_has_test_block(self):
        commits, cycles = self._history()
        vocab = self._vocab()
        row = build_row(ChangeSet("x2", self.AS_OF), self.TEST, HistoryIndex(commits, cycles), vocab)
        assert row.sparse_features
        assert all(vocab.test_offset <= fid < vocab.cross_offset for fid in row.sparse_features)

    def test_file_order_does_not_matter(self):
        commits, cycles = self._history()
        vocab = self._vocab()
        history = HistoryIndex(commits, cycles)
        files = (FileChange("src/c.kt"), FileChange("src/a.kt"), FileChange("new/Z.kt"))
        forward = build_row(ChangeSet("x3", self.AS_OF, files), self.TEST, history, vocab)
        backward = build_row(ChangeSet("x3", self.AS_OF, files[::-1]), self.TEST, history, vocab)
        assert forward == backward

    def test_unseen_file_goes_to_unknown_block(self):
        commits, cycles = self._history()
        vocab = self._vocab()
        change = ChangeSet("x4", self.AS_OF, (FileChange("new/Z.kt", "added", 9, 0),))
        row = build_row(change, self.TEST, HistoryIndex(commits, cycles), vocab)
        assert row.sparse_features[vocab.unknown_offset] == 1.0
        assert row.sparse_features[vocab.unknown_offset + 1] == 9.0

    def test_own_commit_and_future_events_are_ignored(self):
        vocab = self._vocab()
        change = ChangeSet("c9", self.AS_OF, (FileChange("src/b.kt"),))
        base = build_row(change, self.TEST, HistoryIndex(*self._history()), vocab)
        own = make_commit("c9", self.AS_OF - 100, ["src/b.kt"])
        later = [make_commit("c10", self.AS_OF + 10, ["src/b.kt"]), make_commit("c11", self.AS_OF, ["src/b.kt"])]
        later_cycles = [make_cycle("n99", self.AS_OF, [], {"T1": "failed"})]
        noisy = build_row(
            change, self.TEST, HistoryIndex(*self._history([own] + later, later_cycles)), vocab
        )
        assert noisy == base


class TestBuildTrainingMatrix:
    def test_flagged_verdicts_dropped_and_labels_set(self):
        commits = [make_commit("c1", T0, ["src/a.kt"])]
        cycles = [
            make_cycle("n1", T0 + 10, ["c1"], {"T1": "failed", "T2": "passed", "T3": ("failed", "flaky")}),
        ]
        vocab = build_vocabulary(commits, cycles)
        rows = build_training_matrix(cycles, commits, vocab)
        assert [(row.key, row.test_id, row.label) for row in rows] == [("n1", "T1", 1), ("n1", "T2", 0)]

    def test_keep_flaky_when_policy_allows(self):
        commits = [make_commit("c1", T0, ["src/a.kt"])]
        cycles = [make_cycle("n1", T0 + 10, ["c1"], {"T1": ("failed", "flaky")})]
        vocab = build_vocabulary(commits, cycles)
        rows = build_training_matrix(cycles, commits, vocab, {"drop_flaky": False})
        assert len(rows) == 1 and rows[0].label == 1

    def test_row_count_and_workers(self, small_synth_config):
        config = dict(small_synth_config, flaky_rate=0.1, n_days=12)
        commits, cycles = synth_generate(config, seed=2)
        _, tests, _ = synth_universe(config)
        vocab = build_vocabulary(commits, cycles, tests)
        history = HistoryIndex(commits, cycles)
        rows = build_training_matrix(cycles, commits, vocab, tests=tests, history=history)
        expected = sum(1 for cycle in cycles for v in cycle.verdicts if not v.unstable)
        assert len(rows) == expected
        threaded = build_training_matrix(cycles, commits, vocab, tests=tests, history=history, workers=3)
        assert threaded == rows


def test_vocabulary_extensions_and_sentinel():
    commits = [make_commit(f"c{i}", T0 + i, [f"src/m/F{i}.kt"]) for i in range(10)]
    commits.append(make_commit("cx", T0 + 20, ["build.gradle"]))
    tests = [TestCase("T1", "src/m/tests/T1Test.kt")]
    vocab = build_vocabulary(commits, (), tests)
    assert vocab.extensions == ("kt",)
    assert vocab.distance_sentinel == 4
    narrow = build_vocabulary(commits, (), tests, groups=("test",))
    assert narrow.size == 5


def _fuzz_change(rng, pool, change_id, as_of):
    picked = rng.choice(len(pool), size=int(rng.integers(1, 6)), replace=False)
    files = []
    for index in picked.tolist():
        kind = ("added", "modified", "deleted", "renamed", "copied")[int(rng.integers(5))]
        added = 0 if kind == "deleted" else int(rng.integers(0, 40))
        files.append(FileChange(pool[index], kind, added, int(rng.integers(0, 20))))
    return ChangeSet(change_id, as_of, tuple(files))


def test_fuzzed_rows_ignore_file_order_and_respect_sparsity(small_synth_config):
    commits, cycles = synth_generate(small_synth_config, seed=5)
    files, tests, _ = synth_universe(small_synth_config)
    history = HistoryIndex(commits, cycles)
    vocab = build_vocabulary(commits, cycles, tests)
    pool = list(files) + ["new/X.kt", "docs/readme.md", "build.gradle"]
    first, last = commits[0].timestamp, cycles[-1].timestamp + DAY
    rng = np.random.default_rng(11)
    for i in range(10_000):
        change = _fuzz_change(rng, pool, f"z{i}", int(rng.integers(first, last)))
        test = tests[int(rng.integers(len(tests)))]
        row = build_row(change, test, history, vocab)
        order = rng.permutation(len(change.files)).tolist()
        shuffled = ChangeSet(change.change_id, change.timestamp, tuple(change.files[j] for j in order))
        assert build_row(shuffled, test, history, vocab) == row
        file_block = [fid for fid in row.sparse_features if fid < vocab.test_offset]
        assert len(file_block) <= len(change.files) * D


def test_future_events_never_change_features(small_synth_config):
    files, tests, _ = synth_universe(small_synth_config)
    pool = list(files) + ["new/X.kt"]
    rng = np.random.default_rng(23)
    for seed in range(5):
        commits, cycles = synth_generate(small_synth_config, seed=seed)
        full = HistoryIndex(commits, cycles)
        vocab = build_vocabulary(commits, cycles, tests)
        for draw in range(200):
            as_of = int(rng.integers(commits[0].timestamp, cycles[-1].timestamp + DAY))
            past = HistoryIndex(
                [commit for commit in commits if commit.timestamp < as_of],
                [cycle for cycle in cycles if cycle.timestamp < as_of],
            )
            change = _fuzz_change(rng, pool, f"p{seed}-{draw}", as_of)
            test = tests[int(rng.integers(len(tests)))]
            assert build_row(change, test, full, vocab) == build_row(change, test, past, vocab)
