import time

import pytest

from conftest import DAY, T0, make_commit, make_cycle
from testsel.datamodel import ChangeSet, FeatureVocabulary, FileChange, TestCase
from testsel.errors import DataError, ModelError
from testsel.evaluation import score_cycle
from testsel.features import HistoryIndex, build_training_matrix, build_vocabulary
from testsel.ingest import chronological_split
from testsel.learner import LearnerConfig, Model, fit
from testsel.selector import (
    RankedSelection,
    budget_from_fraction,
    budget_from_time_limit,
    infer_language,
    is_comment_only,
    is_docs_only,
    latest_stability_flags,
    modular_filter,
    module_of,
    model_version,
    plan_selection,
    rank_tests,
    select,
    selection_report,
    stability_filter,
)
from testsel.settings import DEFAULT_TRAIN_DAYS, DEFAULT_VAL_DAYS
from testsel.synth import synth_generate, synth_rules, synth_universe


VOCAB = FeatureVocabulary(files=("src/a.kt",), extensions=("kt",), distance_sentinel=4)
CONSTANT = Model((), 0.0, LearnerConfig(), VOCAB.fingerprint)
REPO_FILES = (
    "build.gradle",
    "app/build.gradle",
    "lib/core/build.gradle.kts",
    "lib/ui/build.gradle.kts",
)


def ranked_ids(n):
    return [(f"T{i:03d}", 1.0 - i / 1000.0) for i in range(n)]


class TestRankTests:
    def test_constant_model_orders_by_id(self):
        change = ChangeSet("x", T0, (FileChange("src/a.kt"),))
        ranked = rank_tests(CONSTANT, change, ["T3", "T1", TestCase("T2")], [], VOCAB)
        assert [test_id for test_id, _ in ranked] == ["T1", "T2", "T3"]
        assert {score for _, score in ranked} == {0.5}

    def test_empty_tests(self):
        assert rank_tests(CONSTANT, ChangeSet("x", T0), [], [], VOCAB) == []

    def test_vocabulary_mismatch(self):
        with pytest.raises(ModelError):
            rank_tests(CONSTANT, ChangeSet("x", T0), ["T1"], [], FeatureVocabulary())

    def test_chunked_workers_match_serial(self):
        tests = [f"T{i:04d}" for i in range(1100)]
        change = ChangeSet("x", T0, (FileChange("src/a.kt"),))
        assert rank_tests(CONSTANT, change, tests, [], VOCAB, workers=3) == rank_tests(
            CONSTANT, change, tests, [], VOCAB
        )

    def test_large_catalog_ranks_within_a_minute(self, small_synth_config):
        commits, cycles = synth_generate(small_synth_config, seed=1)
        files, tests, _ = synth_universe(small_synth_config)
        history = HistoryIndex(commits, cycles)
        vocab = build_vocabulary(commits, cycles, tests)
        rows = build_training_matrix(cycles, commits, vocab, tests=tests, history=history)
        model = fit(rows, LearnerConfig(n_trees=30, max_depth=4))
        catalog = [TestCase(f"L{j:04d}", tests[j % len(tests)].test_path) for j in range(6580)]
        change = ChangeSet(
            "next",
            cycles[-1].timestamp + 60,
            tuple(FileChange(path, "modified", 3, 1) for path in files[:5]),
        )
        started = time.perf_counter()
        ranked = rank_tests(model, change, catalog, history, vocab)
        assert time.perf_counter() - started < 60.0
        assert len(ranked) == 6580


def _rule_failures(cycle, rules, history):
    changed = set()
    for commit_id in cycle.commit_ids:
        changed.update(history.commit_by_id[commit_id].paths)
    fired = {test_id for path, test_id in rules if path in changed}
    return {v.test_id for v in cycle.verdicts if v.failed and not v.unstable and v.test_id in fired}


def test_rule_failures_rank_in_top_ten_on_synthetic_history():
    _, tests, _ = synth_universe({})
    catalog = {test.test_id: test for test in tests}
    config = LearnerConfig(n_trees=30, max_depth=4, learning_rate=0.3, min_child_weight=0.1)
    hit_rates = []
    for seed in range(5):
        commits, cycles = synth_generate({}, seed)
        rules = synth_rules({}, seed)
        history = HistoryIndex(commits, cycles)
        train, _ = chronological_split(cycles[:70], DEFAULT_TRAIN_DAYS, DEFAULT_VAL_DAYS)
        cutoff = train[-1].timestamp
        vocab = build_vocabulary([c for c in commits if c.timestamp <= cutoff], train, tests)
        rows = build_training_matrix(train, commits, vocab, tests=tests, history=history)
        model = fit(rows, config)
        hits = 0
        scored = 0
        for cycle in cycles[70:]:
            failing = _rule_failures(cycle, rules, history)
            if not failing:
                continue
            ranked = score_cycle(model, vocab, cycle, history, catalog)[0]
            scored += 1
            hits += failing <= set(ranked[:10])
        assert scored
        hit_rates.append(hits / scored)
    assert sum(hit_rates) / len(hit_rates) >= 0.9


class TestStabilityFilter:
    def test_flagged_tests_removed(self):
        tests = [f"T{i}" for i in range(10)]
        flags = {"T2": {"flaky": True, "broken": False}, "T7": {"flaky": False, "broken": True}}
        kept, removed = stability_filter(tests, flags)
        assert len(kept) == 8
        assert removed == {"T2": "unstable", "T7": "unstable"}
        assert stability_filter(tests, {}) == (tests, {})

    def test_latest_flags_window(self):
        as_of = T0 + 30 * DAY
        cycles = [
            make_cycle("old", as_of - 20 * DAY, [], {"T1": ("passed", "flaky")}),
            make_cycle("recent", as_of - 2 * DAY, [], {"T2": ("failed", "broken"), "T3": "failed"}),
            make_cycle("now", as_of, [], {"T4": ("passed", "flaky")}),
        ]
        flags = latest_stability_flags(cycles, as_of)
        assert flags == {"T2": {"flaky": False, "broken": True}}


class TestModularFilter:
    def _tests(self):
        return [
            TestCase("app", "app/src/test/MainTest.kt"),
            TestCase("core", "lib/core/src/test/CoreTest.kt"),
            TestCase("ui", "lib/ui/src/test/UiTest.kt"),
            TestCase("tools", "tools/ToolTest.kt"),
            TestCase("nopath"),
        ]

    def test_module_of(self):
        markers = {"", "app", "lib/core"}
        assert module_of("app/src/Main.kt", markers) == "app"
        assert module_of("lib/core/a/b/C.kt", markers) == "lib/core"
        assert module_of("lib/ui/U.kt", markers) == ""

    def test_hops_between_modules(self):
        kept, removed = modular_filter(self._tests(), ["app/src/Main.kt"], repo_files=REPO_FILES)
        assert [t.test_id for t in kept] == ["app", "tools", "nopath"]
        assert removed == {"core": "wrong_module", "ui": "wrong_module"}

    def test_wider_hops(self):
        kept, removed = modular_filter(
            self._tests(), ["lib/core/src/Core.kt"], dependency_hops=2, repo_files=REPO_FILES
        )
        assert removed == {"app": "wrong_module"}
        assert "ui" in [t.test_id for t in kept]

    def test_no_markers_removes_nothing(self):
        kept, removed = modular_filter(self._tests(), ["app/src/Main.kt"])
        assert removed == {} and len(kept) == 5
        assert modular_filter(self._tests(), [], repo_files=REPO_FILES)[1] == {}

    def test_filter_order_does_not_matter(self):
        tests = self._tests()
        flags = {"app": {"flaky": True}, "core": {"broken": True}}
        first, _ = stability_filter(tests, flags)
        first, _ = modular_filter(first, ["app/src/Main.kt"], repo_files=REPO_FILES)
        second, _ = modular_filter(tests, ["app/src/Main.kt"], repo_files=REPO_FILES)
        second, _ = stability_filter(second, flags)
        assert first == second


def test_docs_only():
    assert is_docs_only(["README.md"])
    assert is_docs_only(ChangeSet("x", T0, (FileChange("docs/guide.MD"),)))
    assert not is_docs_only(["README.md", "config.yaml"])
    assert not is_docs_only([])
    assert is_docs_only(["notes.txt"], doc_extensions=("md", ".txt"))


def _diff(path, header, *lines):
    return "\n".join([f"--- a/{path}", f"+++ b/{path}", header, *lines]) + "\n"


class TestCommentOnly:
    def test_line_comment_change(self):
        diff = _diff("src/A.kt", "@@ -1,1 +1,1 @@", "-// old note", "+// new note")
        assert is_comment_only(diff, "kotlin")

    def test_code_with_trailing_comment(self):
        diff = _diff("src/A.kt", "@@ -1,0 +1,1 @@", "+val x = 1 // note")
        assert not is_comment_only(diff, "kotlin")

    def test_comment_marker_inside_string(self):
        diff = _diff("src/A.kt", "@@ -3,1 +3,1 @@", '-val s = "http://a"', '+val s = "http://b"')
        assert not is_comment_only(diff, "kotlin")

    def test_block_comment_tracked_through_context(self):
        diff = _diff("src/A.java", "@@ -1,3 +1,3 @@", " /*", "- * old", "+ * new", "  */")
        assert is_comment_only(diff, "java")

    def test_hunk_starting_inside_block_comment(self):
        diff = _diff("src/A.java", "@@ -5,2 +5,2 @@", "- * old text", "+ * new text", "  */")
        assert is_comment_only(diff, "java")

    def test_nested_blocks_only_for_kotlin(self):
        line = "+/* outer /* inner */ still comment */"
        assert is_comment_only(_diff("src/A.kt", "@@ -1,0 +1,1 @@", line), "kotlin")
        assert not is_comment_only(_diff("src/A.java", "@@ -1,0 +1,1 @@", line), "java")

    def test_closing_marker_in_line_comment_is_code(self):
        diff = _diff("src/A.kt", "@@ -1,1 +1,1 @@", "-return a // */", "+return b // */")
        assert not is_comment_only(diff, "kotlin")
        diff = _diff("src/A.java", "@@ -4,2 +4,2 @@", "-x = 1;", "+x = 2;", "  * y */")
        assert not is_comment_only(diff, "java")
        diff = _diff("src/A.kt", "@@ -1,1 +1,1 @@", "- * a // */", "+ * b // */")
        assert not is_comment_only(diff, "kotlin")

    def test_conservative_cases(self):
        assert not is_comment_only(_diff("src/A.java", "@@ -1,1 +1,1 @@", "-// a", "+// b"), "kotlin")
        assert not is_comment_only("Binary files a/x.kt and b/x.kt differ\n", "kotlin")
        assert not is_comment_only("", "kotlin")
        assert not is_comment_only(_diff("src/A.kt", "@@ -1,2 +1,2 @@", "-// a", "?? junk"), "kotlin")

    def test_unsupported_language(self):
        with pytest.raises(DataError):
            is_comment_only("", "python")

    def test_infer_language(self):
        assert infer_language(["a/B.kt", "build.gradle.kts"]) == "kotlin"
        assert infer_language(["a/B.java"]) == "java"
        assert infer_language(["a/B.java", "a/C.kt"]) is None
        assert infer_language(["README.md"]) is None


class TestSelect:
    def test_budget_examples(self):
        ranked = ranked_ids(100)
        assert len(select(ranked, 50).selected) == 50
        filtered = {test_id: "unstable" for test_id, _ in ranked[:60]}
        selection = select(ranked, 50, filtered)
        assert len(selection.selected) == 40
        assert selection.test_ids[0] == "T060"
        assert select(ranked, 0).selected == ()
        with pytest.raises(DataError):
            select(ranked, -1)

    def test_rank_monotone(self):
        ranked = ranked_ids(30)
        filtered = {"T003": "wrong_module", "T010": "unstable"}
        selection = select(ranked, 12, filtered)
        chosen = set(selection.test_ids)
        for index, (test_id, _) in enumerate(ranked):
            if test_id in chosen:
                for better, _ in ranked[:index]:
                    assert better in chosen or better in filtered

    def test_selection_invariants(self):
        with pytest.raises(DataError):
            RankedSelection((("T1", 0.9),), 1, {"T1": "unstable"})
        with pytest.raises(DataError):
            RankedSelection((("T1", 0.9), ("T2", 0.8)), 1)
        with pytest.raises(DataError, match="unknown filter reasons"):
            RankedSelection((("T1", 0.9),), 1, {"T2": "slow"})


def test_budgets():
    assert budget_from_fraction(7, 0.5) == 4
    assert budget_from_fraction(200, 0.008) == 2
    assert budget_from_fraction(10, 0.3) == 3
    with pytest.raises(DataError):
        budget_from_fraction(10, 1.5)
    ranked = ranked_ids(5)
    durations = {"T000": 30.0, "T001": 50.0, "T002": 10.0}
    assert budget_from_time_limit(ranked, 90.0, durations) == 3
    assert budget_from_time_limit(ranked, 90.0, durations, {"T001": "unstable"}) == 2


class TestPlanSelection:
    def _history(self):
        commits = [make_commit("c1", T0, ["app/src/Main.kt"])]
        cycles = [make_cycle("n1", T0 + DAY, ["c1"], {"core": ("failed", "flaky"), "app": "passed"})]
        return HistoryIndex(commits, cycles)

    def _tests(self):
        return [
            TestCase("app", "app/src/test/MainTest.kt"),
            TestCase("app2", "app/src/test/OtherTest.kt"),
            TestCase("core", "app/src/test/CoreTest.kt"),
            TestCase("ui", "lib/ui/src/test/UiTest.kt"),
        ]

    def test_filters_and_budget(self):
        change = ChangeSet("c2", T0 + 2 * DAY, (FileChange("app/src/Main.kt"),))
        selection = plan_selection(
            CONSTANT, VOCAB, change, self._tests(), self._history(), k=5, repo_files=REPO_FILES
        )
        assert selection.test_ids == ["app", "app2"]
        assert selection.filtered_out == {"core": "unstable", "ui": "wrong_module"}
        assert selection.skip_reason is None
        report = selection_report(selection, CONSTANT)
        assert report["selected"][0] == {"test": "app", "score": 0.5, "rank": 1}
        assert report["filtered"] == [
            {"test": "core", "reason": "unstable"},
            {"test": "ui", "reason": "wrong_module"},
        ]
        assert report["model_version"] == model_version(CONSTANT) == "1:" + VOCAB.fingerprint[:12]
        assert "reason" not in report

    def test_docs_only_change_selects_nothing(self):
        change = ChangeSet("c3", T0 + 2 * DAY, (FileChange("README.md"),))
        selection = plan_selection(CONSTANT, VOCAB, change, self._tests(), self._history())
        assert selection.selected == ()
        assert selection.skip_reason == "docs_only_commit"
        assert set(selection.filtered_out.values()) == {"docs_only_commit"}
        assert selection_report(selection)["reason"] == "docs_only_commit"

    def test_comment_only_change_selects_nothing(self):
        change = ChangeSet("c4", T0 + 2 * DAY, (FileChange("app/src/Main.kt", "modified", 1, 1),))
        diff = _diff("app/src/Main.kt", "@@ -1,1 +1,1 @@", "-// a", "+// b")
        selection = plan_selection(CONSTANT, VOCAB, change, self._tests(), self._history(), diff=diff)
        assert selection.skip_reason == "comment_only_commit"
        assert len(selection.filtered_out) == 4

    def test_budget_fraction_and_no_modular(self):
        change = ChangeSet("c5", T0 + 2 * DAY, (FileChange("app/src/Main.kt"),))
        selection = plan_selection(
            CONSTANT,
            VOCAB,
            change,
            self._tests(),
            self._history(),
            budget_fraction=0.5,
            modular=False,
            repo_files=REPO_FILES,
        )
        assert selection.budget == 2
        assert selection.test_ids == ["app", "app2"]
        assert selection.filtered_out == {"core": "unstable"}
