"""Classification, k-metrics, APFD/NAPFD, confidence curves and reports."""

import math
import time
from collections.abc import Mapping
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .datamodel import ChangeSet, TestCase
from .errors import DataError
from .features import (
    HistoryIndex,
    build_training_matrix,
    build_vocabulary,
    ensure_history,
    prepare_change,
    row_for_test,
)
from .learner import LearnerConfig, fit, predict_many
from .logging_utils import log_info
from .selector import budget_from_fraction
from .settings import (
    CURVE_GRID_STEPS,
    DEFAULT_BUDGET_K,
    DEFAULT_STABILITY_POLICY,
    DEFAULT_TEST_DURATION_S,
    DEFAULT_THRESHOLD,
    FEATURE_GROUPS,
)


STRATEGIES = ("all", "random_k", "tts")
TIMING_PHASES = (
    "preparation",
    "training",
    "first_prediction",
    "last_prediction",
    "average_prediction",
    "total",
)
ABLATION_GROUPS = (
    ("file", "test", "cross", "co_failure"),
    ("file", "test", "cross"),
    ("test", "cross"),
    ("file", "test"),
    ("test",),
)


def _ratio(numerator, denominator):
    return numerator / denominator if denominator else 0.0


def _f1(precision, recall):
    return _ratio(2.0 * precision * recall, precision + recall)


def confusion_metrics(scores, labels, threshold=DEFAULT_THRESHOLD):
    scores = np.asarray(list(scores), dtype=np.float64)
    labels = np.asarray(list(labels), dtype=np.int64)
    if not len(scores):
        raise DataError("confusion metrics need at least one prediction")
    if len(scores) != len(labels):
        raise DataError("scores and labels differ in length")
    if not np.isin(labels, (0, 1)).all():
        raise DataError("labels must be 0 or 1")
    predicted = scores >= threshold
    actual = labels == 1
    tp = int(np.sum(predicted & actual))
    fp = int(np.sum(predicted & ~actual))
    fn = int(np.sum(~predicted & actual))
    tn = int(np.sum(~predicted & ~actual))
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    denominator = math.sqrt(float(tp + fp) * (tp + fn) * (tn + fp) * (tn + fn))
    return {
        "accuracy": (tp + tn) / len(scores),
        "precision": precision,
        "recall": recall,
        "f1": _f1(precision, recall),
        "mcc": _ratio(tp * tn - fp * fn, denominator),
        "tp": tp,
        "fp": fp,
        "fn": fn,
        "tn": tn,
    }


def _failing(labels):
    if isinstance(labels, Mapping):
        return {test_id for test_id, label in labels.items() if label}
    return set(labels)


def cycle_k_metrics(ranked, labels, k):
    failing = _failing(labels)
    n = len(ranked)
    hits = sum(1 for test_id in ranked[:k] if test_id in failing)
    detectable = sum(1 for test_id in ranked if test_id in failing)
    precision = _ratio(hits, min(k, n))
    recall = _ratio(hits, detectable)
    return precision, recall, _f1(precision, recall)


def k_metrics(ranked_per_cycle, labels_per_cycle, k):
    """Top-k precision/recall/F1, averaged uniformly over cycles."""
    if k < 1:
        raise DataError(f"k must be >= 1, got {k}")
    per_cycle = [
        cycle_k_metrics(list(ranked), labels, k)
        for ranked, labels in zip(ranked_per_cycle, labels_per_cycle)
    ]
    if not per_cycle:
        return {"precision_at_k": 0.0, "recall_at_k": 0.0, "f1_at_k": 0.0}
    values = np.asarray(per_cycle, dtype=np.float64).mean(axis=0)
    return {
        "precision_at_k": float(values[0]),
        "recall_at_k": float(values[1]),
        "f1_at_k": float(values[2]),
    }


def _detection_score(detected_ratio, position_sum, n_tests, m_failures):
    return (
        detected_ratio
        - position_sum / (n_tests * m_failures)
        + detected_ratio / (2 * n_tests)
    )


def apfd(rank_positions_of_failures, n_tests, m_failures):
    if m_failures < 1:
        raise DataError("no failures: APFD undefined")
    if n_tests < 1:
        raise DataError("APFD needs at least one test")
    positions = list(rank_positions_of_failures)
    if any(not 1 <= position <= n_tests for position in positions):
        raise DataError("failure rank positions must lie in [1, n_tests]")
    return _detection_score(1.0, float(sum(positions)), n_tests, m_failures)


def failure_positions(ranked, labels):
    failing = _failing(labels)
    return [rank for rank, test_id in enumerate(ranked, start=1) if test_id in failing]


def napfd(ranked, labels, selected_count):
    """NAPFD over the full suite; unselected failures contribute TF_i = 0."""
    ranked = list(ranked)
    positions = failure_positions(ranked, labels)
    if not positions:
        raise DataError("no failures: NAPFD undefined")
    n_tests = len(ranked)
    if not 0 <= selected_count <= n_tests:
        raise DataError("selected_count must lie in [0, n_tests]")
    detected = [position for position in positions if position <= selected_count]
    ratio = len(detected) / len(positions)
    return _detection_score(ratio, float(sum(detected)), n_tests, len(positions))


def confidence_curve(ranked, labels):
    ranked = list(ranked)
    failing = _failing(labels)
    hits = [1 if test_id in failing else 0 for test_id in ranked]
    m = sum(hits)
    if not m:
        raise DataError("no failures: confidence curve undefined")
    n = len(ranked)
    found = np.cumsum(hits)
    return [(0.0, 0.0)] + [((i + 1) / n, float(found[i]) / m) for i in range(n)]


def pooled_curve(cycles_ranked, cycles_labels, steps=CURVE_GRID_STEPS):
    """Failures found at each selection fraction, pooled over cycles."""
    grid = [step / steps for step in range(steps + 1)]
    found = np.zeros(len(grid))
    total = 0
    for ranked, labels in zip(cycles_ranked, cycles_labels):
        ranked = list(ranked)
        failing = _failing(labels)
        hits = np.cumsum([1 if test_id in failing else 0 for test_id in ranked])
        if not len(hits) or not hits[-1]:
            continue
        total += int(hits[-1])
        n = len(ranked)
        for index, x in enumerate(grid):
            prefix = int(math.floor(x * n + 1e-9))
            found[index] += hits[prefix - 1] if prefix else 0
    if not total:
        return []
    return [(x, float(found[index] / total)) for index, x in enumerate(grid)]


class WallTimer:
    """Accumulates wall-clock seconds per phase."""

    def __init__(self):
        self.phases = {}
        self.predictions = []
        self._started = time.perf_counter()

    @contextmanager
    def phase(self, name):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.phases[name] = self.phases.get(name, 0.0) + time.perf_counter() - start

    def record_prediction(self, seconds):
        self.predictions.append(float(seconds))

    def as_dict(self):
        times = {name: self.phases.get(name, 0.0) for name in ("preparation", "training")}
        times["first_prediction"] = self.predictions[0] if self.predictions else 0.0
        times["last_prediction"] = self.predictions[-1] if self.predictions else 0.0
        times["average_prediction"] = (
            sum(self.predictions) / len(self.predictions) if self.predictions else 0.0
        )
        times["total"] = time.perf_counter() - self._started
        return times


@dataclass
class MetricReport:
    accuracy: float = 0.0
    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0
    mcc: float = 0.0
    precision_at_k: float = 0.0
    recall_at_k: float = 0.0
    f1_at_k: float = 0.0
    apfd: float = 0.0
    napfd: float = 0.0
    curve: list = field(default_factory=list)
    wall_times: dict = field(default_factory=dict)
    k: int = DEFAULT_BUDGET_K
    n_cycles: int = 0
    n_failing_cycles: int = 0
    n_rows: int = 0

    SCALARS = (
        "accuracy",
        "precision",
        "recall",
        "f1",
        "mcc",
        "precision_at_k",
        "recall_at_k",
        "f1_at_k",
        "apfd",
        "napfd",
    )

    def summary(self, include_timings=False):
        row = {name: float(getattr(self, name)) for name in self.SCALARS}
        row.update(
            {"k": self.k, "n_cycles": self.n_cycles, "n_failing_cycles": self.n_failing_cycles, "n_rows": self.n_rows}
        )
        if include_timings:
            row.update({f"time_{name}_s": value for name, value in self.wall_times.items()})
        return row

    def to_dict(self, include_timings=False):
        payload = self.summary()
        payload["curve"] = [[x, y] for x, y in self.curve]
        if include_timings:
            payload["wall_times"] = dict(self.wall_times)
        return payload


def _catalog(tests):
    catalog = {}
    for test in tests or ():
        if not isinstance(test, TestCase):
            test = TestCase(str(test))
        catalog[test.test_id] = test
    return catalog


def score_cycle(model, vocab, cycle, history, catalog=None, stability_policy=None):
    """Rank the executed stable tests of one cycle.

    Returns ``(ranked ids, failing ids, scores, labels)``; scores and labels
    follow verdict order.
    """
    policy = dict(DEFAULT_STABILITY_POLICY)
    policy.update(stability_policy or {})
    catalog = catalog or {}
    commits = [history.commit_by_id[c] for c in cycle.commit_ids if c in history.commit_by_id]
    change = ChangeSet.from_commits(cycle.cycle_id, cycle.timestamp, commits)
    prepared = prepare_change(change, history, vocab, set(cycle.commit_ids))
    verdicts = [
        verdict
        for verdict in cycle.verdicts
        if not (verdict.flaky and policy["drop_flaky"])
        and not (verdict.broken and policy["drop_broken"])
    ]
    rows = [
        row_for_test(
            prepared,
            catalog.get(verdict.test_id) or TestCase(verdict.test_id),
            history,
            vocab,
            key=cycle.cycle_id,
        )
        for verdict in verdicts
    ]
    scores = predict_many(model, rows).tolist() if rows else []
    order = sorted(
        zip(scores, (verdict.test_id for verdict in verdicts)),
        key=lambda item: (-item[0], item[1]),
    )
    ranked = [test_id for _, test_id in order]
    failing = {verdict.test_id for verdict in verdicts if verdict.failed}
    labels = [1 if verdict.failed else 0 for verdict in verdicts]
    return ranked, failing, scores, labels


def _cycle_budget(n_tests, k, budget_fraction):
    if budget_fraction is not None:
        return budget_from_fraction(n_tests, budget_fraction)
    return min(int(k), n_tests)


def evaluate_model(
    model,
    vocab,
    cycles,
    histories,
    tests=None,
    k=DEFAULT_BUDGET_K,
    threshold=DEFAULT_THRESHOLD,
    budget_fraction=None,
    stability_policy=None,
    timer=None,
):
    """Replay held-out cycles through the model and fill a MetricReport."""
    history = ensure_history(histories)
    catalog = _catalog(tests)
    timer = timer or WallTimer()
    all_scores = []
    all_labels = []
    per_cycle = []
    for cycle in sorted(cycles, key=lambda c: (c.timestamp, c.cycle_id)):
        start = time.perf_counter()
        ranked, failing, scores, labels = score_cycle(
            model, vocab, cycle, history, catalog, stability_policy
        )
        timer.record_prediction(time.perf_counter() - start)
        if not ranked:
            continue
        all_scores.extend(scores)
        all_labels.extend(labels)
        per_cycle.append((ranked, failing, _cycle_budget(len(ranked), k, budget_fraction)))

    if not per_cycle:
        raise DataError("no executed tests in the evaluation cycles")
    report = MetricReport(k=int(k) if budget_fraction is None else 0)
    for name, value in confusion_metrics(all_scores, all_labels, threshold).items():
        if name in MetricReport.SCALARS:
            setattr(report, name, value)

    precisions = []
    recalls = []
    f1s = []
    apfds = []
    napfds = []
    for ranked, failing, budget in per_cycle:
        precision, recall, f1 = cycle_k_metrics(ranked, failing, max(budget, 1))
        if budget:
            precisions.append(precision)
        if failing:
            recalls.append(recall)
            f1s.append(f1)
            apfds.append(apfd(failure_positions(ranked, failing), len(ranked), len(failing)))
            napfds.append(napfd(ranked, failing, budget))
    report.precision_at_k = float(np.mean(precisions)) if precisions else 0.0
    report.recall_at_k = float(np.mean(recalls)) if recalls else 0.0
    report.f1_at_k = float(np.mean(f1s)) if f1s else 0.0
    report.apfd = float(np.mean(apfds)) if apfds else 0.0
    report.napfd = float(np.mean(napfds)) if napfds else 0.0
    report.curve = pooled_curve([c[0] for c in per_cycle], [c[1] for c in per_cycle])
    report.n_cycles = len(per_cycle)
    report.n_failing_cycles = len(apfds)
    report.n_rows = len(all_scores)
    report.wall_times = timer.as_dict()
    log_info(
        "Model evaluated.",
        cycle=report.n_cycles,
        rows=report.n_rows,
        f1=report.f1,
        apfd=report.apfd,
        napfd=report.napfd,
    )
    return report


def _resolve_k(k, n_tests):
    if isinstance(k, float) and 0.0 < k < 1.0:
        return budget_from_fraction(n_tests, k)
    return min(int(k), n_tests)


def compare_strategies(cycles, strategies=STRATEGIES, k=DEFAULT_BUDGET_K, seed=0, scorer=None, default_duration=DEFAULT_TEST_DURATION_S):
    """Replay cycles under each strategy.

    ``scorer(cycle)`` returns the ranked test ids for the ``tts`` strategy;
    ``k`` is a test count or, as a float below 1, a fraction of each suite.
    """
    unknown = [name for name in strategies if name not in STRATEGIES]
    if unknown:
        raise DataError(f"unknown strategies: {unknown}")
    if "tts" in strategies and scorer is None:
        raise DataError("strategy 'tts' needs a model scorer")
    rng = np.random.default_rng(seed)
    totals = {
        name: {"rates": [], "precisions": [], "recalls": [], "seconds": 0.0}
        for name in strategies
    }
    for cycle in sorted(cycles, key=lambda c: (c.timestamp, c.cycle_id)):
        test_ids = sorted(cycle.test_ids)
        if not test_ids:
            continue
        durations = {
            verdict.test_id: verdict.duration if verdict.duration is not None else default_duration
            for verdict in cycle.verdicts
        }
        failing = {verdict.test_id for verdict in cycle.verdicts if verdict.failed}
        budget = _resolve_k(k, len(test_ids))
        for name in strategies:
            if name == "all":
                chosen = test_ids
            elif name == "random_k":
                picks = rng.permutation(len(test_ids))[:budget]
                chosen = [test_ids[i] for i in sorted(picks.tolist())]
            else:
                chosen = list(scorer(cycle))[:budget]
            hits = sum(1 for test_id in chosen if test_id in failing)
            entry = totals[name]
            entry["rates"].append(len(chosen) / len(test_ids))
            if chosen:
                entry["precisions"].append(hits / len(chosen))
            if failing:
                entry["recalls"].append(hits / len(failing))
            entry["seconds"] += sum(durations.get(test_id, default_duration) for test_id in chosen)

    table = []
    for name in strategies:
        entry = totals[name]
        table.append(
            {
                "strategy": name,
                "selection_rate": float(np.mean(entry["rates"])) if entry["rates"] else 0.0,
                "precision": float(np.mean(entry["precisions"])) if entry["precisions"] else 0.0,
                "recall": float(np.mean(entry["recalls"])) if entry["recalls"] else 0.0,
                "test_minutes": entry["seconds"] / 60.0,
            }
        )
    return table


def model_scorer(model, vocab, histories, tests=None, stability_policy=None):
    history = ensure_history(histories)
    catalog = _catalog(tests)

    def scorer(cycle):
        return score_cycle(model, vocab, cycle, history, catalog, stability_policy)[0]

    return scorer


def ablation_table(
    train_cycles,
    eval_cycles,
    commits,
    tests=None,
    config=None,
    k=DEFAULT_BUDGET_K,
    group_sets=ABLATION_GROUPS,
    workers=1,
):
    """Retrain per feature-group configuration and report ranking quality."""
    config = config or LearnerConfig()
    history = HistoryIndex(commits, list(train_cycles) + list(eval_cycles))
    train_commits = [
        commit
        for commit in history.commits
        if commit.timestamp < max((c.timestamp for c in train_cycles), default=0) + 1
    ]
    table = []
    for groups in group_sets:
        groups = tuple(group for group in FEATURE_GROUPS if group in groups)
        vocab = build_vocabulary(train_commits, train_cycles, tests or (), groups)
        rows = build_training_matrix(train_cycles, commits, vocab, tests=tests, history=history, workers=workers)
        model = fit(rows, config)
        report = evaluate_model(model, vocab, eval_cycles, history, tests, k)
        table.append(
            {
                "groups": "+".join(groups),
                "apfd": report.apfd,
                "napfd": report.napfd,
                "precision_at_k": report.precision_at_k,
                "recall_at_k": report.recall_at_k,
                "f1_at_k": report.f1_at_k,
            }
        )
    return table


def write_report_json(tracker, path, payload):
    return tracker.write_json(path, payload)


def write_table_csv(tracker, path, rows, columns=None):
    import pandas as pd

    frame = pd.DataFrame(list(rows), columns=columns)
    return tracker.write_frame_csv(path, frame)


def write_curve_csv(tracker, path, curve):
    return write_table_csv(
        tracker,
        path,
        [{"fraction_selected": x, "fraction_failures_found": y} for x, y in curve],
        ["fraction_selected", "fraction_failures_found"],
    )
