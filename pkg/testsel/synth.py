"""Synthetic desk-scale histories with known file-to-test fault rules."""

import json
import os

import numpy as np

from .datamodel import CICycle, CommitRecord, FileChange, TestCase, TestVerdict
from .errors import DataError
from .ingest import dump_commit_log, dump_test_catalog, dump_test_results
from .logging_utils import log_info
from .settings import (
    SECONDS_PER_DAY,
    SYNTH_CHANGE_TYPE_WEIGHTS,
    SYNTH_DEFAULTS,
)


def resolve_synth_config(config):
    merged = dict(SYNTH_DEFAULTS)
    merged.update(config or {})
    for key in ("n_files", "n_tests"):
        if int(merged[key]) < 1:
            raise DataError(f"{key} must be >= 1")
    for key in ("n_days", "commits_per_day", "n_modules", "n_packages", "n_authors"):
        if int(merged[key]) < 1:
            raise DataError(f"{key} must be >= 1")
    for key in ("noise_rate", "flaky_rate"):
        rate = float(merged[key])
        if not 0.0 <= rate <= 1.0:
            raise DataError(f"{key} must be in [0, 1]")
    return merged


def file_path_for(index, config):
    module = index % config["n_modules"]
    package = (index // config["n_modules"]) % config["n_packages"]
    return f"mod{module}/pkg{package}/F{index}.kt"


def catalog_entry_for(index, config):
    module = index % config["n_modules"]
    package = (index // config["n_modules"]) % config["n_packages"]
    return TestCase(f"T{index}", f"mod{module}/pkg{package}/tests/T{index}Test.kt")


def synth_universe(config):
    """Return ``(file_paths, tests, marker_paths)`` for a synthetic repository."""
    config = resolve_synth_config(config)
    files = [file_path_for(i, config) for i in range(int(config["n_files"]))]
    tests = [catalog_entry_for(j, config) for j in range(int(config["n_tests"]))]
    markers = [f"mod{module}/build.gradle.kts" for module in range(int(config["n_modules"]))]
    return files, tests, markers


def _generate_rules(rng, files, tests, count):
    count = min(int(count), len(tests))
    chosen = sorted(rng.choice(len(tests), size=count, replace=False).tolist())
    rules = []
    for test_index in chosen:
        test = tests[test_index]
        test_dir = test.test_path.rsplit("/tests/", 1)[0]
        module = test_dir.split("/", 1)[0]
        candidates = [path for path in files if path.rsplit("/", 1)[0] == test_dir]
        if not candidates:
            candidates = [path for path in files if path.split("/", 1)[0] == module]
        if not candidates:
            candidates = files
        rules.append((candidates[int(rng.integers(len(candidates)))], test.test_id))
    return rules


def synth_generate(config, seed):
    """Generate ``(commits, cycles)``; deterministic for a given seed.

    A test fails in a daily cycle iff one of its rule files changed in that
    day's commits, XOR a Bernoulli(noise_rate) flip. Verdicts flagged flaky
    (``flaky_rate``) get a coin-flip outcome instead.
    """
    config = resolve_synth_config(config)
    rng = np.random.default_rng(seed)
    files, tests, _ = synth_universe(config)
    file_set = set(files)
    test_ids = [test.test_id for test in tests]
    test_set = set(test_ids)

    rules = config.get("fault_rules")
    if rules is None:
        rules = _generate_rules(rng, files, tests, config["n_fault_rules"])
    rules = [(str(path), str(test_id)) for path, test_id in rules]
    for path, test_id in rules:
        if path not in file_set:
            raise DataError(f"fault rule references unknown file {path!r}")
        if test_id not in test_set:
            raise DataError(f"fault rule references unknown test {test_id!r}")
    rule_files = {}
    for path, test_id in rules:
        rule_files.setdefault(test_id, set()).add(path)

    weights = 1.0 / np.power(np.arange(1, len(files) + 1), config["popularity_exponent"])
    popularity = rng.permutation(len(files))
    weights = weights[np.argsort(popularity)]
    weights = weights / weights.sum()
    type_names = list(SYNTH_CHANGE_TYPE_WEIGHTS)
    type_weights = np.array([SYNTH_CHANGE_TYPE_WEIGHTS[name] for name in type_names])
    type_weights = type_weights / type_weights.sum()
    low, high = config["duration_range"]
    base_durations = rng.uniform(float(low), float(high), size=len(tests))
    max_files = max(1, min(int(config["max_files_per_commit"]), len(files)))

    commits = []
    cycles = []
    start = int(config["start_ts"])
    for day in range(int(config["n_days"])):
        day_start = start + day * SECONDS_PER_DAY
        offsets = np.sort(
            rng.integers(0, SECONDS_PER_DAY - 1, size=int(config["commits_per_day"]))
        )
        day_commits = []
        for index, offset in enumerate(offsets.tolist()):
            n_changed = int(rng.integers(1, max_files + 1))
            picked = rng.choice(len(files), size=n_changed, replace=False, p=weights)
            changes = []
            for file_index in sorted(picked.tolist()):
                change_type = type_names[int(rng.choice(len(type_names), p=type_weights))]
                added = int(rng.integers(1, 50))
                deleted = int(rng.integers(0, 30))
                if change_type == "deleted":
                    added = 0
                changes.append(FileChange(files[file_index], change_type, added, deleted))
            author = f"a{int(rng.integers(int(config['n_authors'])))}"
            day_commits.append(
                CommitRecord(f"c{day:04d}{index:03d}", day_start + offset, author, tuple(changes))
            )
        commits.extend(day_commits)

        changed = {path for commit in day_commits for path in commit.paths}
        cycle_id = f"n{day:04d}"
        cycle_ts = day_start + SECONDS_PER_DAY - 1
        noise = rng.random(len(tests)) < float(config["noise_rate"])
        flaky = rng.random(len(tests)) < float(config["flaky_rate"])
        coins = rng.random(len(tests)) < 0.5
        jitter = rng.uniform(0.8, 1.2, size=len(tests))
        verdicts = []
        for position, test_id in enumerate(test_ids):
            failed = bool(rule_files.get(test_id, set()) & changed) != bool(noise[position])
            if flaky[position]:
                failed = bool(coins[position])
            verdicts.append(
                TestVerdict(
                    cycle_id,
                    test_id,
                    cycle_ts,
                    "failed" if failed else "passed",
                    round(float(base_durations[position] * jitter[position]), 3),
                    bool(flaky[position]),
                    False,
                )
            )
        cycles.append(
            CICycle(
                cycle_id,
                cycle_ts,
                tuple(commit.commit_id for commit in day_commits),
                tuple(verdicts),
            )
        )

    log_info(
        "Synthetic history generated.",
        commit=len(commits),
        cycle=len(cycles),
        count=len(rules),
    )
    return commits, cycles


def synth_rules(config, seed):
    """Rules actually used by ``synth_generate`` for the same config and seed."""
    config = resolve_synth_config(config)
    if config.get("fault_rules") is not None:
        return [(str(path), str(test_id)) for path, test_id in config["fault_rules"]]
    rng = np.random.default_rng(seed)
    files, tests, _ = synth_universe(config)
    return _generate_rules(rng, files, tests, config["n_fault_rules"])


def write_synth_outputs(tracker, out_dir, config, seed, commits, cycles):
    _, tests, markers = synth_universe(config)
    os.makedirs(out_dir, exist_ok=True)
    tracker.write_lines(os.path.join(out_dir, "commits.jsonl"), dump_commit_log(commits))
    tracker.write_lines(os.path.join(out_dir, "results.jsonl"), dump_test_results(cycles, tests))
    tracker.write_lines(os.path.join(out_dir, "tests.jsonl"), dump_test_catalog(tests))
    tracker.write_lines(os.path.join(out_dir, "repo_files.txt"), markers)
    payload = {
        "seed": int(seed),
        "rules": [list(rule) for rule in synth_rules(config, seed)],
    }
    tracker.write_text(
        os.path.join(out_dir, "rules.json"),
        json.dumps(payload, indent=2, sort_keys=True) + "\n",
    )
