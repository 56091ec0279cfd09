"""Ranked, filtered and budgeted test selection for one change."""

import math
import posixpath
import re
from collections.abc import Mapping
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .datamodel import ChangeSet, FileChange, normalize_path, path_extension
from .errors import DataError, ModelError
from .features import (
    HistoryIndex,
    as_test_case,
    directory_tree_distance,
    ensure_history,
    prepare_change,
    row_for_test,
)
from .learner import predict_many
from .logging_utils import log_info
from .settings import (
    COMMENT_LANGUAGES,
    DEFAULT_BUDGET_K,
    DEFAULT_DEPENDENCY_HOPS,
    DEFAULT_DOC_EXTENSIONS,
    DEFAULT_MODULE_MARKERS,
    DEFAULT_STABILITY_WINDOW_DAYS,
    DEFAULT_TEST_DURATION_S,
    FILTER_REASONS,
    MODEL_FORMAT_VERSION,
    SECONDS_PER_DAY,
)


HUNK_HEADER_RE = re.compile(r"^@@ -\d+(?:,(\d+))? \+\d+(?:,(\d+))? @@")
ROW_CHUNK = 512


@dataclass(frozen=True)
class RankedSelection:
    selected: tuple = ()
    budget: int = 0
    filtered_out: dict = field(default_factory=dict)
    change_id: str = None
    skip_reason: str = None
    candidates: int = 0

    def __post_init__(self):
        object.__setattr__(self, "selected", tuple(self.selected))
        overlap = {test_id for test_id, _ in self.selected} & set(self.filtered_out)
        if overlap:
            raise DataError(f"tests both selected and filtered: {sorted(overlap)}")
        if len(self.selected) > self.budget:
            raise DataError("selection exceeds its budget")
        unknown = sorted(set(self.filtered_out.values()) - set(FILTER_REASONS))
        if unknown:
            raise DataError(f"unknown filter reasons: {unknown}")

    @property
    def test_ids(self):
        return [test_id for test_id, _ in self.selected]


def _test_id(test):
    return as_test_case(test).test_id


def _change_paths(change):
    if isinstance(change, ChangeSet):
        return list(change.paths)
    paths = []
    for item in change or ():
        paths.append(item.path if isinstance(item, FileChange) else normalize_path(item))
    return paths


def rank_tests(model, change, tests, histories, vocab, workers=1):
    """Score every test for the change; order by (score desc, test_id asc)."""
    if vocab.fingerprint != model.vocab_fingerprint:
        raise ModelError("vocabulary fingerprint does not match the model")
    tests = [as_test_case(test) for test in tests]
    if not tests:
        return []
    history = ensure_history(histories)
    prepared = prepare_change(change, history, vocab)

    def score_chunk(chunk):
        rows = [row_for_test(prepared, test, history, vocab) for test in chunk]
        return predict_many(model, rows).tolist()

    chunks = [tests[i:i + ROW_CHUNK] for i in range(0, len(tests), ROW_CHUNK)]
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scored = list(pool.map(score_chunk, chunks))
    else:
        scored = [score_chunk(chunk) for chunk in chunks]
    scores = [score for chunk in scored for score in chunk]
    ranked = sorted(
        ((test.test_id, float(score)) for test, score in zip(tests, scores)),
        key=lambda item: (-item[1], item[0]),
    )
    return ranked


def latest_stability_flags(histories, as_of, window_days=DEFAULT_STABILITY_WINDOW_DAYS):
    """Flags of each test's flagged verdicts in ``[as_of - window, as_of)``."""
    history = histories if isinstance(histories, HistoryIndex) else HistoryIndex((), histories)
    start = as_of - window_days * SECONDS_PER_DAY
    flags = {}
    for test_id, events in history.flagged.items():
        for timestamp, flaky, broken in events:
            if not start <= timestamp < as_of:
                continue
            entry = flags.setdefault(test_id, {"flaky": False, "broken": False})
            entry["flaky"] = entry["flaky"] or flaky
            entry["broken"] = entry["broken"] or broken
    return dict(sorted(flags.items()))


def _is_unstable(flag):
    if isinstance(flag, Mapping):
        return bool(flag.get("flaky") or flag.get("broken"))
    return bool(flag)


def stability_filter(tests, latest_flags):
    kept = []
    removed = {}
    for test in tests:
        test_id = _test_id(test)
        if _is_unstable(latest_flags.get(test_id)):
            removed[test_id] = "unstable"
        else:
            kept.append(test)
    return kept, removed


def marker_dirs_from_paths(paths, markers=DEFAULT_MODULE_MARKERS):
    markers = set(markers)
    dirs = set()
    for path in paths:
        path = normalize_path(path)
        if posixpath.basename(path) in markers:
            dirs.add(posixpath.dirname(path))
    return dirs


def module_of(path, marker_dirs):
    """Deepest ancestor directory holding a module marker; '' is the root module."""
    directory = posixpath.dirname(normalize_path(path))
    while directory:
        if directory in marker_dirs:
            return directory
        directory = posixpath.dirname(directory)
    return ""


def modular_filter(
    tests,
    changed_files,
    module_markers=DEFAULT_MODULE_MARKERS,
    dependency_hops=DEFAULT_DEPENDENCY_HOPS,
    repo_files=(),
):
    changed = _change_paths(changed_files)
    tests = list(tests)
    known_paths = list(repo_files) + changed
    known_paths += [as_test_case(test).test_path for test in tests if as_test_case(test).test_path]
    marker_dirs = marker_dirs_from_paths(known_paths, module_markers)
    if not marker_dirs or not changed:
        return tests, {}

    changed_modules = {module_of(path, marker_dirs) for path in changed}
    kept = []
    removed = {}
    for test in tests:
        case = as_test_case(test)
        if not case.test_path:
            kept.append(test)
            continue
        module = module_of(case.test_path, marker_dirs)
        hops = min(directory_tree_distance(module, other) for other in changed_modules)
        if hops <= dependency_hops:
            kept.append(test)
        else:
            removed[case.test_id] = "wrong_module"
    return kept, removed


def is_docs_only(change, doc_extensions=DEFAULT_DOC_EXTENSIONS):
    paths = _change_paths(change)
    if not paths:
        return False
    extensions = {ext.lower().lstrip(".") for ext in doc_extensions}
    return all(path_extension(path) in extensions for path in paths)


class _CommentScanner:
    """Tracks block-comment and raw-string state along one side of a hunk."""

    def __init__(self, nested, starts_in_comment=False):
        self.nested = nested
        self.depth = 1 if starts_in_comment else 0
        self.in_raw_string = False

    def feed(self, text):
        """Consume one line; True when it holds code or a string literal."""
        has_code = False
        i = 0
        size = len(text)
        while i < size:
            if self.in_raw_string:
                end = text.find('"""', i)
                has_code = True
                if end < 0:
                    break
                self.in_raw_string = False
                i = end + 3
                continue
            if self.depth:
                if self.nested and text.startswith("/*", i):
                    self.depth += 1
                    i += 2
                elif text.startswith("*/", i):
                    self.depth -= 1
                    i += 2
                else:
                    i += 1
                continue
            if text.startswith("//", i):
                break
            if text.startswith("/*", i):
                self.depth = 1
                i += 2
                continue
            if text.startswith('"""', i):
                self.in_raw_string = True
                has_code = True
                i += 3
                continue
            char = text[i]
            if char in "\"'":
                has_code = True
                i = _skip_quoted(text, i)
                continue
            if not char.isspace():
                has_code = True
            i += 1
        return has_code


def _skip_quoted(text, start):
    quote = text[start]
    i = start + 1
    while i < len(text):
        if text[i] == "\\":
            i += 2
            continue
        if text[i] == quote:
            return i + 1
        i += 1
    return len(text)


def _starts_in_comment(lines):
    """Guess whether the side opens inside a block comment.

    Only a side whose first line reads like comment body (leading ``*``) and
    whose first marker is a ``*/`` with plain text before it qualifies.
    """
    if not lines or not lines[0].lstrip().startswith("*"):
        return False
    for text in lines:
        opening = text.find("/*")
        closing = text.find("*/")
        if closing >= 0 and (opening < 0 or closing < opening):
            before = text[:closing]
            return not any(token in before for token in ("//", '"', "'"))
        if opening >= 0:
            return False
    return False


def _hunk_is_comment_only(hunk, nested):
    old_side = [text for tag, text in hunk if tag in (" ", "-")]
    new_side = [text for tag, text in hunk if tag in (" ", "+")]
    old = _CommentScanner(nested, _starts_in_comment(old_side))
    new = _CommentScanner(nested, _starts_in_comment(new_side))
    for tag, text in hunk:
        if tag == " ":
            old.feed(text)
            new.feed(text)
        elif tag == "-" and old.feed(text):
            return False
        elif tag == "+" and new.feed(text):
            return False
    return True


def _split_hunks(diff):
    """Yield ``(path, hunk)`` pairs; hunk is a list of (tag, text)."""
    path = None
    lines = diff.splitlines()
    index = 0
    while index < len(lines):
        line = lines[index]
        index += 1
        if line.startswith("+++ "):
            target = line[4:].split("\t", 1)[0].strip()
            if target != "/dev/null":
                path = target[2:] if target.startswith("b/") else target
            continue
        if line.startswith("--- "):
            source = line[4:].split("\t", 1)[0].strip()
            if source != "/dev/null":
                path = source[2:] if source.startswith("a/") else source
            continue
        if line.startswith("Binary files "):
            raise DataError("binary change in diff")
        match = HUNK_HEADER_RE.match(line)
        if not match:
            continue
        old_left = int(match.group(1)) if match.group(1) is not None else 1
        new_left = int(match.group(2)) if match.group(2) is not None else 1
        hunk = []
        while index < len(lines) and (old_left > 0 or new_left > 0):
            body = lines[index]
            index += 1
            if body.startswith("\\"):
                continue
            tag = body[:1] or " "
            if tag == "-":
                old_left -= 1
            elif tag == "+":
                new_left -= 1
            elif tag == " ":
                old_left -= 1
                new_left -= 1
            else:
                raise DataError(f"malformed hunk line {body!r}")
            hunk.append((tag, body[1:]))
        yield path, hunk


def is_comment_only(diff, language):
    """True iff every changed line of the diff is blank or comment text.

    Anything doubtful (code on the line, a string literal, a binary change,
    a file of another language) makes the answer False.
    """
    settings = COMMENT_LANGUAGES.get(str(language or "").lower())
    if settings is None:
        raise DataError(f"unsupported diff language {language!r}")
    extensions = set(settings["extensions"])
    changed_lines = 0
    try:
        for path, hunk in _split_hunks(diff or ""):
            if path is not None and path_extension(path) not in extensions:
                return False
            changed_lines += sum(1 for tag, _ in hunk if tag in "+-")
            if not _hunk_is_comment_only(hunk, settings["nested_blocks"]):
                return False
    except DataError:
        return False
    return changed_lines > 0


def infer_language(paths):
    languages = set()
    for path in paths:
        extension = path_extension(path)
        matched = [
            name for name, rules in COMMENT_LANGUAGES.items() if extension in rules["extensions"]
        ]
        if not matched:
            return None
        languages.update(matched)
    return languages.pop() if len(languages) == 1 else None


def budget_from_fraction(n_tests, fraction):
    if not 0.0 <= fraction <= 1.0:
        raise DataError(f"budget fraction must be in [0, 1], got {fraction}")
    return int(math.ceil(fraction * n_tests - 1e-9))


def budget_from_time_limit(ranked, time_limit_s, durations=None, filtered_out=None):
    """Number of surviving tests that fit the time limit in rank order."""
    durations = durations or {}
    filtered_out = filtered_out or {}
    spent = 0.0
    count = 0
    for test_id, _ in ranked:
        if test_id in filtered_out:
            continue
        cost = durations.get(test_id, DEFAULT_TEST_DURATION_S)
        if spent + cost > time_limit_s:
            break
        spent += cost
        count += 1
    return count


def select(ranked, k, filters_output=None, change_id=None):
    if k < 0:
        raise DataError(f"budget must be >= 0, got {k}")
    filtered = dict(filters_output or {})
    selected = []
    for test_id, score in ranked:
        if len(selected) >= k:
            break
        if test_id in filtered:
            continue
        selected.append((test_id, score))
    return RankedSelection(tuple(selected), int(k), filtered, change_id, None, len(ranked))


def _skip_all(tests, reason, budget, change_id):
    filtered = {_test_id(test): reason for test in tests}
    return RankedSelection((), budget, filtered, change_id, reason, len(filtered))


def plan_selection(
    model,
    vocab,
    change,
    tests,
    histories,
    k=DEFAULT_BUDGET_K,
    budget_fraction=None,
    time_limit_s=None,
    diff=None,
    language=None,
    doc_extensions=DEFAULT_DOC_EXTENSIONS,
    module_markers=DEFAULT_MODULE_MARKERS,
    dependency_hops=DEFAULT_DEPENDENCY_HOPS,
    repo_files=(),
    modular=True,
    stability_window_days=DEFAULT_STABILITY_WINDOW_DAYS,
    workers=1,
):
    """Inference pipeline for one change: short-circuits, rank, filters, budget."""
    tests = [as_test_case(test) for test in tests]
    history = ensure_history(histories)
    budget = k
    if budget_fraction is not None:
        budget = budget_from_fraction(len(tests), budget_fraction)

    if is_docs_only(change, doc_extensions):
        log_info("Docs-only change, no tests selected.", change=change.change_id)
        return _skip_all(tests, "docs_only_commit", budget, change.change_id)
    if diff:
        language = language or infer_language(change.paths)
        if language is not None and is_comment_only(diff, language):
            log_info("Comment-only change, no tests selected.", change=change.change_id)
            return _skip_all(tests, "comment_only_commit", budget, change.change_id)

    ranked = rank_tests(model, change, tests, history, vocab, workers)
    flags = latest_stability_flags(history, change.timestamp, stability_window_days)
    _, unstable = stability_filter(tests, flags)
    filtered = dict(unstable)
    if modular:
        _, wrong_module = modular_filter(tests, change, module_markers, dependency_hops, repo_files)
        for test_id, reason in wrong_module.items():
            filtered.setdefault(test_id, reason)
    if time_limit_s is not None:
        budget = budget_from_time_limit(ranked, time_limit_s, history.mean_durations, filtered)

    selection = select(ranked, budget, filtered, change.change_id)
    log_info(
        "Selection planned.",
        change=change.change_id,
        count=len(selection.selected),
        total=len(tests),
        reason=f"filtered={len(filtered)}",
    )
    return selection


def model_version(model):
    fingerprint = model.vocab_fingerprint or ""
    return f"{MODEL_FORMAT_VERSION}:{fingerprint[:12]}"


def selection_report(selection, model=None):
    report = {
        "change_id": selection.change_id,
        "selected": [
            {"test": test_id, "score": score, "rank": rank}
            for rank, (test_id, score) in enumerate(selection.selected, start=1)
        ],
        "filtered": [
            {"test": test_id, "reason": reason}
            for test_id, reason in sorted(selection.filtered_out.items())
        ],
        "budget": selection.budget,
        "model_version": model_version(model) if model is not None else None,
    }
    if selection.skip_reason:
        report["reason"] = selection.skip_reason
    return report
