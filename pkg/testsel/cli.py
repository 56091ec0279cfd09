import argparse
import json
import os
import sys
import time

from .config import config_for_command, load_config, resolve_workers
from .datamodel import validate_history
from .errors import DataError, UsageError, exit_code_for
from .evaluation import (
    STRATEGIES,
    WallTimer,
    ablation_table,
    compare_strategies,
    evaluate_model,
    model_scorer,
    write_curve_csv,
    write_report_json,
    write_table_csv,
)
from .features import HistoryIndex, build_training_matrix, build_vocabulary
from .ingest import (
    chronological_split,
    parse_change,
    parse_ci_csv,
    parse_commit_log,
    parse_test_catalog,
    parse_test_results_with_catalog,
    read_lines,
    split_by_fraction,
)
from .learner import (
    LearnerConfig,
    default_grid,
    feature_importance,
    fit,
    group_importance,
    load_model,
    save_model,
    tune,
)
from .logging_utils import log_error, log_info, log_warn
from .run_logs import ArtifactTracker, build_run_log_path, write_run_log
from .selector import plan_selection, selection_report
from .settings import (
    CI_CSV_SCHEMAS,
    DEFAULT_BENCH_BUDGET,
    DEFAULT_BUDGET_K,
    DEFAULT_CONFIG_FILE,
    DEFAULT_DEPENDENCY_HOPS,
    DEFAULT_DOC_EXTENSIONS,
    DEFAULT_GRID_PRESET,
    DEFAULT_HOLDOUT_FRACTION,
    DEFAULT_LEARNER,
    DEFAULT_MODULE_MARKERS,
    DEFAULT_STABILITY_WINDOW_DAYS,
    DEFAULT_THRESHOLD,
    DEFAULT_TRAIN_DAYS,
    DEFAULT_VAL_DAYS,
    EXIT_OK,
    FEATURE_GROUPS,
    GRID_PRESETS,
    RETRAIN_EVERY_DAYS,
    SECONDS_PER_DAY,
    WORKERS_ENV,
)
from .synth import synth_generate, write_synth_outputs


class CliParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def split_list(value):
    if value is None:
        return []
    if isinstance(value, (list, tuple)):
        items = value
    else:
        items = str(value).split(",")
    return [str(item).strip() for item in items if str(item).strip()]


def budget_value(text):
    """Integer count, or a fraction when written with a decimal point."""
    text = str(text).strip()
    try:
        if "." in text:
            value = float(text)
            if not 0.0 < value < 1.0:
                raise ValueError
            return value
        value = int(text)
        if value < 0:
            raise ValueError
        return value
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected a test count or a fraction in (0, 1), got {text!r}"
        ) from None


def _add_history_inputs(parser):
    parser.add_argument(
        "--commits",
        help="Commit log (JSON lines: id, ts, author, files).",
    )
    parser.add_argument(
        "--results",
        help="Test results per CI cycle (JSON lines: cycle, ts, commits, results).",
    )
    parser.add_argument(
        "--tests",
        help="Test catalog (JSON lines: test, path, module). Defaults to paths in --results.",
    )


def build_parser():
    parser = CliParser(
        prog="testsel",
        description="Change-based regression test selection: train, predict, evaluate.",
    )
    parser.add_argument(
        "--config",
        dest="config_file",
        help=(
            "JSON key-value config; keys are option names. "
            f"Defaults to {DEFAULT_CONFIG_FILE} if present."
        ),
    )
    parser.add_argument(
        "--workers",
        type=int,
        help=f"Worker threads for row building (default: ${WORKERS_ENV} or 1).",
    )
    parser.add_argument(
        "--run-log",
        action="store_true",
        help="Also write an Excel run log under logs/<command>/.",
    )
    parser.add_argument(
        "--include-timings",
        action="store_true",
        help="Include wall times in JSON/CSV artifacts (they are always logged).",
    )
    commands = parser.add_subparsers(dest="command", metavar="command", parser_class=CliParser)
    commands.required = True

    train = commands.add_parser(
        "train",
        help="Train a model on a chronological window.",
        description=(
            "Train on the window before the last --val-days and tune on that last window. "
            f"Retrain every {RETRAIN_EVERY_DAYS} days to follow the codebase."
        ),
    )
    _add_history_inputs(train)
    train.add_argument("--train-days", type=int, default=DEFAULT_TRAIN_DAYS)
    train.add_argument("--val-days", type=int, default=DEFAULT_VAL_DAYS)
    train.add_argument("--out", help="Model file to write (JSON).")
    train.add_argument("--no-tune", dest="tune", action="store_false", help="Fit one config.")
    train.add_argument("--grid", choices=sorted(GRID_PRESETS), default=DEFAULT_GRID_PRESET)
    train.add_argument("--seed", type=int, default=DEFAULT_LEARNER["seed"])
    train.add_argument(
        "--groups",
        default=",".join(FEATURE_GROUPS),
        help=f"Feature groups to use, comma separated ({','.join(FEATURE_GROUPS)}).",
    )
    train.add_argument("--n-trees", type=int, default=DEFAULT_LEARNER["n_trees"])
    train.add_argument("--max-depth", type=int, default=DEFAULT_LEARNER["max_depth"])
    train.add_argument("--learning-rate", type=float, default=DEFAULT_LEARNER["learning_rate"])
    train.add_argument("--min-child-weight", type=float, default=DEFAULT_LEARNER["min_child_weight"])
    train.add_argument("--l2-reg", type=float, default=DEFAULT_LEARNER["l2_reg"])
    train.add_argument(
        "--positive-class-weight",
        type=float,
        default=DEFAULT_LEARNER["positive_class_weight"],
    )

    predict = commands.add_parser("predict", help="Select tests for one change.")
    predict.add_argument("--model")
    predict.add_argument("--change", help="Change file (commit record, optional diff).")
    predict.add_argument("--tests", help="Test catalog (JSON lines).")
    predict.add_argument("--commits", help="Commit history for file features.")
    predict.add_argument("--results", help="Result history for test features and stability flags.")
    predict.add_argument("--repo-files", help="Repository file listing (one path per line).")
    predict.add_argument("--k", type=int, default=DEFAULT_BUDGET_K)
    predict.add_argument("--budget-fraction", type=float)
    predict.add_argument("--time-limit-s", type=float)
    predict.add_argument("--no-modular", dest="modular", action="store_false")
    predict.add_argument("--dependency-hops", type=int, default=DEFAULT_DEPENDENCY_HOPS)
    predict.add_argument("--doc-extensions", default=",".join(DEFAULT_DOC_EXTENSIONS))
    predict.add_argument("--module-markers", default=",".join(DEFAULT_MODULE_MARKERS))
    predict.add_argument(
        "--stability-window-days", type=int, default=DEFAULT_STABILITY_WINDOW_DAYS
    )
    predict.add_argument("--out", help="Selection report (JSON).")

    evaluate = commands.add_parser("evaluate", help="Replay held-out cycles through a model.")
    evaluate.add_argument("--model")
    _add_history_inputs(evaluate)
    evaluate.add_argument("--eval-days", type=int, help="Only evaluate cycles of the last N days.")
    evaluate.add_argument("--k", type=int, default=DEFAULT_BUDGET_K)
    evaluate.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    evaluate.add_argument(
        "--strategies",
        help=f"Also compare selection strategies ({','.join(STRATEGIES)}).",
    )
    evaluate.add_argument(
        "--strategy-k",
        type=budget_value,
        default=DEFAULT_BUDGET_K,
        help="Strategy budget: a count, or a fraction such as 0.008 or 0.15.",
    )
    evaluate.add_argument(
        "--ablation",
        action="store_true",
        help="Retrain per feature-group set on the cycles before the evaluated window.",
    )
    evaluate.add_argument(
        "--train-days",
        type=int,
        default=DEFAULT_TRAIN_DAYS,
        help="Training window (days) for --ablation.",
    )
    evaluate.add_argument("--seed", type=int, default=0)
    evaluate.add_argument("--out", help="Report (JSON).")
    evaluate.add_argument("--csv-out", help="Report rows (CSV).")
    evaluate.add_argument("--curve-out", help="Confidence curve points (CSV).")

    bench = commands.add_parser("bench", help="Evaluate on a public CI dataset CSV.")
    bench.add_argument("--dataset")
    bench.add_argument("--schema", choices=sorted(CI_CSV_SCHEMAS), default="iofrol_gsdtsr")
    bench.add_argument("--budget", type=float, default=DEFAULT_BENCH_BUDGET)
    bench.add_argument("--holdout-fraction", type=float, default=DEFAULT_HOLDOUT_FRACTION)
    bench.add_argument("--failure-codes", help="Verdict codes counted as failures (default: 1).")
    bench.add_argument("--tune", action="store_true", help="Tune on the last part of training.")
    bench.add_argument("--grid", choices=sorted(GRID_PRESETS), default="small")
    bench.add_argument("--seed", type=int, default=DEFAULT_LEARNER["seed"])
    bench.add_argument("--out", help="Result table (CSV).")
    bench.add_argument("--curve-out", help="Confidence curve points (CSV).")

    synth = commands.add_parser("synth", help="Generate a synthetic history.")
    synth.add_argument("--config", dest="synth_config", help="Synthetic history config (JSON).")
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--out-dir")

    validate = commands.add_parser("validate", help="Report data-quality issues.")
    _add_history_inputs(validate)
    validate.add_argument("--out", help="Validation report (JSON).")

    importance = commands.add_parser("importance", help="Gain importance of a model.")
    importance.add_argument("--model")
    importance.add_argument("--out", help="Per-feature importance (CSV).")
    return parser


REQUIRED_OPTIONS = {
    "train": ("commits", "results", "out"),
    "predict": ("model", "change", "tests", "out"),
    "evaluate": ("model", "results", "out"),
    "bench": ("dataset", "out"),
    "synth": ("out_dir",),
    "validate": ("commits", "results"),
    "importance": ("model",),
}


def _check_required(args):
    missing = [
        "--" + dest.replace("_", "-")
        for dest in REQUIRED_OPTIONS[args.command]
        if getattr(args, dest, None) in (None, "")
    ]
    if missing:
        raise UsageError(
            f"testsel {args.command}: the following arguments are required: "
            + ", ".join(missing)
        )
    return args


def _subparser(parser, command):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    return None


def _dests(parser):
    return {action.dest for action in parser._actions if action.dest != argparse.SUPPRESS}


def parse_arguments(argv):
    """Parse flags over config-file values over built-in defaults."""
    parser = build_parser()
    args = parser.parse_args(argv)
    config = load_config(args.config_file)
    if not config:
        return _check_required(args)
    values = config_for_command(config, args.command)
    sub = _subparser(parser, args.command)
    top_dests = _dests(parser) - {"config_file", "command"}
    sub_dests = _dests(sub)
    unknown = sorted(set(values) - top_dests - sub_dests)
    if unknown:
        log_warn("Config keys ignored for this command.", phase=args.command, reason=",".join(unknown))
    parser.set_defaults(**{key: values[key] for key in values if key in top_dests})
    sub.set_defaults(**{key: values[key] for key in values if key in sub_dests})
    return _check_required(parser.parse_args(argv))


def _open_lines(path):
    if not path:
        return []
    return read_lines(path)


def _load_history(args):
    commits = parse_commit_log(_open_lines(args.commits))
    cycles, catalog = parse_test_results_with_catalog(_open_lines(args.results))
    tests = catalog
    if getattr(args, "tests", None):
        tests = parse_test_catalog(_open_lines(args.tests))
    log_info(
        "History loaded.",
        phase="ingest",
        commit=len(commits),
        cycle=len(cycles),
        count=len(tests),
    )
    return commits, cycles, tests


def _report_issues(report):
    for kind, count in sorted(report.counts().items()):
        log_warn("Data-quality issue.", phase="validate", reason=kind, count=count)


def _learner_config(args):
    return LearnerConfig(
        n_trees=args.n_trees,
        max_depth=args.max_depth,
        learning_rate=args.learning_rate,
        min_child_weight=args.min_child_weight,
        l2_reg=args.l2_reg,
        positive_class_weight=args.positive_class_weight,
        seed=args.seed,
    )


def _write_run_log(args, rows):
    if not args.run_log:
        return
    write_run_log(rows, build_run_log_path(log_type=args.command))


def _timings(args, timer):
    times = timer.as_dict()
    log_info(
        "Timings.",
        phase=args.command,
        reason=" ".join(f"{name}={value:.3f}s" for name, value in times.items()),
    )
    return times


def run_train(args, tracker, workers):
    timer = WallTimer()
    with timer.phase("preparation"):
        commits, cycles, tests = _load_history(args)
        _report_issues(validate_history(commits, cycles, tests if args.tests else None))
        train_cycles, val_cycles = chronological_split(cycles, args.train_days, args.val_days)
        history = HistoryIndex(commits, cycles)
        cutoff = train_cycles[-1].timestamp
        train_commits = [commit for commit in commits if commit.timestamp <= cutoff]
        groups = split_list(args.groups)
        vocab = build_vocabulary(train_commits, train_cycles, tests, groups)
        train_rows = build_training_matrix(
            train_cycles, commits, vocab, tests=tests, history=history, workers=workers
        )
    with timer.phase("training"):
        if args.tune:
            val_rows = build_training_matrix(
                val_cycles, commits, vocab, tests=tests, history=history, workers=workers
            )
            base_rate = sum(row.label for row in train_rows) / max(len(train_rows), 1)
            base = _learner_config(args).to_dict()
            grid = default_grid(base_rate, args.grid, base)
            config, model = tune(train_rows, val_rows, grid, args.seed)
        else:
            config = _learner_config(args)
            model = fit(train_rows, config, args.seed)
    save_model(model, vocab, args.out, tracker)
    times = _timings(args, timer)
    log_info("Model saved.", phase="train", config=config.label(), path=args.out)
    row = {"out": args.out, "rows": len(train_rows), **config.to_dict()}
    if args.include_timings:
        row.update({f"time_{name}_s": value for name, value in times.items()})
    _write_run_log(args, [row])


def run_predict(args, tracker, workers):
    started = time.perf_counter()
    model, vocab = load_model(args.model)
    with open(args.change, "r", encoding="utf-8") as handle:
        change, diff, language = parse_change(handle.read())
    tests = parse_test_catalog(_open_lines(args.tests))
    commits = parse_commit_log(_open_lines(args.commits))
    cycles = []
    if args.results:
        cycles, _ = parse_test_results_with_catalog(_open_lines(args.results))
    repo_files = _open_lines(args.repo_files)
    selection = plan_selection(
        model,
        vocab,
        change,
        tests,
        HistoryIndex(commits, cycles),
        k=args.k,
        budget_fraction=args.budget_fraction,
        time_limit_s=args.time_limit_s,
        diff=diff,
        language=language,
        doc_extensions=split_list(args.doc_extensions),
        module_markers=split_list(args.module_markers),
        dependency_hops=args.dependency_hops,
        repo_files=repo_files,
        modular=args.modular,
        stability_window_days=args.stability_window_days,
        workers=workers,
    )
    report = selection_report(selection, model)
    elapsed = time.perf_counter() - started
    if args.include_timings:
        report["elapsed_s"] = elapsed
    tracker.write_json(args.out, report)
    log_info(
        "Selection written.",
        phase="predict",
        change=change.change_id,
        count=len(selection.selected),
        elapsed_s=elapsed,
        path=args.out,
    )
    _write_run_log(
        args,
        [{"change": change.change_id, "test": test_id, "score": score, "rank": rank}
         for rank, (test_id, score) in enumerate(selection.selected, start=1)],
    )


def run_evaluate(args, tracker, workers):
    timer = WallTimer()
    with timer.phase("preparation"):
        model, vocab = load_model(args.model)
        commits, cycles, tests = _load_history(args)
        history = HistoryIndex(commits, cycles)
        eval_cycles = cycles
        if args.eval_days:
            last = cycles[-1].timestamp if cycles else 0
            eval_cycles = [
                c for c in cycles if c.timestamp > last - args.eval_days * SECONDS_PER_DAY
            ]
    report = evaluate_model(model, vocab, eval_cycles, history, tests, args.k, args.threshold, timer=timer)
    payload = {"metrics": report.to_dict(args.include_timings)}
    rows = [{"configuration": "model", **report.summary(args.include_timings)}]
    strategies = split_list(args.strategies)
    if strategies:
        scorer = model_scorer(model, vocab, history, tests)
        table = compare_strategies(eval_cycles, strategies, args.strategy_k, args.seed, scorer)
        payload["strategies"] = table
        rows.extend({"configuration": f"strategy:{row['strategy']}", **row} for row in table)
        for row in table:
            log_info(
                "Strategy compared.",
                phase="evaluate",
                config=row["strategy"],
                score=row["recall"],
                reason=f"selection_rate={row['selection_rate']:.4f}",
            )
    if args.ablation:
        table = _ablation(args, model, commits, cycles, eval_cycles, tests, workers)
        payload["ablation"] = table
        rows.extend({"configuration": f"groups:{row['groups']}", **row} for row in table)
    write_report_json(tracker, args.out, payload)
    if args.csv_out:
        write_table_csv(tracker, args.csv_out, rows)
    if args.curve_out:
        write_curve_csv(tracker, args.curve_out, report.curve)
    _timings(args, timer)
    _write_run_log(args, rows)


def _ablation(args, model, commits, cycles, eval_cycles, tests, workers):
    if not args.eval_days:
        raise UsageError("evaluate: --ablation needs --eval-days")
    first = eval_cycles[0].timestamp if eval_cycles else 0
    start = first - args.train_days * SECONDS_PER_DAY
    train_cycles = [c for c in cycles if start <= c.timestamp < first]
    if not train_cycles:
        raise DataError("insufficient history: no cycles before the evaluated window")
    table = ablation_table(
        train_cycles,
        eval_cycles,
        commits,
        tests,
        model.config,
        args.k,
        workers=workers,
    )
    for row in table:
        log_info(
            "Ablation row.",
            phase="evaluate",
            config=row["groups"],
            apfd=row["apfd"],
            napfd=row["napfd"],
        )
    return table


def run_bench(args, tracker, workers):
    if not 0.0 <= args.budget <= 1.0:
        raise UsageError("bench: --budget must be a fraction in [0, 1]")
    timer = WallTimer()
    with timer.phase("preparation"):
        codes = split_list(args.failure_codes) or None
        cycles = parse_ci_csv(os.path.expanduser(args.dataset), args.schema, codes)
        train_cycles, test_cycles = split_by_fraction(cycles, args.holdout_fraction)
        history = HistoryIndex((), cycles)
        vocab = build_vocabulary((), train_cycles, (), ("test",))
        train_rows = build_training_matrix(train_cycles, (), vocab, history=history, workers=workers)
    with timer.phase("training"):
        if args.tune:
            fit_cycles, val_cycles = split_by_fraction(train_cycles, DEFAULT_HOLDOUT_FRACTION)
            fit_rows = build_training_matrix(fit_cycles, (), vocab, history=history, workers=workers)
            val_rows = build_training_matrix(val_cycles, (), vocab, history=history, workers=workers)
            base_rate = sum(row.label for row in fit_rows) / max(len(fit_rows), 1)
            config, _ = tune(fit_rows, val_rows, default_grid(base_rate, args.grid), args.seed)
            model = fit(train_rows, config, args.seed)
        else:
            model = fit(train_rows, LearnerConfig(seed=args.seed), args.seed)
    report = evaluate_model(
        model,
        vocab,
        test_cycles,
        history,
        budget_fraction=args.budget,
        timer=timer,
    )
    row = {
        "dataset": os.path.basename(args.dataset),
        "schema": args.schema,
        "budget": args.budget,
        "train_cycles": len(train_cycles),
        **report.summary(args.include_timings),
    }
    write_table_csv(tracker, args.out, [row])
    if args.curve_out:
        write_curve_csv(tracker, args.curve_out, report.curve)
    _timings(args, timer)
    log_info("Bench finished.", phase="bench", apfd=report.apfd, napfd=report.napfd, path=args.out)
    _write_run_log(args, [row])


def run_synth(args, tracker, workers):
    config = {}
    if args.synth_config:
        with open(args.synth_config, "r", encoding="utf-8") as handle:
            try:
                config = json.load(handle)
            except json.JSONDecodeError as exc:
                raise DataError(f"synth config: invalid JSON ({exc.msg})") from exc
    commits, cycles = synth_generate(config, args.seed)
    write_synth_outputs(tracker, args.out_dir, config, args.seed, commits, cycles)
    log_info("Synthetic history written.", phase="synth", commit=len(commits), cycle=len(cycles), path=args.out_dir)


def run_validate(args, tracker, workers):
    commits, cycles, tests = _load_history(args)
    report = validate_history(commits, cycles, tests if args.tests else None)
    _report_issues(report)
    if report.is_clean:
        log_info("History is clean.", phase="validate")
    if args.out:
        tracker.write_json(args.out, report.to_dict())
    _write_run_log(args, report.entries)


def run_importance(args, tracker, workers):
    model, vocab = load_model(args.model)
    for group, entry in group_importance(model, vocab).items():
        log_info(
            "Group importance.",
            phase=group,
            count=entry["features"],
            score=entry["total"],
            reason=f"mean={entry['mean']:.6g}",
        )
    rows = [
        {
            "feature_id": feature_id,
            "name": vocab.feature_name(feature_id),
            "group": vocab.group_of(feature_id),
            "gain": gain,
        }
        for feature_id, gain in feature_importance(model).items()
    ]
    if args.out:
        write_table_csv(tracker, args.out, rows, ["feature_id", "name", "group", "gain"])
    _write_run_log(args, rows)


COMMANDS = {
    "train": run_train,
    "predict": run_predict,
    "evaluate": run_evaluate,
    "bench": run_bench,
    "synth": run_synth,
    "validate": run_validate,
    "importance": run_importance,
}


def dispatch(argv):
    """Run one subcommand; return its exit code.

    On failure every artifact the command already wrote is removed.
    """
    tracker = ArtifactTracker()
    try:
        args = parse_arguments(argv)
        workers = resolve_workers(args.workers)
        started = time.perf_counter()
        log_info("Command started.", phase=args.command)
        COMMANDS[args.command](args, tracker, workers)
        log_info(
            "Command finished.",
            phase=args.command,
            count=len(tracker.paths),
            elapsed_s=time.perf_counter() - started,
        )
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_OK
    except Exception as exc:
        tracker.rollback()
        code = exit_code_for(exc)
        log_error(str(exc), error=type(exc).__name__)
        return code
    return EXIT_OK


def main(argv=None):
    sys.exit(dispatch(sys.argv[1:] if argv is None else argv))
