import os


SECONDS_PER_DAY = 86400

CHANGE_TYPES = ("added", "modified", "deleted", "renamed", "copied")
VERDICTS = ("passed", "failed")

# File-history windows (days) for the number-of-changes features.
CHANGE_WINDOWS_DAYS = (3, 14, 56)
AUTHOR_WINDOW_DAYS = 56
# Test-history windows (days) for the failure-rate features.
FAILURE_WINDOWS_DAYS = (7, 14, 28)
EXECUTION_WINDOW_DAYS = 28

DEFAULT_MIN_CHANGES_56D = 2
DEFAULT_MAX_CHANGE_FRACTION = 0.20
DEFAULT_EXTENSION_MIN_COUNT = 10
CROSS_NEIGHBORS = 3
OTHER_EXTENSION = "other"

# Changed-file / test co-failure window (days).
CO_FAILURE_WINDOW_DAYS = 84

FEATURE_GROUPS = ("file", "test", "cross", "co_failure")

DEFAULT_TRAIN_DAYS = 56
DEFAULT_VAL_DAYS = 14
DEFAULT_HOLDOUT_FRACTION = 0.3
DEFAULT_BUDGET_K = 50
DEFAULT_BENCH_BUDGET = 0.5
DEFAULT_THRESHOLD = 0.5
DEFAULT_STABILITY_WINDOW_DAYS = 14
RETRAIN_EVERY_DAYS = 14

DEFAULT_MODULE_MARKERS = ("build.gradle", "build.gradle.kts")
DEFAULT_DEPENDENCY_HOPS = 1
DEFAULT_DOC_EXTENSIONS = ("md",)

COMMENT_LANGUAGES = {
    "java": {"extensions": ("java",), "nested_blocks": False},
    "kotlin": {"extensions": ("kt", "kts"), "nested_blocks": True},
}

FILTER_REASONS = (
    "unstable",
    "wrong_module",
    "docs_only_commit",
    "comment_only_commit",
)

DEFAULT_STABILITY_POLICY = {
    "drop_flaky": True,
    "drop_broken": True,
}

DEFAULT_LEARNER = {
    "n_trees": 200,
    "max_depth": 6,
    "learning_rate": 0.1,
    "min_child_weight": 1.0,
    "l2_reg": 1.0,
    "positive_class_weight": 1.0,
    "seed": 0,
}

# Grid presets; "base_rate" in positive_class_weight resolves to 1/base_rate.
GRID_PRESETS = {
    "default": {
        "n_trees": (100, 200),
        "max_depth": (4, 6),
        "learning_rate": (0.05, 0.1),
        "positive_class_weight": (1.0, "base_rate"),
    },
    "small": {
        "n_trees": (50,),
        "max_depth": (3, 4),
        "learning_rate": (0.1,),
        "positive_class_weight": (1.0, "base_rate"),
    },
}
DEFAULT_GRID_PRESET = "default"

MODEL_FORMAT_VERSION = 1
MAX_ABS_LOGIT = 30.0
LINE_SEARCH_STEPS = 12

CI_CSV_SCHEMAS = {
    "iofrol_gsdtsr": {
        "delimiter": ";",
        "required": ("Id", "Cycle", "Verdict", "LastRun"),
        "optional": ("Duration", "Name"),
        "failure_codes": ("1",),
    },
}

CURVE_GRID_STEPS = 100
DEFAULT_TEST_DURATION_S = 60.0

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_MODEL = 3

WORKERS_ENV = "TESTSEL_WORKERS"
CONFIG_ENV = "TESTSEL_CONFIG"
LOG_LEVEL_ENV = "TESTSEL_LOG_LEVEL"
DEFAULT_CONFIG_FILE = os.path.join("config", "testsel.json")
LEGACY_CONFIG_FILE = "testsel.json"

SYNTH_DEFAULTS = {
    "n_files": 200,
    "n_tests": 100,
    "n_days": 90,
    "commits_per_day": 5,
    "n_modules": 4,
    "n_packages": 5,
    "n_authors": 6,
    "n_fault_rules": 10,
    "noise_rate": 0.02,
    "flaky_rate": 0.0,
    "start_ts": 1600041600,
    "max_files_per_commit": 3,
    "popularity_exponent": 0.6,
    "duration_range": (5.0, 120.0),
}
SYNTH_CHANGE_TYPE_WEIGHTS = {
    "modified": 0.88,
    "added": 0.05,
    "renamed": 0.03,
    "copied": 0.02,
    "deleted": 0.02,
}
