"""Gradient-boosted decision trees for sparse binary classification.

Trees are grown level-wise with exact greedy splits over the nonzero values
of each feature. Absent (or zero) values follow a learned default direction.
A row goes left at a split iff ``value < threshold``.
"""

import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from functools import cached_property

import numpy as np

from .datamodel import FeatureVocabulary
from .errors import DataError, ModelError
from .logging_utils import log_debug, log_info
from .settings import (
    DEFAULT_GRID_PRESET,
    DEFAULT_LEARNER,
    DEFAULT_THRESHOLD,
    GRID_PRESETS,
    LINE_SEARCH_STEPS,
    MAX_ABS_LOGIT,
    MODEL_FORMAT_VERSION,
)


MIN_CHILD_HESSIAN = 1e-12
MIN_SPLIT_GAIN = 1e-12
GRID_KEYS = ("n_trees", "max_depth", "learning_rate", "positive_class_weight")


@dataclass(frozen=True)
class LearnerConfig:
    n_trees: int = DEFAULT_LEARNER["n_trees"]
    max_depth: int = DEFAULT_LEARNER["max_depth"]
    learning_rate: float = DEFAULT_LEARNER["learning_rate"]
    min_child_weight: float = DEFAULT_LEARNER["min_child_weight"]
    l2_reg: float = DEFAULT_LEARNER["l2_reg"]
    positive_class_weight: float = DEFAULT_LEARNER["positive_class_weight"]
    seed: int = DEFAULT_LEARNER["seed"]

    def __post_init__(self):
        object.__setattr__(self, "n_trees", int(self.n_trees))
        object.__setattr__(self, "max_depth", int(self.max_depth))
        object.__setattr__(self, "seed", int(self.seed))
        for name in ("learning_rate", "min_child_weight", "l2_reg", "positive_class_weight"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise DataError(f"invalid learner config: {name} must be finite")
            object.__setattr__(self, name, value)
        if self.n_trees < 0 or self.max_depth < 0:
            raise DataError("invalid learner config: n_trees and max_depth must be >= 0")
        if self.learning_rate <= 0 or self.positive_class_weight <= 0:
            raise DataError(
                "invalid learner config: learning_rate and positive_class_weight must be > 0"
            )
        if self.min_child_weight < 0 or self.l2_reg < 0:
            raise DataError("invalid learner config: min_child_weight and l2_reg must be >= 0")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {key: data[key] for key in cls.__dataclass_fields__ if key in data}
        return cls(**known)

    def label(self):
        return (
            f"trees={self.n_trees} depth={self.max_depth} "
            f"rate={self.learning_rate:g} pos_weight={self.positive_class_weight:g}"
        )


@dataclass(frozen=True)
class RegressionTree:
    """Parallel node arrays; ``left == -1`` marks a leaf."""

    feature: tuple
    threshold: tuple
    default_left: tuple
    left: tuple
    right: tuple
    value: tuple
    gain: tuple

    @cached_property
    def arrays(self):
        return (
            np.asarray(self.feature, dtype=np.int64),
            np.asarray(self.threshold, dtype=np.float64),
            np.asarray(self.default_left, dtype=bool),
            np.asarray(self.left, dtype=np.int64),
            np.asarray(self.right, dtype=np.int64),
            np.asarray(self.value, dtype=np.float64),
        )

    @property
    def n_nodes(self):
        return len(self.feature)

    def depth(self):
        deepest = 0
        stack = [(0, 0)]
        while stack:
            node, level = stack.pop()
            deepest = max(deepest, level)
            if self.left[node] >= 0:
                stack.append((self.left[node], level + 1))
                stack.append((self.right[node], level + 1))
        return deepest

    def splits(self):
        for node in range(self.n_nodes):
            if self.left[node] >= 0:
                yield self.feature[node], self.gain[node]

    def to_dict(self):
        return {
            "feature": list(self.feature),
            "threshold": list(self.threshold),
            "default_left": list(self.default_left),
            "left": list(self.left),
            "right": list(self.right),
            "value": list(self.value),
            "gain": list(self.gain),
        }

    @classmethod
    def from_dict(cls, data):
        tree = cls(
            tuple(int(v) for v in data["feature"]),
            tuple(float(v) for v in data["threshold"]),
            tuple(bool(v) for v in data["default_left"]),
            tuple(int(v) for v in data["left"]),
            tuple(int(v) for v in data["right"]),
            tuple(float(v) for v in data["value"]),
            tuple(float(v) for v in data["gain"]),
        )
        lengths = {len(getattr(tree, name)) for name in cls.__dataclass_fields__}
        if len(lengths) != 1 or not tree.feature:
            raise ModelError("corrupt tree: node arrays differ in length")
        for node in range(tree.n_nodes):
            children = (tree.left[node], tree.right[node])
            if children[0] >= 0 and not all(node < c < tree.n_nodes for c in children):
                raise ModelError("corrupt tree: child index out of range")
        return tree

    @classmethod
    def constant(cls, value=0.0):
        return cls((-1,), (0.0,), (True,), (-1,), (-1,), (float(value),), (0.0,))


@dataclass(frozen=True)
class Model:
    trees: tuple
    base_logit: float
    config: LearnerConfig
    vocab_fingerprint: str = None
    train_loss: tuple = field(default_factory=tuple)

    @cached_property
    def layout(self):
        used = sorted({f for tree in self.trees for f, _ in tree.splits()})
        column = {feature_id: index for index, feature_id in enumerate(used)}
        node_columns = [
            np.asarray([column.get(f, 0) for f in tree.feature], dtype=np.int64)
            for tree in self.trees
        ]
        return used, column, node_columns

    def max_feature_id(self):
        used = self.layout[0]
        return used[-1] if used else -1

    def to_dict(self):
        return {
            "trees": [tree.to_dict() for tree in self.trees],
            "base_logit": float(self.base_logit),
            "config": self.config.to_dict(),
            "vocab_fingerprint": self.vocab_fingerprint,
            "train_loss": [float(v) for v in self.train_loss],
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            tuple(RegressionTree.from_dict(tree) for tree in data["trees"]),
            float(data["base_logit"]),
            LearnerConfig.from_dict(data["config"]),
            data.get("vocab_fingerprint"),
            tuple(float(v) for v in data.get("train_loss") or ()),
        )


def sigmoid(logits):
    return 1.0 / (1.0 + np.exp(-np.clip(logits, -MAX_ABS_LOGIT, MAX_ABS_LOGIT)))


def weighted_log_loss(logits, labels, weights):
    losses = np.logaddexp(0.0, logits) - labels * logits
    return float(np.sum(weights * losses) / np.sum(weights))


class _SparseColumns:
    """All nonzero entries sorted by (feature, value)."""

    def __init__(self, rows):
        features = []
        row_ids = []
        values = []
        for index, row in enumerate(rows):
            for feature_id, value in row.sparse_features.items():
                features.append(feature_id)
                row_ids.append(index)
                values.append(value)
        self.features = np.asarray(features, dtype=np.int64)
        self.rows = np.asarray(row_ids, dtype=np.int64)
        self.values = np.asarray(values, dtype=np.float64)
        if not np.all(np.isfinite(self.values)):
            raise DataError("non-finite feature value in training rows")
        order = np.lexsort((self.values, self.features))
        self.features = self.features[order]
        self.rows = self.rows[order]
        self.values = self.values[order]
        self.bounds = {}
        if len(self.features):
            starts = np.flatnonzero(np.r_[True, self.features[1:] != self.features[:-1]])
            ends = np.r_[starts[1:], len(self.features)]
            for start, end in zip(starts.tolist(), ends.tolist()):
                self.bounds[int(self.features[start])] = (start, end)

    def column(self, feature_id):
        start, end = self.bounds[feature_id]
        return self.rows[start:end], self.values[start:end]


def _find_splits(columns, slot, node_g, node_h, grad, hess, config):
    """Best (feature, threshold, default_left, gain) for each frontier node."""
    n_nodes = len(node_g)
    best = [None] * n_nodes
    if not len(columns.features):
        return best
    entry_slot = slot[columns.rows]
    mask = entry_slot >= 0
    if not mask.any():
        return best
    features = columns.features[mask]
    values = columns.values[mask]
    entry_slot = entry_slot[mask]
    entry_rows = columns.rows[mask]

    segment = features * n_nodes + entry_slot
    order = np.argsort(segment, kind="stable")
    segment = segment[order]
    features = features[order]
    values = values[order]
    entry_slot = entry_slot[order]
    g = grad[entry_rows[order]]
    h = hess[entry_rows[order]]

    is_start = np.r_[True, segment[1:] != segment[:-1]]
    starts = np.flatnonzero(is_start)
    segment_index = np.cumsum(is_start) - 1
    before_g = np.cumsum(g) - g
    before_h = np.cumsum(h) - h
    left_g = before_g - before_g[starts][segment_index]
    left_h = before_h - before_h[starts][segment_index]
    present_g = np.add.reduceat(g, starts)[segment_index]
    present_h = np.add.reduceat(h, starts)[segment_index]
    total_g = node_g[entry_slot]
    total_h = node_h[entry_slot]
    missing_g = total_g - present_g
    missing_h = total_h - present_h

    lam = config.l2_reg
    min_hess = max(config.min_child_weight, MIN_CHILD_HESSIAN)
    parent = total_g * total_g / (total_h + lam)
    previous = np.r_[values[0], values[:-1]]
    candidate = is_start | (values != previous)

    def split_gain(gl, hl, gr, hr):
        gain = 0.5 * (gl * gl / (hl + lam) + gr * gr / (hr + lam) - parent)
        valid = candidate & (hl >= min_hess) & (hr >= min_hess)
        return np.where(valid, gain, -np.inf)

    gain_left = split_gain(
        left_g + missing_g,
        left_h + missing_h,
        present_g - left_g,
        present_h - left_h,
    )
    gain_right = split_gain(
        left_g,
        left_h,
        present_g - left_g + missing_g,
        present_h - left_h + missing_h,
    )
    default_left = gain_left >= gain_right
    gain = np.where(default_left, gain_left, gain_right)

    midpoint = (previous + values) / 2.0
    midpoint = np.where(midpoint > previous, midpoint, values)
    threshold = np.where(is_start, values, midpoint)

    node_best = np.full(n_nodes, -np.inf)
    np.maximum.at(node_best, entry_slot, gain)
    winners = np.flatnonzero((gain == node_best[entry_slot]) & (gain > MIN_SPLIT_GAIN))
    if not len(winners):
        return best
    _, first = np.unique(entry_slot[winners], return_index=True)
    for index in winners[first].tolist():
        best[int(entry_slot[index])] = (
            int(features[index]),
            float(threshold[index]),
            bool(default_left[index]),
            float(gain[index]),
        )
    return best


def _grow_tree(columns, grad, hess, config):
    """Return the tree (unscaled by line search) and the leaf of every row."""
    n_rows = len(grad)
    nodes = {"feature": [], "threshold": [], "default_left": [], "left": [], "right": [], "value": [], "gain": []}

    def add_node():
        for name, default in (
            ("feature", -1),
            ("threshold", 0.0),
            ("default_left", True),
            ("left", -1),
            ("right", -1),
            ("value", 0.0),
            ("gain", 0.0),
        ):
            nodes[name].append(default)
        return len(nodes["feature"]) - 1

    lam = config.l2_reg
    frontier = [add_node()]
    slot = np.zeros(n_rows, dtype=np.int64)
    leaf_of = np.zeros(n_rows, dtype=np.int64)
    for depth in range(config.max_depth + 1):
        if not frontier:
            break
        active = slot >= 0
        node_g = np.bincount(slot[active], weights=grad[active], minlength=len(frontier))
        node_h = np.bincount(slot[active], weights=hess[active], minlength=len(frontier))
        if depth < config.max_depth:
            splits = _find_splits(columns, slot, node_g, node_h, grad, hess, config)
        else:
            splits = [None] * len(frontier)

        next_frontier = []
        next_slot = np.full(n_rows, -1, dtype=np.int64)
        for local, node in enumerate(frontier):
            members = slot == local
            split = splits[local]
            if split is None:
                nodes["value"][node] = float(
                    -node_g[local] / (node_h[local] + lam) * config.learning_rate
                )
                leaf_of[members] = node
                continue
            feature_id, threshold, default_left, gain = split
            left = add_node()
            right = add_node()
            nodes["feature"][node] = feature_id
            nodes["threshold"][node] = threshold
            nodes["default_left"][node] = default_left
            nodes["left"][node] = left
            nodes["right"][node] = right
            nodes["gain"][node] = gain

            goes_left = np.zeros(n_rows, dtype=bool)
            goes_left[members] = default_left
            column_rows, column_values = columns.column(feature_id)
            in_node = slot[column_rows] == local
            goes_left[column_rows[in_node]] = column_values[in_node] < threshold
            next_slot[members & goes_left] = len(next_frontier)
            next_frontier.append(left)
            next_slot[members & ~goes_left] = len(next_frontier)
            next_frontier.append(right)
        frontier = next_frontier
        slot = next_slot

    tree = RegressionTree(
        tuple(nodes["feature"]),
        tuple(nodes["threshold"]),
        tuple(nodes["default_left"]),
        tuple(nodes["left"]),
        tuple(nodes["right"]),
        tuple(nodes["value"]),
        tuple(nodes["gain"]),
    )
    return tree, leaf_of


def _scaled(tree, step):
    if step == 1.0:
        return tree
    return RegressionTree(
        tree.feature,
        tree.threshold,
        tree.default_left,
        tree.left,
        tree.right,
        tuple(value * step for value in tree.value),
        tree.gain,
    )


def _order_rows(rows):
    return sorted(rows, key=lambda row: (str(row.key), str(row.test_id)))


def _shared_fingerprint(rows):
    fingerprints = {row.vocab_fingerprint for row in rows}
    if len(fingerprints) > 1:
        raise DataError("rows were built with different vocabularies")
    return next(iter(fingerprints)) if fingerprints else None


def fit(rows, config=None, seed=None):
    """Train a boosted ensemble on labeled rows.

    Every round keeps the weighted training loss non-increasing: a tree that
    would raise it is shrunk by halving and dropped when that does not help.
    """
    config = config or LearnerConfig()
    if seed is not None and seed != config.seed:
        config = LearnerConfig.from_dict({**config.to_dict(), "seed": seed})
    rows = _order_rows(rows)
    if not rows:
        raise ModelError("degenerate labels: no training rows")
    if any(row.label is None for row in rows):
        raise DataError("training rows must be labeled")
    labels = np.asarray([row.label for row in rows], dtype=np.float64)
    if labels.min() == labels.max():
        raise ModelError("degenerate labels: training rows hold a single class")
    fingerprint = _shared_fingerprint(rows)
    columns = _SparseColumns(rows)

    weights = np.where(labels > 0, config.positive_class_weight, 1.0)
    positive = float(np.sum(weights * labels))
    negative = float(np.sum(weights * (1.0 - labels)))
    base_logit = float(np.clip(math.log(positive / negative), -MAX_ABS_LOGIT, MAX_ABS_LOGIT))

    logits = np.full(len(rows), base_logit)
    loss = weighted_log_loss(logits, labels, weights)
    trees = []
    losses = []
    for round_index in range(config.n_trees):
        prob = sigmoid(logits)
        grad = weights * (prob - labels)
        hess = weights * prob * (1.0 - prob)
        tree, leaf_of = _grow_tree(columns, grad, hess, config)

        step = 1.0
        accepted = None
        for _ in range(LINE_SEARCH_STEPS + 1):
            candidate = _scaled(tree, step)
            increment = np.asarray(candidate.value)[leaf_of]
            trial = np.clip(logits + increment, -MAX_ABS_LOGIT, MAX_ABS_LOGIT)
            trial_loss = weighted_log_loss(trial, labels, weights)
            if trial_loss <= loss:
                accepted = (candidate, trial, trial_loss)
                break
            step /= 2.0
        if accepted is None:
            accepted = (RegressionTree.constant(0.0), logits, loss)
        tree, logits, loss = accepted
        trees.append(tree)
        losses.append(loss)
        log_debug("Boosting round.", count=round_index + 1, total=config.n_trees, score=loss)

    model = Model(tuple(trees), base_logit, config, fingerprint, tuple(losses))
    log_info(
        "Model fitted.",
        rows=len(rows),
        positives=int(labels.sum()),
        count=len(trees),
        score=losses[-1] if losses else loss,
    )
    return model


def _check_fingerprint(model, rows):
    for row in rows:
        if row.vocab_fingerprint != model.vocab_fingerprint:
            raise ModelError(
                f"vocabulary fingerprint mismatch for row {row.key}/{row.test_id}"
            )


def predict_logits(model, rows):
    rows = list(rows)
    _check_fingerprint(model, rows)
    logits = np.full(len(rows), float(model.base_logit))
    if not rows or not model.trees:
        return logits
    used, column, node_columns = model.layout
    matrix = np.zeros((len(rows), max(len(used), 1)))
    for index, row in enumerate(rows):
        for feature_id, value in row.sparse_features.items():
            position = column.get(feature_id)
            if position is not None:
                matrix[index, position] = value
    every_row = np.arange(len(rows))
    for tree, columns in zip(model.trees, node_columns):
        feature, threshold, default_left, left, right, value = tree.arrays
        node = np.zeros(len(rows), dtype=np.int64)
        while True:
            internal = left[node] >= 0
            if not internal.any():
                break
            rows_here = every_row[internal]
            at = node[rows_here]
            present = matrix[rows_here, columns[at]]
            goes_left = np.where(present != 0.0, present < threshold[at], default_left[at])
            node[rows_here] = np.where(goes_left, left[at], right[at])
        logits = np.clip(logits + value[node], -MAX_ABS_LOGIT, MAX_ABS_LOGIT)
    return logits


def predict_many(model, rows):
    return sigmoid(predict_logits(model, rows))


def predict(model, row):
    return float(predict_many(model, [row])[0])


def _f1_at(scores, labels):
    from .evaluation import confusion_metrics

    return confusion_metrics(scores, labels, DEFAULT_THRESHOLD)["f1"]


def tune(train_rows, val_rows, grid, seed=0):
    """Fit every grid point; keep the best validation F1.

    Ties go to fewer trees, then to the lower depth.
    """
    grid = list(grid)
    if not grid:
        raise ModelError("empty tuning grid")
    val_rows = _order_rows(val_rows)
    val_labels = [row.label for row in val_rows]
    best = None
    for index, config in enumerate(grid):
        model = fit(train_rows, config, seed)
        f1 = _f1_at(predict_many(model, val_rows), val_labels)
        log_info("Grid point scored.", config=config.label(), f1=f1)
        rank = (-f1, config.n_trees, config.max_depth, index)
        if best is None or rank < best[0]:
            best = (rank, config, model)
    _, config, model = best
    log_info("Tuning finished.", config=config.label(), f1=-best[0][0])
    return config, model


def default_grid(base_rate=None, preset=DEFAULT_GRID_PRESET, base=None):
    if preset not in GRID_PRESETS:
        raise DataError(f"unknown grid preset {preset!r}")
    values = GRID_PRESETS[preset]
    base = dict(base or {})
    configs = []
    seen = set()
    for combo in itertools.product(*(values[key] for key in GRID_KEYS)):
        params = dict(base)
        params.update(zip(GRID_KEYS, combo))
        if params["positive_class_weight"] == "base_rate":
            params["positive_class_weight"] = 1.0 / base_rate if base_rate else 1.0
        config = LearnerConfig.from_dict(params)
        if config in seen:
            continue
        seen.add(config)
        configs.append(config)
    return configs


def feature_importance(model):
    totals = {}
    for tree in model.trees:
        for feature_id, gain in tree.splits():
            totals[feature_id] = totals.get(feature_id, 0.0) + gain
    return dict(sorted(totals.items()))


def group_importance(model, vocab):
    groups = {}
    for feature_id, gain in feature_importance(model).items():
        entry = groups.setdefault(vocab.group_of(feature_id), {"total": 0.0, "features": 0})
        entry["total"] += gain
        entry["features"] += 1
    for entry in groups.values():
        entry["mean"] = entry["total"] / entry["features"]
    return dict(sorted(groups.items()))


def model_to_json(model, vocab):
    if vocab.fingerprint != model.vocab_fingerprint:
        raise ModelError("model was not trained with this vocabulary")
    payload = {
        "format_version": MODEL_FORMAT_VERSION,
        "model": model.to_dict(),
        "vocabulary": vocab.to_dict(),
    }
    return json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n"


def save_model(model, vocab, path, tracker=None):
    text = model_to_json(model, vocab)
    if tracker is not None:
        return tracker.write_text(path, text)
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        handle.write(text)
    return str(path)


def model_from_json(text):
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelError(f"unreadable model file: {exc}") from exc
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise ModelError("unreadable model file: missing format_version")
    if payload["format_version"] != MODEL_FORMAT_VERSION:
        raise ModelError(
            f"incompatible model format {payload['format_version']!r}, "
            f"expected {MODEL_FORMAT_VERSION}"
        )
    try:
        model = Model.from_dict(payload["model"])
        vocab = FeatureVocabulary.from_dict(payload["vocabulary"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelError(f"unreadable model file: {exc}") from exc
    if vocab.fingerprint != model.vocab_fingerprint:
        raise ModelError("model and embedded vocabulary fingerprints differ")
    if model.max_feature_id() >= vocab.size:
        raise ModelError("model splits on a feature outside its vocabulary")
    return model, vocab


def load_model(path):
    try:
        with open(path, "r", encoding="utf-8") as handle:
            text = handle.read()
    except OSError as exc:
        raise ModelError(f"unreadable model file {path}: {exc}") from exc
    return model_from_json(text)
