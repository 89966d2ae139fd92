"""Greedy binary decision trees over categorical features.

One inducer, three split losses:

* ``outcome``: squared error of ``y`` around the node mean, with the treatment
  appended as an extra categorical feature (outcome regression).
* ``effect``: squared error of the transformed outcome on the rows of arms
  ``{0, j}`` (causal tree for arm ``j``).
* ``assignment``: weighted misclassification cost with weights ``y / P(t)``.

Training rows are first aggregated into cells (distinct feature vectors, plus
the treatment for outcome trees) holding per-arm sufficient statistics
``n, sum y, sum y^2, sum y/P(t)``. Every split score and every leaf prediction
is a function of these sums, which is what lets a fitted tree swap its leaf
prediction function without refitting.

Splits are one-vs-rest: ``x[feature] == category`` goes left. Ties between
candidate splits go to the lowest ``(feature, category)``; ties between arms
go to the lowest arm index.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import DataValidationError, Dataset, Schema, require_arms, schema_hash

TREE_FORMAT_VERSION = 1
TASKS = ("outcome", "effect", "assignment")
N, SY, SYY, SW = range(4)
_GAIN_RTOL = 1e-9


@dataclass(frozen=True)
class Hyperparams:
    max_depth: int = 4
    min_samples_leaf: int = 1
    min_loss_reduction: float = 0.0

    def __post_init__(self):
        if int(self.max_depth) < 0:
            raise DataValidationError("max_depth must be >= 0")
        if int(self.min_samples_leaf) < 1:
            raise DataValidationError("min_samples_leaf must be >= 1")
        if not (self.min_loss_reduction >= 0):
            raise DataValidationError("min_loss_reduction must be >= 0")

    def to_dict(self) -> dict:
        return {
            "max_depth": int(self.max_depth),
            "min_samples_leaf": int(self.min_samples_leaf),
            "min_loss_reduction": float(self.min_loss_reduction),
        }


@dataclass(frozen=True)
class LeafStats:
    n: np.ndarray
    sum_y: np.ndarray
    sum_y2: np.ndarray
    sum_w: np.ndarray
    transformed_sum: float | None = None
    transformed_count: float | None = None

    @property
    def rows(self) -> int:
        return int(self.n.sum())


# -- split losses -------------------------------------------------------------
#
# Each takes stats of shape (..., 4, K) and returns (loss, scale) of shape (...).
# ``scale`` bounds the rounding error of ``loss`` and sets the gain tolerance.


def _sse(count, s, ss):
    with np.errstate(invalid="ignore", divide="ignore"):
        loss = np.where(count > 0, ss - s * s / np.where(count > 0, count, 1.0), 0.0)
    return np.maximum(loss, 0.0), ss


def _outcome_loss(st, params):
    return _sse(st[..., N, :].sum(-1), st[..., SY, :].sum(-1), st[..., SYY, :].sum(-1))


def _transformed_sums(st, arm, p_star):
    count = st[..., N, 0] + st[..., N, arm]
    s = st[..., SY, arm] / p_star - st[..., SY, 0] / (1.0 - p_star)
    ss = st[..., SYY, arm] / p_star**2 + st[..., SYY, 0] / (1.0 - p_star) ** 2
    return count, s, ss


def _effect_loss(st, params):
    return _sse(*_transformed_sums(st, params["arm"], params["p_star"]))


def _assignment_loss(st, params):
    w = st[..., SW, :]
    total = w.sum(-1)
    return total - w.max(-1), total


_LOSSES = {"outcome": _outcome_loss, "effect": _effect_loss, "assignment": _assignment_loss}


@dataclass(frozen=True, eq=False)
class DecisionTree:
    """Fitted tree stored as flat node arrays in depth-first preorder.

    ``feature[i] < 0`` marks a leaf. Every node keeps its full statistics
    ``stats[i]`` (shape ``(4, K)``: n, sum y, sum y^2, sum y/P per arm), so
    interior nodes can become leaves when the tree is pruned.
    """

    task: str
    criterion: str
    schema: Schema
    propensity_table: tuple[float, ...]
    feature: np.ndarray
    category: np.ndarray
    left: np.ndarray
    right: np.ndarray
    depth: np.ndarray
    gain: np.ndarray
    stats: np.ndarray
    fallback: np.ndarray
    treatment_feature: bool = False
    effect_arm: int | None = None
    hyperparams: Hyperparams = field(default_factory=Hyperparams)

    @property
    def arm_count(self) -> int:
        return self.schema.arm_count

    @property
    def n_nodes(self) -> int:
        return self.feature.size

    @property
    def n_leaves(self) -> int:
        return int((self.feature < 0).sum())

    @property
    def max_depth(self) -> int:
        return int(self.depth.max())

    @property
    def schema_hash(self) -> str:
        return schema_hash(self.schema, self.propensity_table)

    @property
    def p_star(self) -> float | None:
        """Renormalized propensity of the effect arm within ``{0, arm}``."""
        if self.effect_arm is None:
            return None
        p = self.propensity_table
        return p[self.effect_arm] / (p[self.effect_arm] + p[0])

    def leaf_stats(self, node: int) -> LeafStats:
        st = self.stats[node]
        ts = tc = None
        if self.effect_arm is not None:
            tc, ts, _ = _transformed_sums(st, self.effect_arm, self.p_star)
            ts, tc = float(ts), float(tc)
        return LeafStats(st[N].copy(), st[SY].copy(), st[SYY].copy(), st[SW].copy(), ts, tc)

    def node_loss(self, node: int | None = None) -> np.ndarray | float:
        params = {"arm": self.effect_arm, "p_star": self.p_star}
        st = self.stats if node is None else self.stats[node]
        return _LOSSES[self.criterion](st, params)[0]

    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.feature < 0)


# -- cell aggregation ---------------------------------------------------------


@dataclass(frozen=True)
class Cells:
    """Training rows aggregated by feature vector (and treatment, for outcome trees).

    ``stats[c]`` holds per-arm ``n, sum y, sum y^2, sum y/P`` of cell ``c``.
    """

    codes: np.ndarray  # (C, F)
    cards: tuple[int, ...]
    stats: np.ndarray  # (C, 4, K)
    with_treatment: bool

    def restrict_arms(self, arms) -> "Cells":
        keep = np.zeros(self.stats.shape[-1], dtype=bool)
        keep[list(arms)] = True
        return replace(self, stats=np.where(keep, self.stats, 0.0))

    def with_stats(self, stats: np.ndarray) -> "Cells":
        return replace(self, stats=stats)

    def arm_means(self) -> np.ndarray:
        tot = self.stats.sum(axis=0)
        n, s = tot[N], tot[SY]
        overall = s.sum() / n.sum() if n.sum() > 0 else 0.0
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(n > 0, s / np.where(n > 0, n, 1), overall)


def aggregate(d: Dataset, with_treatment: bool, groups: np.ndarray | None = None, n_groups: int = 1):
    """Aggregate rows into cells.

    Without ``groups`` returns one :class:`Cells`. With a per-row group index
    (e.g. a fold assignment) returns ``(cells, stats)`` where ``stats`` has
    shape ``(n_groups, C, 4, K)`` over the same cell list, and
    ``cells.stats`` is their sum.
    """
    K = d.arm_count
    cards = d.schema.feature_cardinalities
    keys = d.cell_keys()
    if with_treatment:
        keys = keys * K + d.treatment
        cards = cards + (K,)
    uniq, inv = np.unique(keys, return_inverse=True)
    C = uniq.size
    G = 1 if groups is None else int(n_groups)
    y = d.outcome
    base = inv * (4 * K) + d.treatment
    if groups is not None:
        base = base + np.asarray(groups, dtype=np.int64) * (C * 4 * K)
    stats = np.zeros(G * C * 4 * K)
    for s, w in ((N, None), (SY, y), (SYY, y * y), (SW, y / d.propensity)):
        stats += np.bincount(base + s * K, weights=w, minlength=G * C * 4 * K)
    stats = stats.reshape(G, C, 4, K)
    codes = np.stack(np.unravel_index(uniq, cards), axis=1).astype(np.int64)
    cells = Cells(codes, cards, stats.sum(axis=0) if G > 1 else stats[0], with_treatment)
    return cells if groups is None else (cells, stats)


# -- induction ----------------------------------------------------------------


def _best_split(cells: Cells, idx, total, loss_fn, params, min_leaf):
    """Highest-gain valid split of the cells ``idx``; ``None`` when no candidate is valid.

    Gains within rounding error of the maximum count as ties and go to the
    lowest (feature, category), so mirrored splits of binary features and
    summation-order noise cannot change the chosen split.
    """
    parent_loss, scale = loss_fn(total, params)
    K = total.shape[-1]
    flat = cells.stats[idx].reshape(idx.size, 4 * K)
    offs = np.arange(4 * K)
    candidates = []
    for f, card in enumerate(cells.cards):
        if card < 2:
            continue
        key = cells.codes[idx, f][:, None] * (4 * K) + offs
        left = np.bincount(key.ravel(), weights=flat.ravel(), minlength=card * 4 * K).reshape(card, 4, K)
        right = total - left
        nl = left[:, N, :].sum(-1)
        nr = right[:, N, :].sum(-1)
        gains = parent_loss - loss_fn(left, params)[0] - loss_fn(right, params)[0]
        gains = np.where((nl >= min_leaf) & (nr >= min_leaf), gains, -np.inf)
        candidates.append((f, gains, left))
    top = max((g.max() for _, g, _ in candidates), default=-np.inf)
    if not np.isfinite(top):
        return None, float(scale)
    tol = _GAIN_RTOL * float(scale)
    for f, gains, left in candidates:
        hits = np.flatnonzero(gains >= top - tol)
        if hits.size:
            v = int(hits[0])
            return (float(gains[v]), f, v, left[v], total - left[v]), float(scale)


def _grow(cells: Cells, loss_fn, params, hp: Hyperparams):
    K = cells.stats.shape[-1]
    nodes: list[list] = []  # feature, category, left, right, depth, gain, stats

    def visit(idx, total, depth):
        node = len(nodes)
        nodes.append([-1, -1, -1, -1, depth, 0.0, total])
        if depth >= hp.max_depth or idx.size < 2:
            return node
        best, scale = _best_split(cells, idx, total, loss_fn, params, hp.min_samples_leaf)
        if best is None:
            return node
        gain, f, v, lstats, rstats = best
        if not (gain > hp.min_loss_reduction and gain > _GAIN_RTOL * scale):
            return node
        go_left = cells.codes[idx, f] == v
        nodes[node][:2] = f, v
        nodes[node][5] = gain
        nodes[node][2] = visit(idx[go_left], lstats, depth + 1)
        nodes[node][3] = visit(idx[~go_left], rstats, depth + 1)
        return node

    root_idx = np.arange(cells.codes.shape[0])
    visit(root_idx, cells.stats.sum(axis=0) if root_idx.size else np.zeros((4, K)), 0)
    cols = list(zip(*nodes))
    ints = [np.asarray(c, dtype=np.int64) for c in cols[:5]]
    return (*ints, np.asarray(cols[5], dtype=float), np.stack(cols[6]))


def fit_from_cells(
    cells: Cells,
    schema: Schema,
    propensity_table,
    hp: Hyperparams,
    criterion: str,
    effect_arm: int | None = None,
) -> DecisionTree:
    """Grow a tree from pre-aggregated cells (the building block of all ``fit_*``)."""
    params = {}
    if effect_arm is not None:
        p = propensity_table
        params = {"arm": effect_arm, "p_star": p[effect_arm] / (p[effect_arm] + p[0])}
        cells = cells.restrict_arms((0, effect_arm))
    feature, category, left, right, depth, gain, stats = _grow(cells, _LOSSES[criterion], params, hp)
    return DecisionTree(
        task=criterion,
        criterion=criterion,
        schema=schema,
        propensity_table=tuple(propensity_table),
        feature=feature,
        category=category,
        left=left,
        right=right,
        depth=depth,
        gain=gain,
        stats=stats,
        fallback=cells.arm_means(),
        treatment_feature=cells.with_treatment,
        effect_arm=effect_arm,
        hyperparams=hp,
    )


@dataclass(frozen=True)
class TransformedOutcome:
    """Rows of arms ``{0, arm}`` with their transformed-outcome regression target."""

    arm: int
    p_star: float
    rows: np.ndarray
    features: np.ndarray
    target: np.ndarray


def transform_outcome(d: Dataset, arm: int) -> TransformedOutcome:
    """``y / p*`` for rows of ``arm``, ``-y / (1 - p*)`` for control rows.

    ``p* = P(arm) / (P(arm) + P(0))`` is the assignment probability within the
    two-arm restriction; the target's conditional mean is the CATE of ``arm``.
    """
    if not 1 <= arm < d.arm_count:
        raise DataValidationError(f"effect arm must be in [1, {d.arm_count})")
    require_arms(d, (0, arm))
    p = d.propensity_table
    p_star = p[arm] / (p[arm] + p[0])
    rows = np.flatnonzero((d.treatment == 0) | (d.treatment == arm))
    treated = (d.treatment[rows] == arm).astype(float)
    y = d.outcome[rows]
    target = y * (treated - p_star) / (p_star * (1.0 - p_star))
    return TransformedOutcome(arm, p_star, rows, d.features[rows], target)


def fit_outcome_tree(d: Dataset, hp: Hyperparams = Hyperparams(), cells=None) -> DecisionTree:
    """Regression tree for ``y`` on the features plus the treatment as a categorical feature."""
    if cells is None:
        cells = aggregate(d, with_treatment=True)
    return fit_from_cells(cells, d.schema, d.propensity_table, hp, "outcome")


def fit_causal_tree(d: Dataset, arm: int, hp: Hyperparams = Hyperparams(), cells=None) -> DecisionTree:
    """Regression tree on the transformed outcome of ``arm`` against control."""
    if not 1 <= arm < d.arm_count:
        raise DataValidationError(f"effect arm must be in [1, {d.arm_count})")
    require_arms(d, (0, arm))
    if cells is None:
        cells = aggregate(d, with_treatment=False)
    return fit_from_cells(cells, d.schema, d.propensity_table, hp, "effect", effect_arm=arm)


def check_nonnegative_outcomes(d: Dataset) -> None:
    neg = np.flatnonzero(d.outcome < 0)
    if neg.size:
        raise DataValidationError(
            f"assignment weights require non-negative outcomes (row {int(neg[0])} has y={d.outcome[neg[0]]})"
        )


def fit_assignment_tree(d: Dataset, hp: Hyperparams = Hyperparams(), cells=None) -> DecisionTree:
    """Weighted classification tree: class ``t``, weight ``y / P(t)``."""
    check_nonnegative_outcomes(d)
    if cells is None:
        cells = aggregate(d, with_treatment=False)
    return fit_from_cells(cells, d.schema, d.propensity_table, hp, "assignment")


def prune(tree: DecisionTree, max_depth: int, min_loss_reduction: float = 0.0) -> DecisionTree:
    """Cut a tree back to what fitting with tighter stopping rules would have produced.

    Greedy split choices do not depend on ``max_depth`` or
    ``min_loss_reduction``, so a tree grown with loose limits contains every
    tighter-limit tree as a prefix.
    """
    keep_split = (tree.feature >= 0) & (tree.depth < max_depth) & (tree.gain > min_loss_reduction)
    order, stack = [], [0]
    while stack:
        i = stack.pop()
        order.append(i)
        if keep_split[i]:
            stack.extend((tree.right[i], tree.left[i]))
    old = np.asarray(order, dtype=np.int64)
    new_id = np.full(tree.n_nodes, -1, dtype=np.int64)
    new_id[old] = np.arange(old.size)
    split = keep_split[old]
    return replace(
        tree,
        feature=np.where(split, tree.feature[old], -1),
        category=np.where(split, tree.category[old], -1),
        left=np.where(split, new_id[tree.left[old]], -1),
        right=np.where(split, new_id[tree.right[old]], -1),
        depth=tree.depth[old],
        gain=np.where(split, tree.gain[old], 0.0),
        stats=tree.stats[old],
        hyperparams=replace(tree.hyperparams, max_depth=max_depth, min_loss_reduction=min_loss_reduction),
    )


# -- prediction ---------------------------------------------------------------


def _check_features(tree: DecisionTree, X) -> np.ndarray:
    X = np.asarray(X)
    m = tree.schema.n_features
    if X.ndim != 2 or X.shape[1] != m:
        raise DataValidationError(f"schema mismatch: expected feature vectors of length {m}")
    if not np.issubdtype(X.dtype, np.integer):
        if not np.all(np.equal(np.mod(X, 1), 0)):
            raise DataValidationError("schema mismatch: feature codes must be integers")
        X = X.astype(np.int64)
    cards = np.asarray(tree.schema.feature_cardinalities)
    if X.size and np.any((X < 0) | (X >= cards)):
        raise DataValidationError("schema mismatch: feature code outside its cardinality")
    return X


def route(tree: DecisionTree, codes: np.ndarray) -> np.ndarray:
    """Leaf index for each row of ``codes`` (features, plus treatment for outcome trees)."""
    node = np.zeros(codes.shape[0], dtype=np.int64)
    rows = np.arange(codes.shape[0])
    for _ in range(tree.max_depth):
        f = tree.feature[node]
        internal = f >= 0
        if not internal.any():
            break
        go_left = codes[rows, np.maximum(f, 0)] == tree.category[node]
        node = np.where(internal, np.where(go_left, tree.left[node], tree.right[node]), node)
    return node


def _unique_rows(X: np.ndarray, cards) -> tuple[np.ndarray, np.ndarray]:
    keys = np.ravel_multi_index(tuple(X.T), cards)
    uniq, inv = np.unique(keys, return_inverse=True)
    return np.stack(np.unravel_index(uniq, cards), axis=1), inv


def arm_stats(tree: DecisionTree, X) -> np.ndarray:
    """``(M, 4, K)`` statistics of arm ``j`` taken from the leaf that ``(x, j)`` reaches."""
    X = _check_features(tree, X)
    K = tree.arm_count
    U, inv = _unique_rows(X, tree.schema.feature_cardinalities)
    out = np.empty((U.shape[0], 4, K))
    if tree.treatment_feature:
        for j in range(K):
            leaf = route(tree, np.column_stack([U, np.full(U.shape[0], j)]))
            out[:, :, j] = tree.stats[leaf][:, :, j]
    else:
        out[:] = tree.stats[route(tree, U)]
    return out[inv]


def _outcome_scores(tree: DecisionTree, st: np.ndarray) -> np.ndarray:
    n, s = st[:, N, :], st[:, SY, :]
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(n > 0, s / np.where(n > 0, n, 1.0), tree.fallback)


def _effect_scores(tree: DecisionTree, st: np.ndarray) -> np.ndarray:
    mu = _outcome_scores(tree, st)
    tau = mu - mu[:, :1]
    j = tree.effect_arm
    if j is not None:
        count, s, _ = _transformed_sums(st, j, tree.p_star)
        with np.errstate(invalid="ignore", divide="ignore"):
            tau[:, j] = np.where(count > 0, s / np.where(count > 0, count, 1.0), tau[:, j])
    return tau


def leaf_scores(tree: DecisionTree, X, task: str | None = None) -> np.ndarray:
    """Per-arm scores ``(M, K)`` under a leaf prediction function.

    * ``outcome``: per-arm leaf mean ``sum y_j / n_j`` (global arm mean when ``n_j = 0``).
    * ``effect``: column ``j`` estimates the effect of arm ``j`` against control
      (column 0 is zero). Trees fitted on arm ``j``'s transformed outcome use
      the leaf mean of that target; otherwise the difference of outcome scores.
    * ``assignment``: per-arm weight sums ``sum y_j / P(j)``.
    """
    task = task or tree.task
    st = arm_stats(tree, X)
    if task == "outcome":
        return _outcome_scores(tree, st)
    if task == "effect":
        return _effect_scores(tree, st)
    if task == "assignment":
        return st[:, SW, :].copy()
    raise DataValidationError(f"unknown task {task!r}")


def predict(tree: DecisionTree, X, arm: int | None = None):
    """Apply the tree's current leaf function.

    Returns predicted outcomes (``outcome``) or effects (``effect``) for
    ``arm``, or the argmax-weight arm (``assignment``). A single feature
    vector gives a scalar; a matrix gives an array. Without ``arm``, outcome
    and effect trees return the full per-arm score matrix.
    """
    X = np.asarray(X)
    single = X.ndim == 1
    scores = leaf_scores(tree, X[None, :] if single else X)
    if tree.task == "assignment":
        out = np.argmax(scores, axis=1)
    else:
        if arm is None and tree.task == "effect" and tree.effect_arm is not None:
            arm = tree.effect_arm
        if arm is not None and not 0 <= arm < tree.arm_count:
            raise DataValidationError(f"arm {arm} outside [0, {tree.arm_count})")
        out = scores if arm is None else scores[:, arm]
    return out[0] if single else out


def swap_leaf_function(tree: DecisionTree, new_task: str) -> DecisionTree:
    """Same structure and statistics, different leaf prediction function."""
    if new_task not in TASKS:
        raise DataValidationError(f"unknown task {new_task!r}; choose from {TASKS}")
    return replace(tree, task=new_task)


# -- serialization ------------------------------------------------------------


def tree_to_dict(tree: DecisionTree) -> dict:
    nodes = []
    for i in range(tree.n_nodes):
        ls = tree.leaf_stats(i)
        node = {
            "id": i,
            "depth": int(tree.depth[i]),
            "stats": {
                "n": ls.n.tolist(),
                "sum_y": ls.sum_y.tolist(),
                "sum_y2": ls.sum_y2.tolist(),
                "sum_w": ls.sum_w.tolist(),
            },
        }
        if ls.transformed_sum is not None:
            node["stats"]["transformed_sum"] = ls.transformed_sum
            node["stats"]["transformed_count"] = ls.transformed_count
        if tree.feature[i] >= 0:
            node["split"] = {
                "feature": int(tree.feature[i]),
                "category": int(tree.category[i]),
                "left": int(tree.left[i]),
                "right": int(tree.right[i]),
                "gain": float(tree.gain[i]),
            }
        nodes.append(node)
    return {
        "format_version": TREE_FORMAT_VERSION,
        "task": tree.task,
        "criterion": tree.criterion,
        "schema": tree.schema.to_dict(),
        "propensity_table": list(tree.propensity_table),
        "schema_hash": tree.schema_hash,
        "treatment_feature": tree.treatment_feature,
        "effect_arm": tree.effect_arm,
        "hyperparams": tree.hyperparams.to_dict(),
        "fallback": tree.fallback.tolist(),
        "nodes": nodes,
    }


def tree_from_dict(d: dict) -> DecisionTree:
    if d.get("format_version") != TREE_FORMAT_VERSION:
        raise DataValidationError(f"unsupported tree format version {d.get('format_version')}")
    schema = Schema.from_dict(d["schema"])
    table = tuple(d["propensity_table"])
    if schema_hash(schema, table) != d["schema_hash"]:
        raise DataValidationError("tree schema hash does not match its schema")
    nodes = d["nodes"]
    split = [n.get("split") for n in nodes]
    stats = np.array(
        [[n["stats"]["n"], n["stats"]["sum_y"], n["stats"]["sum_y2"], n["stats"]["sum_w"]] for n in nodes],
        dtype=float,
    )
    return DecisionTree(
        task=d["task"],
        criterion=d["criterion"],
        schema=schema,
        propensity_table=table,
        feature=np.array([s["feature"] if s else -1 for s in split], dtype=np.int64),
        category=np.array([s["category"] if s else -1 for s in split], dtype=np.int64),
        left=np.array([s["left"] if s else -1 for s in split], dtype=np.int64),
        right=np.array([s["right"] if s else -1 for s in split], dtype=np.int64),
        depth=np.array([n["depth"] for n in nodes], dtype=np.int64),
        gain=np.array([s["gain"] if s else 0.0 for s in split], dtype=float),
        stats=stats,
        fallback=np.asarray(d["fallback"], dtype=float),
        treatment_feature=bool(d["treatment_feature"]),
        effect_arm=d["effect_arm"],
        hyperparams=Hyperparams(**d["hyperparams"]),
    )


def save_tree(tree: DecisionTree, path: str | Path) -> Path:
    Path(path).write_text(json.dumps(tree_to_dict(tree), indent=1) + "\n")
    return Path(path)


def load_tree(path: str | Path) -> DecisionTree:
    return tree_from_dict(json.loads(Path(path).read_text()))
