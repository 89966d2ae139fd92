"""Total treatment-assignment policies built from fitted trees, plus baselines."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import DataValidationError, Dataset, SchemaMismatchError, require_arms
from .trees import DecisionTree, leaf_scores, swap_leaf_function, tree_from_dict, tree_to_dict

POLICY_FORMAT_VERSION = 1
KINDS = ("outcome", "causal-effect", "assignment", "best-on-average", "constant")


def argmax_lowest(scores: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest arm index."""
    return np.argmax(scores, axis=-1)


@dataclass(frozen=True, eq=False)
class Policy:
    kind: str
    arm_count: int
    schema_hash: str
    trees: tuple[DecisionTree, ...] = ()
    arm: int | None = None
    provenance: dict = field(default_factory=dict)

    def scores(self, X) -> np.ndarray:
        """``(M, K)`` candidate scores whose row-wise argmax is the assignment."""
        X = np.asarray(X)
        if self.kind in ("constant", "best-on-average"):
            s = np.zeros((X.shape[0], self.arm_count))
            s[:, self.arm] = 1.0
            return s
        if self.kind == "outcome":
            return leaf_scores(self.trees[0], X, "outcome")
        if self.kind == "assignment":
            return leaf_scores(self.trees[0], X, "assignment")
        # causal-effect: control competes with a fixed score of zero
        s = np.zeros((X.shape[0], self.arm_count))
        for tree in self.trees:
            s[:, tree.effect_arm] = leaf_scores(tree, X, "effect")[:, tree.effect_arm]
        return s

    def assign(self, X) -> np.ndarray:
        X = np.asarray(X)
        if self.kind in ("constant", "best-on-average"):
            return np.full(X.shape[0], self.arm, dtype=np.int64)
        return argmax_lowest(self.scores(X))

    def apply(self, x) -> int:
        return int(self.assign(np.asarray(x)[None, :])[0])

    def check_compatible(self, d: Dataset) -> None:
        if self.schema_hash != d.schema_hash:
            raise SchemaMismatchError(
                f"policy was trained for schema {self.schema_hash}, dataset has {d.schema_hash}"
            )


def _require_task(tree: DecisionTree, task: str) -> None:
    if tree.task != task:
        raise DataValidationError(f"expected a tree with task {task!r}, got {tree.task!r}")


def op_policy(tree: DecisionTree, provenance: dict | None = None) -> Policy:
    _require_task(tree, "outcome")
    return Policy("outcome", tree.arm_count, tree.schema_hash, (tree,), provenance=provenance or {})


def cp_policy(trees, provenance: dict | None = None) -> Policy:
    """One effect tree per non-control arm; control wins unless some effect is positive."""
    trees = tuple(sorted(trees, key=lambda t: t.effect_arm if t.effect_arm is not None else -1))
    if not trees:
        raise DataValidationError("cp_policy needs one effect tree per non-control arm")
    K = trees[0].arm_count
    for t in trees:
        _require_task(t, "effect")
        if t.effect_arm is None:
            raise DataValidationError("effect trees for cp_policy must be causal trees with an effect arm")
    have = [t.effect_arm for t in trees]
    missing = sorted(set(range(1, K)) - set(have))
    if missing or len(have) != K - 1:
        raise DataValidationError(f"missing causal tree for arm(s) {missing}" if missing else "duplicate arm models")
    if len({t.schema_hash for t in trees}) != 1:
        raise SchemaMismatchError("causal trees were trained on different schemas")
    return Policy("causal-effect", K, trees[0].schema_hash, trees, provenance=provenance or {})


def tp_policy(tree: DecisionTree, provenance: dict | None = None) -> Policy:
    _require_task(tree, "assignment")
    return Policy("assignment", tree.arm_count, tree.schema_hash, (tree,), provenance=provenance or {})


def constant_policy(arm: int, arm_count: int, schema_hash: str, provenance: dict | None = None) -> Policy:
    if not 0 <= arm < arm_count:
        raise DataValidationError(f"arm {arm} outside [0, {arm_count})")
    return Policy("constant", arm_count, schema_hash, arm=int(arm), provenance=provenance or {})


def best_on_average(d: Dataset) -> Policy:
    """Constant policy at the arm with the highest sample mean outcome."""
    K = d.arm_count
    require_arms(d, range(K))
    n = np.bincount(d.treatment, minlength=K)
    means = np.bincount(d.treatment, weights=d.outcome, minlength=K) / n
    arm = int(argmax_lowest(means))
    return Policy("best-on-average", K, d.schema_hash, arm=arm, provenance={"arm_means": means.tolist()})


def assignment_vector(policy: Policy, d: Dataset) -> np.ndarray:
    return policy.assign(d.features)


def write_assignments(arms: np.ndarray, path: str | Path) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "arm"])
        w.writerows(enumerate(np.asarray(arms).tolist()))
    return Path(path)


# -- model adaptation for off-task metrics --------------------------------------


def outcome_scores(policy: Policy, X) -> np.ndarray:
    """Predicted outcome per arm, adapting non-outcome models by their leaf statistics.

    For a causal-effect policy, arm ``j``'s outcome comes from the tree fitted
    for arm ``j``; control comes from the arm-1 tree.
    """
    if policy.kind in ("outcome", "assignment"):
        return leaf_scores(swap_leaf_function(policy.trees[0], "outcome"), X)
    if policy.kind == "causal-effect":
        out = None
        for tree in policy.trees:
            mu = leaf_scores(swap_leaf_function(tree, "outcome"), X)
            if out is None:
                out = mu.copy()
            out[:, tree.effect_arm] = mu[:, tree.effect_arm]
        return out
    raise DataValidationError(f"a {policy.kind} policy has no leaf statistics to predict outcomes")


def effect_scores(policy: Policy, X) -> np.ndarray:
    """Predicted effect against control per arm (column 0 is zero)."""
    if policy.kind in ("outcome", "assignment"):
        return leaf_scores(swap_leaf_function(policy.trees[0], "effect"), X)
    if policy.kind == "causal-effect":
        return policy.scores(X)
    raise DataValidationError(f"a {policy.kind} policy has no leaf statistics to predict effects")


# -- serialization ------------------------------------------------------------


def policy_to_dict(policy: Policy) -> dict:
    return {
        "format_version": POLICY_FORMAT_VERSION,
        "kind": policy.kind,
        "arm_count": policy.arm_count,
        "schema_hash": policy.schema_hash,
        "arm": policy.arm,
        "provenance": policy.provenance,
        "trees": [tree_to_dict(t) for t in policy.trees],
    }


def policy_from_dict(d: dict) -> Policy:
    if d.get("format_version") != POLICY_FORMAT_VERSION:
        raise DataValidationError(f"unsupported policy format version {d.get('format_version')}")
    if d["kind"] not in KINDS:
        raise DataValidationError(f"unknown policy kind {d['kind']!r}")
    trees = tuple(tree_from_dict(t) for t in d["trees"])
    for t in trees:
        if t.schema_hash != d["schema_hash"]:
            raise SchemaMismatchError("embedded tree schema differs from the policy schema")
    return Policy(d["kind"], int(d["arm_count"]), d["schema_hash"], trees, d["arm"], d.get("provenance", {}))


def save_policy(policy: Policy, path: str | Path) -> Path:
    Path(path).write_text(json.dumps(policy_to_dict(policy), indent=1, sort_keys=True) + "\n")
    return Path(path)


def load_policy(path: str | Path) -> Policy:
    return policy_from_dict(json.loads(Path(path).read_text()))
