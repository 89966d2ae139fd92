"""Data model for randomized-experiment logs: schema, dataset, folds, balance checks."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

PROPENSITY_SUM_TOL = 1e-9


class PolicyLabError(Exception):
    """Base class for errors raised by this package."""


class DataValidationError(PolicyLabError, ValueError):
    """Input data violates a dataset invariant or an operation precondition."""


class SchemaMismatchError(DataValidationError):
    """Two artifacts were produced for different schemas."""


def derive_seed(seed: int, *keys: int) -> np.random.SeedSequence:
    """Independent, reproducible random stream for ``(seed, *keys)``."""
    return np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=tuple(int(k) for k in keys))


def rng_for(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *keys))


@dataclass(frozen=True)
class Schema:
    feature_cardinalities: tuple[int, ...]
    arm_count: int

    def __post_init__(self):
        object.__setattr__(self, "feature_cardinalities", tuple(int(c) for c in self.feature_cardinalities))
        if int(self.arm_count) < 2:
            raise DataValidationError(f"arm_count must be >= 2, got {self.arm_count}")
        object.__setattr__(self, "arm_count", int(self.arm_count))
        if len(self.feature_cardinalities) == 0:
            raise DataValidationError("schema needs at least one feature")
        if any(c < 1 for c in self.feature_cardinalities):
            raise DataValidationError("every feature cardinality must be >= 1")

    @property
    def n_features(self) -> int:
        return len(self.feature_cardinalities)

    def to_dict(self) -> dict:
        return {"feature_cardinalities": list(self.feature_cardinalities), "arm_count": self.arm_count}

    @classmethod
    def from_dict(cls, d: dict) -> "Schema":
        return cls(tuple(d["feature_cardinalities"]), d["arm_count"])


def schema_hash(schema: Schema, propensity_table: Sequence[float]) -> str:
    """Stable identifier binding artifacts to a feature space, arm set and design."""
    payload = json.dumps(
        {"schema": schema.to_dict(), "propensities": [float(p).hex() for p in propensity_table]},
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class Dataset:
    """Columnar log of ``(x, t, y, p)`` rows from a randomized experiment.

    Construction does not validate; call :func:`validate_dataset` (loaders do).
    Arrays are made read-only so instances can be shared freely.
    """

    schema: Schema
    features: np.ndarray
    treatment: np.ndarray
    outcome: np.ndarray
    propensity: np.ndarray
    propensity_table: tuple[float, ...]
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        feats = np.ascontiguousarray(self.features, dtype=np.int64)
        if feats.ndim != 2 or feats.shape[1] != self.schema.n_features:
            raise DataValidationError(
                f"features must be an (N, {self.schema.n_features}) matrix, got shape {feats.shape}"
            )
        n = feats.shape[0]
        cols = {
            "treatment": np.ascontiguousarray(self.treatment, dtype=np.int64),
            "outcome": np.ascontiguousarray(self.outcome, dtype=np.float64),
            "propensity": np.ascontiguousarray(self.propensity, dtype=np.float64),
        }
        for name, arr in cols.items():
            if arr.shape != (n,):
                raise DataValidationError(f"{name} must have shape ({n},), got {arr.shape}")
        for name, arr in [("features", feats), *cols.items()]:
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "propensity_table", tuple(float(p) for p in self.propensity_table))

    @classmethod
    def from_arrays(cls, schema, features, treatment, outcome, propensity_table, propensity=None) -> "Dataset":
        """Build a dataset; per-row propensities default to the design table."""
        table = np.asarray(propensity_table, dtype=np.float64)
        t = np.asarray(treatment, dtype=np.int64)
        if propensity is None:
            if table.shape != (schema.arm_count,):
                raise DataValidationError("propensity_table must have one entry per arm")
            if t.size and (t.min() < 0 or t.max() >= schema.arm_count):
                raise DataValidationError("treatment index outside [0, K)")
            propensity = table[t]
        return cls(schema, np.asarray(features).reshape(len(t), schema.n_features), t, outcome, propensity, tuple(table))

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def n_rows(self) -> int:
        return len(self)

    @property
    def arm_count(self) -> int:
        return self.schema.arm_count

    @property
    def schema_hash(self) -> str:
        return schema_hash(self.schema, self.propensity_table)

    def arm_counts(self) -> np.ndarray:
        return np.bincount(self.treatment, minlength=self.arm_count)

    def take(self, rows: np.ndarray) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(
            self.schema,
            self.features[rows],
            self.treatment[rows],
            self.outcome[rows],
            self.propensity[rows],
            self.propensity_table,
        )

    def with_outcome(self, outcome: np.ndarray) -> "Dataset":
        return Dataset(self.schema, self.features, self.treatment, outcome, self.propensity, self.propensity_table)

    def cell_keys(self) -> np.ndarray:
        """Mixed-radix integer code of each row's feature vector."""
        if "cell_keys" not in self._cache:
            self._cache["cell_keys"] = np.ravel_multi_index(
                tuple(self.features.T), self.schema.feature_cardinalities
            ).astype(np.int64)
        return self._cache["cell_keys"]

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.schema_hash.encode())
        for arr in (self.features, self.treatment, self.outcome, self.propensity):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]


@dataclass(frozen=True)
class Violation:
    row: int | None
    rule: str

    def __str__(self) -> str:
        return self.rule if self.row is None else f"row {self.row}: {self.rule}"


def validate_dataset(d: Dataset, max_per_rule: int = 20) -> list[Violation]:
    """Return every invariant violation; an empty list means the dataset is valid.

    At most ``max_per_rule`` row-level violations are reported per rule.
    """
    out: list[Violation] = []
    K = d.arm_count
    table = np.asarray(d.propensity_table, dtype=np.float64)
    if d.n_rows < 1:
        out.append(Violation(None, "dataset must have at least one row"))
    if table.shape != (K,):
        out.append(Violation(None, f"propensity table must have {K} entries"))
        table = None
    else:
        if np.any(~(table > 0)):
            out.append(Violation(None, "propensity table entries must be positive"))
        if not abs(float(table.sum()) - 1.0) <= PROPENSITY_SUM_TOL:
            out.append(Violation(None, "propensities must sum to 1"))

    def rows_failing(mask: np.ndarray, rule: str):
        for i in np.flatnonzero(mask)[:max_per_rule]:
            out.append(Violation(int(i), rule))

    cards = np.asarray(d.schema.feature_cardinalities)
    bad_code = np.any((d.features < 0) | (d.features >= cards), axis=1)
    rows_failing(bad_code, "feature code outside cardinality")
    bad_t = (d.treatment < 0) | (d.treatment >= K)
    rows_failing(bad_t, "treatment outside [0, K)")
    rows_failing(~np.isfinite(d.outcome), "outcome must be finite")
    rows_failing(d.outcome < 0, "outcome must be non-negative")
    rows_failing(~(d.propensity > 0), "propensity must be positive")
    rows_failing(d.propensity > 1, "propensity must not exceed 1")
    if table is not None:
        ok_t = ~bad_t
        mismatch = np.zeros(d.n_rows, dtype=bool)
        mismatch[ok_t] = d.propensity[ok_t] != table[d.treatment[ok_t]]
        mismatch &= d.propensity > 0
        rows_failing(mismatch, "propensity must equal the design propensity of its arm")
    return out


def require_valid(d: Dataset) -> Dataset:
    problems = validate_dataset(d)
    if problems:
        shown = "; ".join(str(v) for v in problems[:5])
        raise DataValidationError(f"invalid dataset ({len(problems)} violations): {shown}")
    return d


def require_arms(d: Dataset, arms: Sequence[int], minimum: int = 1) -> None:
    counts = d.arm_counts()
    for a in arms:
        if counts[a] < minimum:
            if minimum == 1:
                raise DataValidationError(f"arm {a} has no observations")
            raise DataValidationError(f"arm {a} has {counts[a]} rows, needs at least {minimum}")


@dataclass(frozen=True)
class BalanceReport:
    """L1 distance between each arm's category distribution and the pooled one.

    ``distances[f][a]`` is the distance for feature ``f`` and arm ``a``.
    """

    distances: np.ndarray
    threshold: float

    @property
    def flags(self) -> np.ndarray:
        return self.distances > self.threshold

    @property
    def balanced(self) -> bool:
        return not bool(self.flags.any())

    def rows(self) -> list[dict]:
        return [
            {"feature": f, "arm": a, "l1_distance": float(self.distances[f, a]), "flag": bool(self.flags[f, a])}
            for f in range(self.distances.shape[0])
            for a in range(self.distances.shape[1])
        ]


def balance_check(d: Dataset, threshold: float = 0.02) -> BalanceReport:
    K = d.arm_count
    counts = d.arm_counts()
    for a in range(K):
        if counts[a] == 0:
            raise DataValidationError(f"arm {a} has no observations")
    dist = np.zeros((d.schema.n_features, K))
    for f, card in enumerate(d.schema.feature_cardinalities):
        joint = np.bincount(d.treatment * card + d.features[:, f], minlength=K * card).reshape(K, card)
        pooled = joint.sum(axis=0) / d.n_rows
        per_arm = joint / counts[:, None]
        dist[f] = np.abs(per_arm - pooled).sum(axis=1)
    return BalanceReport(dist, float(threshold))


@dataclass(frozen=True, eq=False)
class FoldPlan:
    fold_count: int
    assignment: np.ndarray
    seed: int

    def __post_init__(self):
        a = np.ascontiguousarray(self.assignment, dtype=np.int64)
        a.setflags(write=False)
        object.__setattr__(self, "assignment", a)

    def test_rows(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == k)

    def train_rows(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.assignment != k)

    def splits(self):
        for k in range(self.fold_count):
            yield self.train_rows(k), self.test_rows(k)

    def to_dict(self) -> dict:
        return {"fold_count": self.fold_count, "seed": self.seed, "assignment": self.assignment.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "FoldPlan":
        return cls(int(d["fold_count"]), np.asarray(d["assignment"], dtype=np.int64), int(d["seed"]))


def make_folds(d: Dataset, fold_count: int, seed: int) -> FoldPlan:
    """Arm-stratified random partition into ``fold_count`` folds.

    Rows of each arm are shuffled and dealt round-robin, continuing the
    deal across arms, so per-(fold, arm) counts are within one of
    proportional and fold sizes are within one of each other.
    """
    if fold_count < 2:
        raise DataValidationError("fold_count must be >= 2")
    require_arms(d, range(d.arm_count), minimum=fold_count)
    rng = rng_for(seed, 0xF01D)
    order = []
    for a in range(d.arm_count):
        rows = np.flatnonzero(d.treatment == a)
        order.append(rows[rng.permutation(rows.size)])
    order = np.concatenate(order)
    assignment = np.empty(d.n_rows, dtype=np.int64)
    assignment[order] = np.arange(order.size) % fold_count
    return FoldPlan(int(fold_count), assignment, int(seed))


def stratified_subsample(d: Dataset, size: int, seed: int) -> np.ndarray:
    """Row indices of a seeded, arm-stratified subsample of ``size`` rows (sorted)."""
    N = d.n_rows
    if size > N:
        raise DataValidationError(f"requested {size} rows but only {N} are available")
    if size == N:
        return np.arange(N)
    counts = d.arm_counts()
    exact = counts * (size / N)
    take = np.floor(exact).astype(np.int64)
    # largest remainder, lowest arm first on ties
    short = size - int(take.sum())
    if short:
        order = np.lexsort((np.arange(len(counts)), -(exact - take)))
        take[order[:short]] += 1
    rng = rng_for(seed, 0x5AB5)
    picked = []
    for a, k in enumerate(take):
        rows = np.flatnonzero(d.treatment == a)
        picked.append(rows[rng.permutation(rows.size)[:k]])
    return np.sort(np.concatenate(picked))
