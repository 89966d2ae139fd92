"""Offline policy evaluation, loss metrics, nested cross-validation and experiments."""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import DataValidationError, Dataset, derive_seed, make_folds, require_arms, stratified_subsample
from .policies import (
    Policy,
    argmax_lowest,
    best_on_average,
    cp_policy,
    effect_scores,
    op_policy,
    outcome_scores,
    tp_policy,
)
from .synthgen import SyntheticTruth, true_policy_value, true_regret
from .trees import (
    SW,
    SY,
    SYY,
    Cells,
    DecisionTree,
    Hyperparams,
    N,
    aggregate,
    check_nonnegative_outcomes,
    fit_from_cells,
    prune,
    route,
    transform_outcome,
)

APPROACHES = ("op", "cp", "tp")
BASELINE = "best-on-average"
METRICS = (
    "ips_value",
    "lift_vs_control",
    "mse_outcome",
    "mse_effect_proxy",
    "wmr",
    "entropy_bits",
    "true_value",
    "regret",
    "mse_effect_true",
)
Z95 = 1.96


# -- estimators and losses ------------------------------------------------------


def _arms(policy: Policy | np.ndarray, d: Dataset) -> np.ndarray:
    if isinstance(policy, Policy):
        return policy.assign(d.features)
    arms = np.asarray(policy, dtype=np.int64)
    if arms.shape != (d.n_rows,):
        raise DataValidationError("assignments do not align with dataset rows")
    return arms


def ips_value(policy, d: Dataset) -> float:
    """``(1/N) sum 1(pi(x_i) = t_i) y_i / P(t_i)``."""
    matched = _arms(policy, d) == d.treatment
    return float(np.where(matched, d.outcome / d.propensity, 0.0).sum() / d.n_rows)


def lift_vs_control(policy, d: Dataset) -> float:
    """Relative IPS gain over assigning control to everyone."""
    require_arms(d, (0,))
    control = ips_value(np.zeros(d.n_rows, dtype=np.int64), d)
    if control == 0:
        raise DataValidationError("undefined lift: control policy value is zero")
    return ips_value(policy, d) / control - 1.0


def wmr(policy, d: Dataset) -> float:
    """Weighted misclassification rate with weights ``y / P(t)``."""
    missed = _arms(policy, d) != d.treatment
    return float(np.where(missed, d.outcome / d.propensity, 0.0).sum() / d.n_rows)


def total_weight(d: Dataset) -> float:
    return float((d.outcome / d.propensity).sum() / d.n_rows)


def mse_outcome(policy: Policy, d: Dataset) -> float:
    mu = outcome_scores(policy, d.features)
    return float(np.mean((d.outcome - mu[np.arange(d.n_rows), d.treatment]) ** 2))


def mse_effect_proxy(policy: Policy, d: Dataset) -> float:
    """Mean over non-control arms of the squared error against the transformed outcome."""
    tau = effect_scores(policy, d.features)
    per_arm = []
    for j in range(1, d.arm_count):
        tr = transform_outcome(d, j)
        per_arm.append(np.mean((tr.target - tau[tr.rows, j]) ** 2))
    return float(np.mean(per_arm))


def mse_effect_true(policy: Policy, d: Dataset, truth: SyntheticTruth) -> float:
    """Squared error of predicted effects against the exact CATEs (synthetic data only)."""
    tau = effect_scores(policy, d.features)[:, 1:]
    return float(np.mean((truth.true_cate - tau) ** 2))


def entropy_bits(arms: np.ndarray, arm_count: int) -> float:
    counts = np.bincount(np.asarray(arms), minlength=arm_count).astype(float)
    p = counts[counts > 0] / counts.sum()
    h = float(-(p * np.log2(p)).sum())
    return max(0.0, h)  # never -0.0


def assignment_entropy(policy, d: Dataset) -> float:
    """Base-2 entropy of the empirical distribution of assigned arms."""
    return entropy_bits(_arms(policy, d), d.arm_count)


def assignment_shares(arms: np.ndarray, arm_count: int) -> np.ndarray:
    return np.bincount(np.asarray(arms), minlength=arm_count) / max(len(arms), 1)


def ci95(values: Sequence[float]) -> tuple[float, float]:
    """Mean and half-width ``1.96 * sd / sqrt(n)`` (sample sd); half-width is NaN for n < 2."""
    v = np.asarray([x for x in values if x is not None], dtype=float)
    if v.size == 0:
        return math.nan, math.nan
    if v.size < 2:
        return float(v.mean()), math.nan
    return float(v.mean()), float(Z95 * v.std(ddof=1) / math.sqrt(v.size))


# -- reports ------------------------------------------------------------------


@dataclass
class FoldResult:
    fold: int
    n_train: int
    n_test: int
    metrics: dict[str, float | None]
    shares: list[float]
    hyperparams: dict = field(default_factory=dict)


@dataclass
class EvalReport:
    """Per-fold metrics for one approach, with fold means and 95% intervals."""

    approach: str
    per_fold: list[FoldResult]
    config: dict = field(default_factory=dict)
    schema_hash: str = ""

    def values(self, metric: str) -> list[float]:
        return [f.metrics.get(metric) for f in self.per_fold if f.metrics.get(metric) is not None]

    def mean(self, metric: str) -> float | None:
        v = self.values(metric)
        return float(np.mean(v)) if v else None

    @property
    def ci95(self) -> dict[str, tuple[float, float]]:
        return {m: ci95(self.values(m)) for m in METRICS if self.values(m)}

    @property
    def ips_value(self) -> float:
        return self.mean("ips_value")

    @property
    def lift_vs_control(self) -> float:
        return self.mean("lift_vs_control")

    @property
    def mse_outcome(self):
        return self.mean("mse_outcome")

    @property
    def mse_effect_proxy(self):
        return self.mean("mse_effect_proxy")

    @property
    def wmr(self) -> float:
        return self.mean("wmr")

    @property
    def entropy_bits(self) -> float:
        return self.mean("entropy_bits")

    @property
    def regret(self):
        return self.mean("regret")

    def pooled_shares(self) -> list[float]:
        """Out-of-sample assignment shares pooled over all test folds."""
        tot = sum(np.asarray(f.shares) * f.n_test for f in self.per_fold)
        return (tot / sum(f.n_test for f in self.per_fold)).tolist()

    def to_dict(self) -> dict:
        def clean(x):
            if isinstance(x, float) and not math.isfinite(x):
                return None
            return x

        return {
            "approach": self.approach,
            "schema_hash": self.schema_hash,
            "config": self.config,
            "summary": {m: clean(self.mean(m)) for m in METRICS},
            "ci95": {m: {"mean": clean(a), "half_width": clean(b)} for m, (a, b) in self.ci95.items()},
            "assignment_shares": self.pooled_shares(),
            "per_fold": [
                {
                    "fold": f.fold,
                    "n_train": f.n_train,
                    "n_test": f.n_test,
                    "metrics": {k: clean(v) for k, v in f.metrics.items()},
                    "shares": f.shares,
                    "hyperparams": f.hyperparams,
                }
                for f in self.per_fold
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def per_fold_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["approach", "fold", "n_train", "n_test", *METRICS])
        for f in self.per_fold:
            w.writerow([self.approach, f.fold, f.n_train, f.n_test, *(_fmt(f.metrics.get(m)) for m in METRICS)])
        return buf.getvalue()


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def evaluate_policy(
    policy: Policy, d: Dataset, truth: SyntheticTruth | None = None, fold: int = 0, n_train: int = 0
) -> FoldResult:
    """All metrics of a fixed policy on one dataset."""
    arms = policy.assign(d.features)
    m: dict[str, float | None] = {
        "ips_value": ips_value(arms, d),
        "lift_vs_control": lift_vs_control(arms, d),
        "wmr": wmr(arms, d),
        "entropy_bits": entropy_bits(arms, d.arm_count),
    }
    has_models = bool(policy.trees)
    m["mse_outcome"] = mse_outcome(policy, d) if has_models else None
    m["mse_effect_proxy"] = mse_effect_proxy(policy, d) if has_models else None
    if truth is not None:
        m["true_value"] = true_policy_value(arms, d, truth)
        m["regret"] = true_regret(arms, d, truth)
        m["mse_effect_true"] = mse_effect_true(policy, d, truth) if has_models else None
    return FoldResult(fold, n_train, d.n_rows, m, assignment_shares(arms, d.arm_count).tolist())


# -- nested cross-validation --------------------------------------------------


@dataclass(frozen=True)
class CVConfig:
    outer_folds: int = 10
    inner_folds: int = 3
    max_depth: tuple[int, ...] = (1, 2, 3, 4, 6, 8)
    min_samples_leaf: tuple[int, ...] = (100, 1000)
    min_loss_reduction: tuple[float, ...] = (0.0,)
    seed: int = 0

    def __post_init__(self):
        if self.outer_folds < 2 or self.inner_folds < 2:
            raise DataValidationError("outer_folds and inner_folds must be >= 2")
        for name in ("max_depth", "min_samples_leaf", "min_loss_reduction"):
            vals = tuple(getattr(self, name))
            if not vals:
                raise DataValidationError(f"hyperparameter grid {name} is empty")
            object.__setattr__(self, name, vals)

    def grid(self) -> list[Hyperparams]:
        """Grid points in canonical order; earlier points win ties in selection."""
        return [
            Hyperparams(d, s, r)
            for s, d, r in itertools.product(self.min_samples_leaf, self.max_depth, self.min_loss_reduction)
        ]

    def to_dict(self) -> dict:
        return {
            "outer_folds": self.outer_folds,
            "inner_folds": self.inner_folds,
            "max_depth": list(self.max_depth),
            "min_samples_leaf": list(self.min_samples_leaf),
            "min_loss_reduction": list(self.min_loss_reduction),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CVConfig":
        d = dict(d)
        for k in ("max_depth", "min_samples_leaf", "min_loss_reduction"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def _criterion(approach: str) -> str:
    return {"op": "outcome", "cp": "effect", "tp": "assignment"}[approach]


def _cell_loss(tree: DecisionTree, val: Cells) -> tuple[float, float]:
    """(summed loss, row count) of a tree's own loss on aggregated validation cells."""
    st = val.stats
    leaf = tree.stats[route(tree, val.codes)]
    if tree.criterion == "outcome":
        # outcome cells carry a single arm each: the treatment column of the codes
        t = val.codes[:, -1]
        rows = np.arange(t.size)
        n_leaf, s_leaf = leaf[rows, N, t], leaf[rows, SY, t]
        with np.errstate(invalid="ignore", divide="ignore"):
            mu = np.where(n_leaf > 0, s_leaf / np.where(n_leaf > 0, n_leaf, 1), tree.fallback[t])
        n, s, ss = st[rows, N, t], st[rows, SY, t], st[rows, SYY, t]
        return float((ss - 2 * mu * s + mu * mu * n).sum()), float(n.sum())
    if tree.criterion == "effect":
        j, p = tree.effect_arm, tree.p_star
        cnt_leaf = leaf[:, N, 0] + leaf[:, N, j]
        z_leaf = leaf[:, SY, j] / p - leaf[:, SY, 0] / (1 - p)
        fb = tree.fallback[j] - tree.fallback[0]
        with np.errstate(invalid="ignore", divide="ignore"):
            tau = np.where(cnt_leaf > 0, z_leaf / np.where(cnt_leaf > 0, cnt_leaf, 1), fb)
        n = st[:, N, 0] + st[:, N, j]
        s = st[:, SY, j] / p - st[:, SY, 0] / (1 - p)
        ss = st[:, SYY, j] / p**2 + st[:, SYY, 0] / (1 - p) ** 2
        return float((ss - 2 * tau * s + tau * tau * n).sum()), float(n.sum())
    assigned = argmax_lowest(leaf[:, SW, :])
    w = st[:, SW, :]
    missed = w.sum(-1) - w[np.arange(w.shape[0]), assigned]
    return float(missed.sum()), float(st[:, N, :].sum())


@dataclass
class _Selection:
    hp: Hyperparams
    losses: list[float]


def _select(cells: Cells, fold_stats: np.ndarray, d: Dataset, criterion: str, effect_arm, cfg: CVConfig) -> _Selection:
    """Inner-CV grid search; trees for each ``min_samples_leaf`` are grown once and pruned."""
    G = fold_stats.shape[0]
    grid = cfg.grid()
    totals = np.zeros(len(grid))
    deepest = max(cfg.max_depth)
    loosest = min(cfg.min_loss_reduction)
    for i in range(G):
        train = cells.with_stats(fold_stats[np.arange(G) != i].sum(axis=0))
        val = cells.with_stats(fold_stats[i])
        if effect_arm is not None:
            val = val.restrict_arms((0, effect_arm))
        grown = {
            msl: fit_from_cells(train, d.schema, d.propensity_table, Hyperparams(deepest, msl, loosest), criterion, effect_arm)
            for msl in cfg.min_samples_leaf
        }
        for g, hp in enumerate(grid):
            tree = prune(grown[hp.min_samples_leaf], hp.max_depth, hp.min_loss_reduction)
            loss, n = _cell_loss(tree, val)
            totals[g] += loss / n if n > 0 else 0.0
    means = totals / G
    best = int(np.argmin(means))
    return _Selection(grid[best], means.tolist())


def fit_approach(train: Dataset, approach: str, cfg: CVConfig, fold_seed: int) -> tuple[Policy, dict]:
    """Tune by inner CV on ``train`` and refit the approach on all of it."""
    if approach == BASELINE:
        pol = best_on_average(train)
        return pol, {"arm": pol.arm}
    if approach not in APPROACHES:
        raise DataValidationError(f"unknown approach {approach!r}")
    if approach == "tp":
        check_nonnegative_outcomes(train)
    inner = make_folds(train, cfg.inner_folds, fold_seed)
    criterion = _criterion(approach)
    cells, fold_stats = aggregate(train, approach == "op", inner.assignment, cfg.inner_folds)
    provenance = {"training_data_hash": train.content_hash(), "seed": fold_seed, "approach": approach}
    if approach == "cp":
        trees, chosen = [], {}
        for j in range(1, train.arm_count):
            require_arms(train, (0, j))
            sel = _select(cells, fold_stats, train, criterion, j, cfg)
            trees.append(fit_from_cells(cells, train.schema, train.propensity_table, sel.hp, criterion, j))
            chosen[str(j)] = sel.hp.to_dict()
        return cp_policy(trees, {**provenance, "hyperparams": chosen}), chosen
    sel = _select(cells, fold_stats, train, criterion, None, cfg)
    tree = fit_from_cells(cells, train.schema, train.propensity_table, sel.hp, criterion)
    provenance["hyperparams"] = sel.hp.to_dict()
    pol = op_policy(tree, provenance) if approach == "op" else tp_policy(tree, provenance)
    return pol, sel.hp.to_dict()


def _fold_seed(seed: int, *keys: int) -> int:
    return int(derive_seed(seed, *keys).generate_state(1, np.uint64)[0])


def nested_cv(
    d: Dataset,
    approach: str,
    cfg: CVConfig = CVConfig(),
    truth: SyntheticTruth | None = None,
    train_size: int | None = None,
    threads: int = 1,
) -> EvalReport:
    """Outer folds evaluate, inner folds tune; the outer plan depends only on ``cfg.seed``.

    ``train_size`` subsamples each outer training split (arm-stratified) to at
    most that many rows, for learning curves.
    """
    if truth is not None and truth.potential_outcomes.shape != (d.n_rows, d.arm_count):
        raise DataValidationError("truth does not align with the dataset")
    if train_size is not None and train_size > d.n_rows:
        raise DataValidationError(f"train size {train_size} exceeds the {d.n_rows} available rows")
    plan = make_folds(d, cfg.outer_folds, cfg.seed)

    def run(k: int) -> FoldResult:
        train_rows, test_rows = plan.train_rows(k), plan.test_rows(k)
        if train_size is not None and train_size < train_rows.size:
            sub = stratified_subsample(d.take(train_rows), train_size, _fold_seed(cfg.seed, 2, k, train_size))
            train_rows = train_rows[sub]
        train, test = d.take(train_rows), d.take(test_rows)
        policy, hp = fit_approach(train, approach, cfg, _fold_seed(cfg.seed, 1, k))
        res = evaluate_policy(policy, test, truth.take(test_rows) if truth is not None else None, k, train.n_rows)
        res.hyperparams = hp
        return res

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            folds = list(pool.map(run, range(cfg.outer_folds)))
    else:
        folds = [run(k) for k in range(cfg.outer_folds)]
    config = {**cfg.to_dict(), "train_size": train_size}
    return EvalReport(approach, folds, config, d.schema_hash)


# -- experiments --------------------------------------------------------------


def geometric_sizes(n_max: int, count: int = 5, n_min: int | None = None) -> list[int]:
    """``count`` geometrically spaced training sizes ending at ``n_max``."""
    n_min = n_min or max(n_max // 100, 1)
    if count < 2:
        return [n_max]
    return sorted({int(round(x)) for x in np.geomspace(n_min, n_max, count)})


@dataclass
class CurvePoint:
    approach: str
    size: int
    report: EvalReport


def learning_curve(
    d: Dataset,
    approaches: Iterable[str],
    sizes: Sequence[int],
    cfg: CVConfig = CVConfig(),
    truth: SyntheticTruth | None = None,
    threads: int = 1,
) -> list[CurvePoint]:
    """Nested CV per approach and training size, plus the best-on-average baseline."""
    approaches = list(approaches)
    if BASELINE not in approaches:
        approaches.append(BASELINE)
    for s in sizes:
        if s > d.n_rows:
            raise DataValidationError(f"train size {s} exceeds the {d.n_rows} available rows")
    return [
        CurvePoint(a, int(s), nested_cv(d, a, cfg, truth, train_size=int(s), threads=threads))
        for s in sizes
        for a in approaches
    ]


def curve_long_csv(points: Sequence[CurvePoint]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["approach", "size", "fold", "metric", "value"])
    for p in points:
        for f in p.report.per_fold:
            for m in METRICS:
                v = f.metrics.get(m)
                if v is not None:
                    w.writerow([p.approach, p.size, f.fold, m, repr(float(v))])
    return buf.getvalue()


TABLE_COLUMNS = ("mse_outcome", "mse_effect_proxy", "lift_vs_control")


@dataclass
class CrossTaskTable:
    """Approaches (rows) scored on outcome MSE, effect-proxy MSE and lift (columns)."""

    reports: dict[str, EvalReport]

    def cell(self, approach: str, metric: str) -> float | None:
        return self.reports[approach].mean(metric)

    @property
    def flags(self) -> dict[str, bool]:
        if not set(APPROACHES) <= set(self.reports):
            return {}

        def strict_best(metric, winner, sign):
            w = sign * self.cell(winner, metric)
            return all(w < sign * self.cell(a, metric) for a in APPROACHES if a != winner)

        out = {
            "op_best_mse_outcome": strict_best("mse_outcome", "op", 1),
            "cp_best_mse_effect_proxy": strict_best("mse_effect_proxy", "cp", 1),
            "tp_best_lift": strict_best("lift_vs_control", "tp", -1),
        }
        if all(self.cell(a, "regret") is not None for a in APPROACHES):
            out["tp_lowest_regret"] = strict_best("regret", "tp", 1)
        return out

    @property
    def diagonal_dominance(self) -> bool | None:
        f = self.flags
        if not f:
            return None
        return f["op_best_mse_outcome"] and f["cp_best_mse_effect_proxy"] and (
            f["tp_lowest_regret"] if "tp_lowest_regret" in f else f["tp_best_lift"]
        )

    def to_dict(self) -> dict:
        cols = list(TABLE_COLUMNS)
        if all(r.mean("regret") is not None for r in self.reports.values()):
            cols.append("regret")
        return {
            "columns": cols,
            "rows": {a: {c: self.cell(a, c) for c in cols} for a in self.reports},
            "flags": self.flags,
            "diagonal_dominance": self.diagonal_dominance,
        }

    def to_markdown(self) -> str:
        d = self.to_dict()
        cols = d["columns"]
        lines = ["| approach | " + " | ".join(cols) + " |", "|---" * (len(cols) + 1) + "|"]
        for a, row in d["rows"].items():
            lines.append(f"| {a} | " + " | ".join(f"{row[c]:.6g}" for c in cols) + " |")
        for k, v in d["flags"].items():
            lines.append(f"\n{k}: {v}")
        return "\n".join(lines) + "\n"


def cross_task_table(
    d: Dataset,
    cfg: CVConfig = CVConfig(),
    approaches: Sequence[str] = APPROACHES,
    truth: SyntheticTruth | None = None,
    threads: int = 1,
) -> CrossTaskTable:
    """Each approach's own nested-CV report; off-task metrics use leaf-function adaptation."""
    return CrossTaskTable({a: nested_cv(d, a, cfg, truth, threads=threads) for a in approaches})
