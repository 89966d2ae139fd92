"""Randomized-experiment simulator with known potential outcomes.

The data-generating process is an artifact choice, not something observed in
real logs. Each arm ``j`` has a linear score::

    eta_j(x) = base_scale * sum_f B_f[x_f]
             + effect_scale * sum_{f in mask} E_jf[x_f]
             + shared_effect_scale * sum_{f in shared mask} S_f[x_f]    (j >= 1)

with ``E_0 = 0`` and no shared term for control. ``S`` is one table common to
every treated arm: it moves treated arms together against control, while ``E``
decides which treated arm is best. The tables are drawn once from the seed,
centered per feature and scaled by ``1/sqrt(#features in their mask)``.
Conditional means are

* ``poisson``: ``mu_j(x) = baseline * exp(eta_j(x) + c_j)``, ``y ~ Poisson(mu)``
* ``truncated-gaussian``: ``y = max(0, baseline * (1 + eta_j(x) + c_j) + noise_scale * baseline * eps)``
  whose mean is computed in closed form.

``c_0 = 0``. When ``balance_arms`` is set, ``c_j`` is solved so every arm has
exactly the same population mean (zero average treatment effects).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import optimize, stats

from .core import DataValidationError, Dataset, Schema, rng_for

PAPER_SCHEMA = Schema((19, 6, 3, 4, 8), 4)
PAPER_PROPENSITIES = (0.8668, 0.0444, 0.0444, 0.0444)
NOISE_MODELS = ("poisson", "truncated-gaussian")
BLOCK_ROWS = 1 << 16
_MAX_GRID = 1 << 22
_SHARED_STREAM = 7


@dataclass(frozen=True)
class ScenarioConfig:
    schema: Schema = PAPER_SCHEMA
    propensity_table: tuple[float, ...] = PAPER_PROPENSITIES
    n_rows: int = 100_000
    base_scale: float = 1.0
    effect_scale: float = 0.2
    noise_model: str = "poisson"
    effect_feature_mask: tuple[int, ...] = (0, 1, 2, 3, 4)
    seed: int = 0
    baseline: float = 5.0
    noise_scale: float = 1.0
    balance_arms: bool = True
    shared_effect_scale: float = 0.0
    shared_effect_mask: tuple[int, ...] = ()

    def validate(self) -> "ScenarioConfig":
        def bad(name, why):
            raise DataValidationError(f"invalid scenario config: {name}: {why}")

        K = self.schema.arm_count
        table = np.asarray(self.propensity_table, dtype=float)
        if table.shape != (K,):
            bad("propensity_table", f"needs {K} entries")
        if np.any(~(table > 0)) or abs(table.sum() - 1) > 1e-9:
            bad("propensity_table", "entries must be positive and sum to 1")
        if self.n_rows < 1:
            bad("n_rows", "must be >= 1")
        if not (self.base_scale >= 0):
            bad("base_scale", "must be >= 0")
        if not (self.effect_scale >= 0):
            bad("effect_scale", "must be >= 0")
        if not (self.shared_effect_scale >= 0):
            bad("shared_effect_scale", "must be >= 0")
        if self.base_scale == 0 and self.effect_scale == 0 and self.shared_effect_scale == 0:
            bad("base_scale", "base_scale and effect_scale cannot both be zero")
        if self.noise_model not in NOISE_MODELS:
            bad("noise_model", f"must be one of {NOISE_MODELS}")
        m = self.schema.n_features
        if self.effect_scale > 0 and len(self.effect_feature_mask) == 0:
            bad("effect_feature_mask", "must be non-empty when effect_scale > 0")
        if any(not 0 <= f < m for f in self.effect_feature_mask) or len(set(self.effect_feature_mask)) != len(
            self.effect_feature_mask
        ):
            bad("effect_feature_mask", f"must list distinct feature indices in [0, {m})")
        if self.shared_effect_scale > 0 and len(self.shared_effect_mask) == 0:
            bad("shared_effect_mask", "must be non-empty when shared_effect_scale > 0")
        if any(not 0 <= f < m for f in self.shared_effect_mask) or len(set(self.shared_effect_mask)) != len(
            self.shared_effect_mask
        ):
            bad("shared_effect_mask", f"must list distinct feature indices in [0, {m})")
        if not (self.baseline > 0):
            bad("baseline", "must be > 0")
        if not (self.noise_scale > 0):
            bad("noise_scale", "must be > 0")
        return self

    def replace(self, **changes) -> "ScenarioConfig":
        d = {**self.__dict__, **changes}
        return ScenarioConfig(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema"] = self.schema.to_dict()
        d["propensity_table"] = list(self.propensity_table)
        d["effect_feature_mask"] = list(self.effect_feature_mask)
        d["shared_effect_mask"] = list(self.shared_effect_mask)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise DataValidationError(f"invalid scenario config: unknown fields {sorted(unknown)}")
        if "schema" in d:
            d["schema"] = Schema.from_dict(d["schema"])
        for key in ("propensity_table", "effect_feature_mask", "shared_effect_mask"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def save(self, path: str | Path) -> Path:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return Path(path)

    @classmethod
    def load(cls, path: str | Path) -> "ScenarioConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True, eq=False)
class SyntheticTruth:
    """Per-row conditional means ``E[Y^j | x_i]``; CATEs and optimal arms derive from it."""

    potential_outcomes: np.ndarray
    _derived: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        mu = np.ascontiguousarray(self.potential_outcomes, dtype=np.float64)
        mu.setflags(write=False)
        object.__setattr__(self, "potential_outcomes", mu)

    @property
    def n_rows(self) -> int:
        return self.potential_outcomes.shape[0]

    @property
    def true_cate(self) -> np.ndarray:
        """``(N, K-1)`` effects against control; column ``j - 1`` holds arm ``j``."""
        mu = self.potential_outcomes
        return mu[:, 1:] - mu[:, :1]

    @property
    def optimal_arm(self) -> np.ndarray:
        if "opt" not in self._derived:
            self._derived["opt"] = np.argmax(self.potential_outcomes, axis=1)
        return self._derived["opt"]

    def take(self, rows: np.ndarray) -> "SyntheticTruth":
        return SyntheticTruth(self.potential_outcomes[rows])


def _shared_table(cfg: ScenarioConfig) -> list[np.ndarray]:
    """Effect common to every treated arm; a separate stream keeps the other tables fixed."""
    rng = rng_for(cfg.seed, 0, _SHARED_STREAM)
    mask = set(cfg.shared_effect_mask)
    n_sh = max(len(mask), 1)
    out = []
    for f, c in enumerate(cfg.schema.feature_cardinalities):
        e = rng.standard_normal(c)
        out.append((e - e.mean()) / np.sqrt(n_sh) if f in mask else np.zeros(c))
    return out


def _random_tables(cfg: ScenarioConfig) -> tuple[list[np.ndarray], list[list[np.ndarray]]]:
    rng = rng_for(cfg.seed, 0)
    cards = cfg.schema.feature_cardinalities
    m, K = len(cards), cfg.schema.arm_count
    base = []
    for c in cards:
        b = rng.standard_normal(c)
        base.append((b - b.mean()) / np.sqrt(m))
    mask = set(cfg.effect_feature_mask)
    n_eff = max(len(mask), 1)
    effects = [[np.zeros(c) for c in cards]]
    for _ in range(1, K):
        arm = []
        for f, c in enumerate(cards):
            e = rng.standard_normal(c)
            arm.append(cfg.effect_scale * (e - e.mean()) / np.sqrt(n_eff) if f in mask else np.zeros(c))
        effects.append(arm)
    if cfg.shared_effect_scale > 0:
        shared = _shared_table(cfg)
        for j in range(1, K):
            effects[j] = [e + cfg.shared_effect_scale * s for e, s in zip(effects[j], shared)]
    return base, effects


def _linear_scores(cfg: ScenarioConfig, features: np.ndarray, base, effects) -> np.ndarray:
    """``eta[i, j]`` for each row and arm, before the per-arm shift."""
    N, K = features.shape[0], cfg.schema.arm_count
    level = np.zeros(N)
    for f, table in enumerate(base):
        level += table[features[:, f]]
    eta = np.empty((N, K))
    for j in range(K):
        eff = np.zeros(N)
        for f, table in enumerate(effects[j]):
            if table.any():
                eff += table[features[:, f]]
        eta[:, j] = cfg.base_scale * level + eff
    return eta


def _mean_outcome(cfg: ScenarioConfig, eta: np.ndarray) -> np.ndarray:
    if cfg.noise_model == "poisson":
        return cfg.baseline * np.exp(eta)
    loc = cfg.baseline * (1.0 + eta)
    sd = cfg.baseline * cfg.noise_scale
    z = loc / sd
    return loc * stats.norm.cdf(z) + sd * stats.norm.pdf(z)


def _all_feature_vectors(schema: Schema) -> np.ndarray:
    size = int(np.prod(schema.feature_cardinalities))
    if size > _MAX_GRID:
        raise DataValidationError("feature space too large to balance arms by enumeration")
    return np.stack(np.unravel_index(np.arange(size), schema.feature_cardinalities), axis=1)


def _arm_shifts(cfg: ScenarioConfig, base, effects) -> np.ndarray:
    K = cfg.schema.arm_count
    shift = np.zeros(K)
    if not cfg.balance_arms or (cfg.effect_scale == 0 and cfg.shared_effect_scale == 0):
        return shift
    # features are uniform and independent, so the population mean is the grid mean
    grid = _all_feature_vectors(cfg.schema)
    eta = _linear_scores(cfg, grid, base, effects)
    target = _mean_outcome(cfg, eta[:, 0]).mean()
    for j in range(1, K):
        if cfg.noise_model == "poisson":
            shift[j] = np.log(target / _mean_outcome(cfg, eta[:, j]).mean())
        else:
            gap = lambda c, j=j: _mean_outcome(cfg, eta[:, j] + c).mean() - target
            lo, hi = -1.0, 1.0
            while gap(lo) > 0:
                lo *= 2
            while gap(hi) < 0:
                hi *= 2
            shift[j] = optimize.brentq(gap, lo, hi, xtol=1e-14, rtol=1e-15)
    return shift


def conditional_means(cfg: ScenarioConfig, features: np.ndarray) -> np.ndarray:
    """``E[Y^j | x]`` for arbitrary feature vectors under ``cfg``."""
    base, effects = _random_tables(cfg)
    shift = _arm_shifts(cfg, base, effects)
    return _mean_outcome(cfg, _linear_scores(cfg, np.asarray(features), base, effects) + shift)


def generate(cfg: ScenarioConfig) -> tuple[Dataset, SyntheticTruth]:
    """Sample a randomized-experiment log and its exact potential-outcome means.

    Rows are produced in fixed-size blocks, each with a random stream derived
    from ``(seed, block index)``, so the output does not depend on how blocks
    are scheduled.
    """
    cfg.validate()
    schema, K = cfg.schema, cfg.schema.arm_count
    base, effects = _random_tables(cfg)
    shift = _arm_shifts(cfg, base, effects)
    table = np.asarray(cfg.propensity_table, dtype=float)
    N = cfg.n_rows
    feats = np.empty((N, schema.n_features), dtype=np.int64)
    t = np.empty(N, dtype=np.int64)
    y = np.empty(N)
    mu = np.empty((N, K))
    for b, start in enumerate(range(0, N, BLOCK_ROWS)):
        stop = min(start + BLOCK_ROWS, N)
        n = stop - start
        rng = rng_for(cfg.seed, 1, b)
        x = np.stack([rng.integers(0, c, size=n) for c in schema.feature_cardinalities], axis=1)
        arm = rng.choice(K, size=n, p=table)
        eta = _linear_scores(cfg, x, base, effects) + shift
        means = _mean_outcome(cfg, eta)
        if cfg.noise_model == "poisson":
            obs = rng.poisson(means[np.arange(n), arm]).astype(np.float64)
        else:
            loc = cfg.baseline * (1.0 + eta[np.arange(n), arm])
            obs = np.maximum(loc + cfg.baseline * cfg.noise_scale * rng.standard_normal(n), 0.0)
        feats[start:stop], t[start:stop], y[start:stop], mu[start:stop] = x, arm, obs, means
    d = Dataset.from_arrays(schema, feats, t, y, cfg.propensity_table)
    return d, SyntheticTruth(mu)


def _assigned_arms(policy, d: Dataset) -> np.ndarray:
    if isinstance(policy, np.ndarray):
        arms = policy
    elif hasattr(policy, "assign"):
        arms = policy.assign(d.features)
    else:
        arms = np.asarray(policy)
    arms = np.asarray(arms, dtype=np.int64)
    if arms.shape != (d.n_rows,):
        raise DataValidationError("policy assignments do not align with dataset rows")
    return arms


def _check_aligned(d: Dataset, truth: SyntheticTruth) -> None:
    if truth.potential_outcomes.shape != (d.n_rows, d.arm_count):
        raise DataValidationError(
            f"truth has shape {truth.potential_outcomes.shape}, dataset needs ({d.n_rows}, {d.arm_count})"
        )


def true_policy_value(policy, d: Dataset, truth: SyntheticTruth) -> float:
    """Mean potential outcome of the policy's arm over the dataset rows.

    ``policy`` is a Policy-like object with ``assign`` or a per-row arm array.
    """
    _check_aligned(d, truth)
    arms = _assigned_arms(policy, d)
    return float(truth.potential_outcomes[np.arange(d.n_rows), arms].mean())


def true_regret(policy, d: Dataset, truth: SyntheticTruth) -> float:
    _check_aligned(d, truth)
    arms = _assigned_arms(policy, d)
    mu = truth.potential_outcomes
    idx = np.arange(d.n_rows)
    # per-row gaps are each >= 0, so the mean is too
    return float((mu[idx, truth.optimal_arm] - mu[idx, arms]).mean())


# Frozen by scripts/calibrate_presets.py; rerun it after changing the DGP.
PRESETS: dict[str, dict] = {
    "level-dominant": dict(base_scale=1.0, effect_scale=0.0775, effect_feature_mask=(2, 3, 4), shared_effect_scale=0.45,
                           shared_effect_mask=(0, 1), balance_arms=True),
    "effect-dominant": dict(base_scale=0.1, effect_scale=1.0, effect_feature_mask=(0, 1, 2, 3, 4), balance_arms=False),
    "null-effects": dict(base_scale=1.0, effect_scale=0.0, effect_feature_mask=(), balance_arms=True),
}


def scenario_preset(name: str, n_rows: int = 100_000, seed: int = 0) -> ScenarioConfig:
    if name not in PRESETS:
        raise DataValidationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return ScenarioConfig(n_rows=n_rows, seed=seed, **PRESETS[name]).validate()


def preset_names() -> Sequence[str]:
    return tuple(PRESETS)
