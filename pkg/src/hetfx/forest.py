"""Honest causal forest with grouped half-sample variance estimates.

Trees come in groups that share a half-sample of the data. Each tree draws its
own subsample from its group's half, splits it into a growing and an estimation
part, and grows with a random subset of covariates at every node. Leaf values
are treated-minus-control mean differences on the estimation part. The forest
prediction is the plain mean over trees; its variance comes from comparing
group means with the spread inside groups.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterator, Mapping

import numpy as np
import pandas as pd

from . import _seeding
from ._splitting import apply_tree, grow_greedy
from .causal_tree import tree_features
from .dataset import Dataset

logger = logging.getLogger(__name__)

FOREST_FORMAT = "hetfx-causal-forest"
FOREST_FORMAT_VERSION = 1
IMPORTANCE_DEPTH = 4
Z_95 = 1.96


class ForestError(RuntimeError):
    pass


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 4000
    subsample: float = 0.5             # share of the group half-sample (or of n without groups)
    honest_fraction: float = 0.5
    honest: bool = True
    max_features: int | None = None    # default ceil(sqrt(#covariates))
    min_treated: int = 5
    min_control: int = 5
    max_depth: int | None = None
    ci_group_size: int = 2
    include_propensity: bool = True
    seed: int = 0
    max_retries: int = 3

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be at least 1")
        if not 0.0 < self.subsample <= 1.0:
            raise ValueError("subsample must lie in (0, 1]")
        if not 0.0 < self.honest_fraction < 1.0:
            raise ValueError("honest_fraction must lie in (0, 1)")
        if self.ci_group_size < 1:
            raise ValueError("ci_group_size must be at least 1")
        if self.max_features is not None and self.max_features < 1:
            raise ValueError("max_features must be positive")

    def n_features(self, p: int) -> int:
        m = math.ceil(math.sqrt(p)) if self.max_features is None else self.max_features
        return min(m, p)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ForestConfig":
        return cls(**raw)


@dataclass
class ForestTree:
    group: int
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    depth: np.ndarray
    value: np.ndarray          # leaf effect, NaN at internal nodes and at leaves missing an arm
    n_treated: np.ndarray      # estimation-part counts per node
    n_control: np.ndarray

    def predict(self, F: np.ndarray) -> np.ndarray:
        return self.value[apply_tree(F, self.feature, self.threshold, self.left, self.right)]

    @property
    def n_leaves(self) -> int:
        return int((self.feature < 0).sum())


@dataclass
class Forest:
    config: ForestConfig
    feature_names: list[str]
    trees: list[ForestTree]
    skipped: list[int] = field(default_factory=list)

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    @property
    def n_groups(self) -> int:
        return len({t.group for t in self.trees})


def _leaf_values(leaf: np.ndarray, y: np.ndarray, d: np.ndarray, n_nodes: int):
    n1 = np.bincount(leaf[d], minlength=n_nodes)
    n0 = np.bincount(leaf[~d], minlength=n_nodes)
    s1 = np.bincount(leaf[d], weights=y[d], minlength=n_nodes)
    s0 = np.bincount(leaf[~d], weights=y[~d], minlength=n_nodes)
    with np.errstate(invalid="ignore", divide="ignore"):
        value = s1 / n1 - s0 / n0
    value[(n1 == 0) | (n0 == 0)] = np.nan
    return value, n1, n0


def _grow_one(F, y, d, pool, cfg: ForestConfig, index: int, group: int) -> ForestTree | None:
    n_features = cfg.n_features(F.shape[1])
    for attempt in range(cfg.max_retries + 1):
        rng = _seeding.rng_for(cfg.seed, _seeding.FOREST_TREE, index, attempt)
        size = max(int(round(cfg.subsample * len(pool))), 2)
        sample = pool[rng.permutation(len(pool))[:size]]
        if cfg.honest:
            k = int(math.floor(cfg.honest_fraction * size + 0.5))
            train, est = np.sort(sample[:k]), np.sort(sample[k:])
        else:
            train = est = np.sort(sample)
        nt = int(d[train].sum())
        if nt < cfg.min_treated or len(train) - nt < cfg.min_control or len(est) == 0:
            logger.debug("tree %d attempt %d: growing sample below the leaf floor", index, attempt)
            continue
        keys = rng.random((2 * len(train) + 1, F.shape[1])) if n_features < F.shape[1] else np.empty((0, F.shape[1]))
        n_tr, n_es = len(train), len(est)
        feature, threshold, left, right, depth, _, _, _ = grow_greedy(
            F, y, d, train.astype(np.int64), float(n_tr), 1.0 / n_tr + 1.0 / n_es, cfg.min_treated,
            cfg.min_control, -1 if cfg.max_depth is None else cfg.max_depth, 0.0, keys, n_features)
        leaf = apply_tree(F[est], feature, threshold, left, right)
        value, n1, n0 = _leaf_values(leaf, y[est], d[est], len(feature))
        value[feature >= 0] = np.nan
        return ForestTree(group, feature, threshold, left, right, depth, value, n1, n0)
    logger.warning("tree %d skipped after %d attempts", index, cfg.max_retries + 1)
    return None


def grow_forest(ds: Dataset, model, config: ForestConfig = ForestConfig(), threads: int = 1) -> Forest:
    """Grow ``config.n_trees`` honest trees. Output does not depend on ``threads``."""
    F, names = tree_features(ds, model, config.include_propensity)
    y = ds.outcome.astype(float)
    d = ds.treated.astype(np.bool_)
    n = ds.n
    g = config.ci_group_size
    n_groups = math.ceil(config.n_trees / g)
    pools = []
    for group in range(n_groups):
        if g > 1:
            rng = _seeding.rng_for(config.seed, _seeding.FOREST_GROUP, group)
            pools.append(np.sort(rng.permutation(n)[: n // 2]))
        else:
            pools.append(np.arange(n))

    def job(i: int):
        return _grow_one(F, y, d, pools[i // g], config, i, i // g)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            grown = list(pool.map(job, range(config.n_trees)))
    else:
        grown = [job(i) for i in range(config.n_trees)]
    skipped = [i for i, t in enumerate(grown) if t is None]
    trees = [t for t in grown if t is not None]
    if not trees:
        raise ForestError("every tree failed; the sample is too small for the leaf floor")
    return Forest(config, names, trees, skipped)


# ---------------------------------------------------------------- prediction

@dataclass
class ITEResult:
    estimate: np.ndarray
    variance: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    n_valid: np.ndarray
    quartile: np.ndarray

    def frame(self, unit_id=None) -> pd.DataFrame:
        out = pd.DataFrame({"estimate": self.estimate, "variance": self.variance, "ci_lower": self.ci_lower,
                            "ci_upper": self.ci_upper, "n_trees": self.n_valid, "quartile": self.quartile})
        if unit_id is not None:
            out.insert(0, "id", unit_id)
        return out


def _features_for(forest: Forest, data, model=None) -> np.ndarray:
    if isinstance(data, Dataset):
        if forest.config.include_propensity and model is None:
            raise ValueError("a propensity model is needed to predict with a score-splitting forest")
        F, names = tree_features(data, model, forest.config.include_propensity)
        if names != forest.feature_names:
            raise ValueError("dataset covariates do not match the forest")
        return F
    F = np.atleast_2d(np.asarray(data, dtype=float))
    if F.shape[1] != len(forest.feature_names):
        raise ValueError(f"expected {len(forest.feature_names)} features, got {F.shape[1]}")
    return np.ascontiguousarray(F)


def tree_predictions(forest: Forest, F: np.ndarray) -> Iterator[np.ndarray]:
    for tree in forest.trees:
        yield tree.predict(F)


def quartiles(values) -> np.ndarray:
    """Quartile 1..4 by rank (stable), so each quartile holds n/4 units when n is divisible by 4."""
    v = np.asarray(values, dtype=float)
    order = np.argsort(v, kind="mergesort")
    ranks = np.empty(len(v), dtype=np.int64)
    ranks[order] = np.arange(len(v))
    return (ranks * 4) // len(v) + 1


def predict_ite(forest: Forest, data, model=None, errors: str = "raise") -> ITEResult:
    """Mean of tree predictions, grouped half-sample variance and a 95% interval.

    ``data`` is a Dataset (with ``model`` for the score feature) or a feature
    matrix in ``forest.feature_names`` order. Units landing in a leaf without
    both arms in more than half the trees raise, or are set to NaN with
    ``errors="mask"``.
    """
    if errors not in ("raise", "mask"):
        raise ValueError("errors must be 'raise' or 'mask'")
    F = _features_for(forest, data, model)
    n = F.shape[0]
    g = forest.config.ci_group_size
    total = np.zeros(n)
    count = np.zeros(n)
    b_sum = np.zeros(n)
    b_sq = np.zeros(n)
    w_sum = np.zeros(n)
    n_complete = np.zeros(n)
    current, g_sum, g_sq, g_cnt, g_size = None, np.zeros(n), np.zeros(n), np.zeros(n), 0

    def close_group():
        if g < 2 or g_size < 2:
            return
        full = g_cnt == g_size
        gm = np.where(full, g_sum / g_size, 0.0)
        b_sum[full] += gm[full]
        b_sq[full] += gm[full] ** 2
        w_sum[full] += (g_sq[full] - g_size * gm[full] ** 2) / g_size
        n_complete[full] += 1

    for tree, pred in zip(forest.trees, tree_predictions(forest, F)):
        if tree.group != current:
            close_group()
            current, g_size = tree.group, 0
            g_sum[:] = 0.0
            g_sq[:] = 0.0
            g_cnt[:] = 0.0
        ok = ~np.isnan(pred)
        p0 = np.where(ok, pred, 0.0)
        total += p0
        count += ok
        g_sum += p0
        g_sq += p0 * p0
        g_cnt += ok
        g_size += 1
    close_group()

    bad = count <= 0.5 * forest.n_trees
    if bad.any() and errors == "raise":
        raise ForestError(f"{int(bad.sum())} unit(s) fall in non-estimable leaves in more than half the trees")
    with np.errstate(invalid="ignore", divide="ignore"):
        estimate = total / count
        mean_b = b_sum / n_complete
        var_between = b_sq / n_complete - mean_b ** 2
        variance = np.maximum(var_between - (w_sum / n_complete) / (g - 1), 0.0) if g > 1 \
            else np.full(n, np.nan)
    variance = np.where(n_complete >= 2, variance, np.nan)
    estimate[bad] = np.nan
    variance[bad] = np.nan
    half = Z_95 * np.sqrt(variance)
    q = np.zeros(n, dtype=np.int64)
    finite = ~np.isnan(estimate)
    if finite.sum() >= 4:
        q[finite] = quartiles(estimate[finite])
    return ITEResult(estimate, variance, estimate - half, estimate + half, count.astype(np.int64), q)


# ---------------------------------------------------------------- importance

def depth_weights(max_depth: int = IMPORTANCE_DEPTH) -> np.ndarray:
    w = 1.0 / np.arange(1, max_depth + 1) ** 2
    return w / w.sum()


def variable_importance(forest: Forest, max_depth: int = IMPORTANCE_DEPTH) -> pd.DataFrame:
    """Depth-weighted share of splits per covariate over the top ``max_depth`` levels.

    score(v) = sum_d w_d * splits_d(v) / splits_d with w_d proportional to d^-2;
    levels without splits contribute nothing. Scores are not renormalized.
    """
    p = len(forest.feature_names)
    counts = np.zeros((max_depth, p))
    for tree in forest.trees:
        split = (tree.feature >= 0) & (tree.depth < max_depth)
        np.add.at(counts, (tree.depth[split], tree.feature[split]), 1.0)
    totals = counts.sum(axis=1)
    w = depth_weights(max_depth)
    share = np.divide(counts, totals[:, None], out=np.zeros_like(counts), where=totals[:, None] > 0)
    score = (w[:, None] * share).sum(axis=0)
    out = pd.DataFrame({"covariate": forest.feature_names, "score": score})
    for d in range(max_depth):
        out[f"splits_depth{d + 1}"] = counts[d].astype(np.int64)
    order = sorted(range(p), key=lambda j: (-score[j], j))
    out = out.iloc[order].reset_index(drop=True)
    out.insert(1, "rank", np.arange(1, p + 1))
    return out


# ---------------------------------------------------------------- quartile table

def ite_quartile_summary(estimates, ds: Dataset, groups: Mapping[str, np.ndarray] | None = None) -> pd.DataFrame:
    """Per-quartile summary of predicted effects, outcomes and covariate group shares.

    Quartile 1 holds the most negative effects. Group shares are fractions of the
    whole sample, so each quartile's shares for one covariate sum to about 25%.
    """
    est = np.asarray(estimates, dtype=float)
    if len(est) != ds.n:
        raise ValueError("estimates are not aligned with the dataset")
    if len(est) < 4:
        raise ValueError("need at least 4 units for quartiles")
    if np.isnan(est).any():
        raise ValueError("estimates contain NaN; predict with errors='raise' or drop masked units")
    q = quartiles(est)
    y = ds.outcome
    t = ds.treated
    cols = [f"Quartile {k}" for k in range(1, 5)]
    rows: dict[str, list[float]] = {
        "mean predicted effect": [], "mean outcome": [], "treated mean outcome": [], "outcome variance": [],
        "treated outcome variance": [], "max outcome": [], "min outcome": [],
    }
    for k in range(1, 5):
        m = q == k
        yt = y[m & t]
        rows["mean predicted effect"].append(est[m].mean())
        rows["mean outcome"].append(y[m].mean())
        rows["treated mean outcome"].append(yt.mean() if len(yt) else np.nan)
        rows["outcome variance"].append(y[m].var(ddof=1) if m.sum() > 1 else np.nan)
        rows["treated outcome variance"].append(yt.var(ddof=1) if len(yt) > 1 else np.nan)
        rows["max outcome"].append(y[m].max())
        rows["min outcome"].append(y[m].min())
    for name, labels in (groups or {}).items():
        labels = np.asarray(labels)
        if len(labels) != ds.n:
            raise ValueError(f"group labels for {name!r} are not aligned with the dataset")
        for level in pd.unique(labels):
            rows[f"{name}: {level}"] = [float(((q == k) & (labels == level)).sum()) / ds.n for k in range(1, 5)]
    return pd.DataFrame.from_dict(rows, orient="index", columns=cols)


# ---------------------------------------------------------------- serialization

def _nan_list(a) -> list:
    return [None if (isinstance(v, float) and math.isnan(v)) else v for v in np.asarray(a).tolist()]


def forest_to_json(forest: Forest) -> str:
    trees = [{"group": t.group, "feature": t.feature.tolist(), "threshold": _nan_list(t.threshold),
              "left": t.left.tolist(), "right": t.right.tolist(), "depth": t.depth.tolist(),
              "value": _nan_list(t.value), "n_treated": t.n_treated.tolist(), "n_control": t.n_control.tolist()}
             for t in forest.trees]
    payload = {"format": FOREST_FORMAT, "version": FOREST_FORMAT_VERSION, "config": forest.config.to_dict(),
               "feature_names": forest.feature_names, "skipped": forest.skipped, "trees": trees}
    return json.dumps(payload, separators=(",", ":"), sort_keys=True) + "\n"


def forest_from_json(text: str) -> Forest:
    raw = json.loads(text)
    if raw.get("format") != FOREST_FORMAT:
        raise ValueError("not a causal forest document")
    if raw.get("version") != FOREST_FORMAT_VERSION:
        raise ValueError(f"unsupported forest version {raw.get('version')!r}")

    def arr(v, dt):
        return np.array([np.nan if x is None else x for x in v], dtype=dt)

    trees = [ForestTree(t["group"], arr(t["feature"], np.int64), arr(t["threshold"], float),
                        arr(t["left"], np.int64), arr(t["right"], np.int64), arr(t["depth"], np.int64),
                        arr(t["value"], float), arr(t["n_treated"], np.int64), arr(t["n_control"], np.int64))
             for t in raw["trees"]]
    return Forest(ForestConfig.from_dict(raw["config"]), list(raw["feature_names"]), trees, list(raw["skipped"]))
