"""Honest causal trees.

The training half of the sample chooses the partition under the honest
expected-MSE criterion; the estimation half supplies the leaf effects, which are
matching estimates within each leaf. Growth is greedy and exhaustive, pruning is
weakest-link cost-complexity with the complexity parameter picked by
cross-validation on the training half.
"""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace

import numpy as np
import pandas as pd

from . import _seeding
from ._splitting import apply_tree, best_split, grow_greedy
from .dataset import Dataset
from .matching import estimate_cate, nn_match

logger = logging.getLogger(__name__)

PSCORE_FEATURE = "pscore"
TREE_FORMAT = "hetfx-causal-tree"
TREE_FORMAT_VERSION = 1


@dataclass(frozen=True)
class TreeConfig:
    min_treated: int = 50
    min_control: int = 50
    max_depth: int | None = None
    epsilon: float = 0.0
    estimator: str = "means"            # "means" or "matched" effects during growth
    include_propensity: bool = True
    honest_fraction: float = 0.5
    stratify_split: bool = False
    cv_folds: int = 10                  # 0 disables pruning
    cv_rule: str = "one_se"             # "min" or "one_se"
    ratio: int = 4
    n_boot: int = 1000
    threshold_digits: int = 6           # significant digits in canonical structures
    threshold_grid: float | None = None  # absolute rounding grid; overrides digits

    def __post_init__(self):
        if self.estimator not in ("means", "matched"):
            raise ValueError(f"unknown growth estimator {self.estimator!r}")
        if not 0.0 < self.honest_fraction < 1.0:
            raise ValueError("honest_fraction must lie in (0, 1)")
        if self.min_treated < 1 or self.min_control < 1:
            raise ValueError("leaf floors must be positive")
        if self.cv_folds == 1 or self.cv_folds < 0:
            raise ValueError("cv_folds must be 0 (no pruning) or at least 2")
        if self.cv_rule not in ("min", "one_se"):
            raise ValueError(f"unknown cross-validation rule {self.cv_rule!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "TreeConfig":
        return cls(**raw)


# ---------------------------------------------------------------- sample split

@dataclass(frozen=True)
class HonestSplit:
    train: np.ndarray
    estimate: np.ndarray
    seed: int
    fraction: float = 0.5

    @property
    def n_train(self) -> int:
        return len(self.train)

    @property
    def n_est(self) -> int:
        return len(self.estimate)


def honest_split(ds: Dataset | int, fraction: float = 0.5, seed: int = 0, stratify: bool = False,
                 min_treated: int = 50, min_control: int = 50) -> HonestSplit:
    """Uniformly random disjoint split into a training and an estimation sample.

    With ``stratify`` the treated and control units are split separately so the
    treated counts on the two sides differ by at most one.
    """
    n = ds if isinstance(ds, int) else ds.n
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie in (0, 1)")
    if n < (min_treated + min_control) / fraction:
        raise ValueError(f"sample too small for an honest split: n={n}, need at least "
                         f"{math.ceil((min_treated + min_control) / fraction)}")
    rng = _seeding.rng_for(seed, _seeding.HONEST_SPLIT)
    n_train = int(math.floor(fraction * n + 0.5))
    if not 0 < n_train < n:
        raise ValueError(f"fraction {fraction} leaves an empty training or estimation sample at n={n}")
    if stratify:
        if isinstance(ds, int):
            raise ValueError("stratified splits need the dataset")
        t = np.flatnonzero(ds.treated)
        c = np.flatnonzero(~ds.treated)
        t = t[rng.permutation(len(t))]
        c = c[rng.permutation(len(c))]
        kt = int(math.floor(fraction * len(t) + 0.5))
        kc = min(max(n_train - kt, 0), len(c))
        train = np.concatenate([t[:kt], c[:kc]])
        est = np.concatenate([t[kt:], c[kc:]])
    else:
        perm = rng.permutation(n)
        train, est = perm[:n_train], perm[n_train:]
    return HonestSplit(np.sort(train), np.sort(est), seed, fraction)


# ---------------------------------------------------------------- criterion

def _arm_terms(y: np.ndarray, d: np.ndarray) -> tuple[int, int, float, float, float]:
    t = d.astype(bool)
    y1, y0 = y[t], y[~t]
    return len(y1), len(y0), float(y1.mean() - y0.mean()), float(y1.var(ddof=1)), float(y0.var(ddof=1))


def _contribution(n1: int, n0: int, tau: float, v1: float, v0: float, n_tr: float, n_es: float,
                  n_weight: float | None = None) -> float:
    p = n1 / (n1 + n0)
    weight = n1 + n0 if n_weight is None else n_weight
    return -weight * tau * tau / n_tr + (1.0 / n_tr + 1.0 / n_es) * (v1 / p + v0 / (1.0 - p))


def evaluate_emse(leaves, y, d, n_tr: int | None = None, n_es: int | None = None) -> float:
    """Honest expected-MSE criterion of a partition of the training sample (lower is better).

    ``leaves`` labels each training unit with its leaf. Each leaf contributes
    ``-n_l tau_l^2 / N_tr + (1/N_tr + 1/N_es) (S1^2 / p_l + S0^2 / (1 - p_l))`` where
    tau_l is the difference in means and p_l the leaf's treated share.
    """
    leaves = np.asarray(leaves)
    y = np.asarray(y, dtype=float)
    d = np.asarray(d).astype(bool)
    n_tr = len(y) if n_tr is None else n_tr
    n_es = n_tr if n_es is None else n_es
    total = 0.0
    for leaf in np.unique(leaves):
        m = leaves == leaf
        n1, n0 = int(d[m].sum()), int((~d[m]).sum())
        if n1 < 2 or n0 < 2:
            raise ValueError(f"leaf {leaf!r} needs at least 2 treated and 2 control units for variances")
        total += _contribution(*_arm_terms(y[m], d[m]), n_tr, n_es)
    return total


# ---------------------------------------------------------------- tree

@dataclass
class LeafEstimate:
    node: int
    estimable: bool
    estimate: float | None
    se: float | None
    n_treated: int
    n_control: int
    n_train_treated: int
    n_train_control: int
    treated_share: float
    note: str = ""


@dataclass
class CausalTree:
    """Array-backed binary tree. Node 0 is the root; ``feature == -1`` marks a leaf.

    Left children hold ``x[feature] <= threshold``. Per-node training counts and
    the node's criterion contribution (as a leaf) are kept for pruning.
    """

    feature_names: list[str]
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    depth: np.ndarray
    n_treated: np.ndarray
    n_control: np.ndarray
    criterion: np.ndarray
    n_train: int
    n_est: int
    config: TreeConfig
    leaves: dict[int, LeafEstimate] | None = None

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def leaf_ids(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.feature < 0)]

    @property
    def n_leaves(self) -> int:
        return int((self.feature < 0).sum())

    def apply(self, F: np.ndarray) -> np.ndarray:
        return apply_tree(np.ascontiguousarray(F, dtype=float), self.feature, self.threshold, self.left, self.right)

    def total_criterion(self) -> float:
        return float(self.criterion[self.feature < 0].sum())

    def preorder(self) -> list[int]:
        out, stack = [], [0]
        while stack:
            node = stack.pop()
            out.append(node)
            if self.feature[node] >= 0:
                stack.extend([int(self.right[node]), int(self.left[node])])
        return out

    def rule(self, node: int) -> str:
        parent = {int(c): (i, "<=") for i, c in enumerate(self.left) if c >= 0}
        parent.update({int(c): (i, ">") for i, c in enumerate(self.right) if c >= 0})
        parts = []
        while node in parent:
            p, op = parent[node]
            parts.append(f"{self.feature_names[self.feature[p]]} {op} {self.threshold[p]:.6g}")
            node = p
        return " & ".join(reversed(parts)) if parts else "(all)"

    def root_split(self) -> tuple[str, float] | None:
        if self.feature[0] < 0:
            return None
        return self.feature_names[self.feature[0]], float(self.threshold[0])


def tree_features(ds: Dataset, model=None, include_propensity: bool = True) -> tuple[np.ndarray, list[str]]:
    """Splitting covariates: the dataset covariates plus, optionally, the raw propensity score."""
    X = ds.X
    names = list(ds.covariate_names)
    if include_propensity:
        if model is None:
            raise ValueError("a propensity model is needed to split on the score")
        if len(model.scores) != ds.n:
            raise ValueError("propensity scores are not aligned with the dataset rows")
        X = np.column_stack([X, model.scores])
        names.append(PSCORE_FEATURE)
    return np.ascontiguousarray(X, dtype=float), names


def _matched_contribution(y, d, lin, rows, n_tr, n_es, ratio) -> float:
    dd = d[rows]
    n1 = int(dd.sum())
    n0 = len(rows) - n1
    if n1 < 2 or n0 < max(2, ratio):
        return np.nan
    ms = nn_match(lin[rows], dd, ratio=ratio)
    tau = estimate_cate(y[rows], ms, n_boot=0).estimate
    _, _, _, v1, v0 = _arm_terms(y[rows], dd)
    return _contribution(n1, n0, tau, v1, v0, n_tr, n_es)


def _grow_python(F, y, d, rows, n_tr, n_es, cfg: TreeConfig, lin=None, matched=False):
    """Node-by-node growth; used for the matched estimator.

    Candidates are ranked by the difference-in-means criterion; in matched mode
    the winning split must also lower the criterion when every tau is replaced by
    a within-node matching estimate, otherwise the node stays a leaf.
    """
    penalty = 1.0 / n_tr + 1.0 / n_es
    max_depth = -1 if cfg.max_depth is None else cfg.max_depth
    nodes = [{"rows": rows, "depth": 0}]
    out = []
    head = 0
    while head < len(nodes):
        node = nodes[head]
        head += 1
        seg = node["rows"]
        feats = np.arange(F.shape[1]) if max_depth < 0 or node["depth"] < max_depth else np.arange(0)
        f, thr, child, parent = best_split(F, y, d, seg, feats, n_tr, penalty, cfg.min_treated, cfg.min_control)
        crit = _matched_contribution(y, d, lin, seg, n_tr, n_es, cfg.ratio) if matched else parent
        rec = {"feature": -1, "threshold": np.nan, "left": -1, "right": -1, "depth": node["depth"],
               "nt": int(d[seg].sum()), "nc": int(len(seg) - d[seg].sum()), "crit": crit}
        accept = f >= 0 and child < parent - cfg.epsilon
        if accept:
            lrows, rrows = seg[F[seg, f] <= thr], seg[F[seg, f] > thr]
            if matched:
                lc = _matched_contribution(y, d, lin, lrows, n_tr, n_es, cfg.ratio)
                rc = _matched_contribution(y, d, lin, rrows, n_tr, n_es, cfg.ratio)
                accept = bool(np.isfinite(lc) and np.isfinite(rc) and lc + rc < crit - cfg.epsilon)
        if accept:
            rec.update(feature=int(f), threshold=float(thr), left=len(nodes), right=len(nodes) + 1)
            nodes.append({"rows": lrows, "depth": node["depth"] + 1})
            nodes.append({"rows": rrows, "depth": node["depth"] + 1})
        out.append(rec)
    col = lambda k, dt: np.array([r[k] for r in out], dtype=dt)  # noqa: E731
    return (col("feature", np.int64), col("threshold", float), col("left", np.int64), col("right", np.int64),
            col("depth", np.int64), col("nt", np.int64), col("nc", np.int64), col("crit", float))


def _grow(F, y, d, rows, n_tr, n_es, cfg: TreeConfig, names, lin=None, engine: str = "compiled") -> CausalTree:
    rows = np.asarray(rows, dtype=np.int64)
    d = np.asarray(d).astype(np.bool_)
    y = np.asarray(y, dtype=float)
    if cfg.estimator == "matched":
        arrays = _grow_python(F, y, d, rows, n_tr, n_es, cfg, lin=lin, matched=True)
    elif engine == "python":
        arrays = _grow_python(F, y, d, rows, n_tr, n_es, cfg)
    else:
        arrays = grow_greedy(F, y, d, rows, float(n_tr), 1.0 / n_tr + 1.0 / n_es, cfg.min_treated,
                             cfg.min_control, -1 if cfg.max_depth is None else cfg.max_depth, cfg.epsilon,
                             np.empty((0, F.shape[1])), F.shape[1])
    feature, threshold, left, right, depth, nt, nc, crit = arrays
    return CausalTree(list(names), feature, threshold, left, right, depth, nt, nc, crit, int(n_tr), int(n_es), cfg)


def grow_tree(split: HonestSplit, ds: Dataset, model, config: TreeConfig = TreeConfig(),
              engine: str = "compiled") -> CausalTree:
    """Greedy exhaustive growth on the training sample (structure only)."""
    F, names = tree_features(ds, model, config.include_propensity)
    d = ds.treated
    nt = int(d[split.train].sum())
    nc = split.n_train - nt
    if nt < config.min_treated or nc < config.min_control:
        raise ValueError(f"training sample below the leaf floor at the root: {nt} treated, {nc} control")
    lin = model.linearized if model is not None else None
    return _grow(F, ds.outcome, d, split.train, split.n_train, split.n_est, config, names, lin=lin, engine=engine)


# ---------------------------------------------------------------- pruning

def pruning_path(tree: CausalTree) -> list[tuple[float, np.ndarray]]:
    """Weakest-link sequence: (alpha, collapsed-node mask) from the full tree down to the root."""
    n = tree.n_nodes
    internal = tree.feature >= 0
    collapsed = np.zeros(n, dtype=bool)
    path = [(0.0, collapsed.copy())]
    last = 0.0
    while True:
        reach = np.zeros(n, dtype=bool)
        reach[0] = True
        for t in range(n):  # children always carry larger ids than parents
            if reach[t] and internal[t] and not collapsed[t]:
                reach[tree.left[t]] = reach[tree.right[t]] = True
        active = reach & internal & ~collapsed
        if not active.any():
            break
        sub = tree.criterion.copy()
        nleaf = np.ones(n)
        for t in range(n - 1, -1, -1):
            if active[t]:
                sub[t] = sub[tree.left[t]] + sub[tree.right[t]]
                nleaf[t] = nleaf[tree.left[t]] + nleaf[tree.right[t]]
        g = np.full(n, np.inf)
        g[active] = (tree.criterion[active] - sub[active]) / (nleaf[active] - 1.0)
        alpha = max(float(g.min()), last)
        collapsed |= active & (g <= alpha + 1e-12 * abs(alpha))
        last = alpha
        path.append((alpha, collapsed.copy()))
    return path


def collapse(tree: CausalTree, collapsed: np.ndarray) -> CausalTree:
    """Copy of the tree with every node in ``collapsed`` turned into a leaf, ids renumbered breadth-first."""
    order, new_id = [0], {0: 0}
    head = 0
    while head < len(order):
        t = order[head]
        head += 1
        if tree.feature[t] >= 0 and not collapsed[t]:
            for c in (tree.left[t], tree.right[t]):
                new_id[int(c)] = len(order)
                order.append(int(c))
    idx = np.array(order, dtype=np.int64)
    keep_split = np.array([tree.feature[t] >= 0 and not collapsed[t] for t in order])
    feature = np.where(keep_split, tree.feature[idx], -1)
    threshold = np.where(keep_split, tree.threshold[idx], np.nan)
    left = np.array([new_id[int(tree.left[t])] if k else -1 for t, k in zip(order, keep_split)], dtype=np.int64)
    right = np.array([new_id[int(tree.right[t])] if k else -1 for t, k in zip(order, keep_split)], dtype=np.int64)
    leaves = None
    if tree.leaves is not None:
        leaves = {new_id[k]: replace(v, node=new_id[k]) for k, v in tree.leaves.items() if k in new_id}
    return replace(tree, feature=feature, threshold=threshold, left=left, right=right, depth=tree.depth[idx],
                   n_treated=tree.n_treated[idx], n_control=tree.n_control[idx], criterion=tree.criterion[idx],
                   leaves=leaves)


def prune_to(tree: CausalTree, alpha: float, path=None) -> CausalTree:
    path = pruning_path(tree) if path is None else path
    mask = path[0][1]
    for a, m in path:
        if a <= alpha:
            mask = m
    return collapse(tree, mask)


def _heldout_criterion(tree: CausalTree, F, y, d, fit_rows, held_rows, n_es) -> float:
    """Criterion of ``tree`` re-evaluated on held-out units.

    Leaves with fewer than two held-out units in an arm borrow effect and
    variances from the fitting units in that leaf.
    """
    n_ho = len(held_rows)
    held_leaf = tree.apply(F[held_rows])
    fit_leaf = tree.apply(F[fit_rows])
    total = 0.0
    for leaf in tree.leaf_ids:
        h = held_rows[held_leaf == leaf]
        dh = d[h]
        if dh.sum() >= 2 and (~dh).sum() >= 2:
            total += _contribution(*_arm_terms(y[h], dh), n_ho, n_es)
        else:
            f = fit_rows[fit_leaf == leaf]
            n1, n0, tau, v1, v0 = _arm_terms(y[f], d[f])
            total += _contribution(n1, n0, tau, v1, v0, n_ho, n_es, n_weight=len(h))
    return total


@dataclass
class PruneReport:
    alphas: list[float]
    betas: list[float]
    cv_scores: list[float]
    chosen: int
    folds: int


def _fold_labels(d: np.ndarray, folds: int, rng: np.random.Generator) -> np.ndarray:
    labels = np.empty(len(d), dtype=np.int64)
    for arm in (True, False):
        idx = np.flatnonzero(d == arm)
        idx = idx[rng.permutation(len(idx))]
        labels[idx] = np.arange(len(idx)) % folds
    return labels


def prune_cv(tree: CausalTree, split: HonestSplit, ds: Dataset, model, folds: int | None = None,
             seed: int = 0, return_report: bool = False):
    """Cost-complexity pruning with the complexity parameter chosen by K-fold CV on the training sample.

    Each fold grows a tree on the other folds, builds its own pruning path and is
    scored on the held-out fold at the geometric midpoints of the main path's
    alphas. With ``cv_rule="min"`` the smallest mean held-out criterion wins; with
    ``"one_se"`` the simplest tree within one standard error of that minimum wins.
    Ties go to the simpler tree.
    """
    folds = tree.config.cv_folds if folds is None else folds
    if folds < 2:
        raise ValueError("folds must be at least 2")
    path = pruning_path(tree)
    alphas = [a for a, _ in path]
    betas = [math.sqrt(alphas[k] * alphas[k + 1]) for k in range(len(alphas) - 1)] + [math.inf]
    if tree.n_leaves == 1:
        report = PruneReport(alphas, betas, [0.0], 0, 0)
        return (tree, report) if return_report else tree

    F, _ = tree_features(ds, model, tree.config.include_propensity)
    y = ds.outcome
    d = ds.treated
    train = split.train
    dt = d[train]
    k_eff = min(folds, int(dt.sum()) // 2, int((~dt).sum()) // 2)
    if k_eff < folds:
        logger.warning("reducing cross-validation folds from %d to %d: too few units per arm", folds, k_eff)
    if k_eff < 2:
        logger.warning("too few units for cross-validation; tree left unpruned")
        report = PruneReport(alphas, betas, [], 0, k_eff)
        return (tree, report) if return_report else tree

    labels = _fold_labels(dt, k_eff, _seeding.rng_for(seed, _seeding.CV_FOLDS))
    lin = model.linearized if model is not None else None
    scores = np.zeros((k_eff, len(betas)))
    for k in range(k_eff):
        fit_rows = train[labels != k]
        held_rows = train[labels == k]
        ftree = _grow(F, y, d, fit_rows, len(fit_rows), tree.n_est, tree.config, tree.feature_names, lin=lin)
        fpath = pruning_path(ftree)
        for i, b in enumerate(betas):
            scores[k, i] = _heldout_criterion(prune_to(ftree, b, fpath), F, y, d, fit_rows, held_rows, tree.n_est)
    mean = scores.mean(axis=0)
    i_min = int(np.argmin(mean))
    bound = float(mean[i_min])
    if tree.config.cv_rule == "one_se":
        bound += float(scores[:, i_min].std(ddof=1) / math.sqrt(k_eff))
    bound += 1e-12 * abs(bound)
    chosen = max(i for i, s in enumerate(mean) if s <= bound)
    pruned = collapse(tree, path[chosen][1])
    report = PruneReport(alphas, betas, mean.tolist(), chosen, k_eff)
    return (pruned, report) if return_report else pruned


# ---------------------------------------------------------------- leaf effects

def estimate_leaves(tree: CausalTree, split: HonestSplit, ds: Dataset, model, seed: int = 0,
                    n_boot: int | None = None) -> CausalTree:
    """Matching estimate in every leaf using only estimation-sample units.

    Leaves under the floor in the estimation sample are flagged not estimable.
    Every leaf's bootstrap uses ``seed``, so a leaf's result equals a standalone
    ``estimate_cate`` call on the same units.
    """
    cfg = tree.config
    n_boot = cfg.n_boot if n_boot is None else n_boot
    F, _ = tree_features(ds, model, cfg.include_propensity)
    est = split.estimate
    node = tree.apply(F[est])
    d = ds.treated
    lin = model.linearized
    leaves = {}
    for leaf in tree.leaf_ids:
        rows = est[node == leaf]
        nt = int(d[rows].sum())
        nc = len(rows) - nt
        ntt, ntc = int(tree.n_treated[leaf]), int(tree.n_control[leaf])
        share = ntt / (ntt + ntc) if ntt + ntc else float("nan")
        rec = LeafEstimate(leaf, False, None, None, nt, nc, ntt, ntc, share)
        if nc == 0:
            rec.note = "no control units in the estimation sample"
        elif nt < cfg.min_treated or nc < cfg.min_control:
            rec.note = f"below the {cfg.min_treated}/{cfg.min_control} floor in the estimation sample"
        elif nc < cfg.ratio:
            rec.note = f"fewer than {cfg.ratio} controls to match"
        else:
            ms = nn_match(lin[rows], d[rows], ratio=cfg.ratio)
            res = estimate_cate(ds.outcome[rows], ms, n_boot=n_boot, seed=seed)
            rec.estimable, rec.estimate, rec.se = True, res.estimate, res.se
        leaves[leaf] = rec
    return replace(tree, leaves=leaves)


def fit_causal_tree(ds: Dataset, model, config: TreeConfig = TreeConfig(), seed: int = 0,
                    prune: bool | None = None) -> tuple[CausalTree, HonestSplit]:
    """Split, grow, prune and estimate in one call; sub-seeds are derived from ``seed``."""
    split = honest_split(ds, config.honest_fraction, seed, stratify=config.stratify_split,
                         min_treated=config.min_treated, min_control=config.min_control)
    tree = grow_tree(split, ds, model, config)
    if (config.cv_folds >= 2) if prune is None else prune:
        tree = prune_cv(tree, split, ds, model, seed=seed)
    tree = estimate_leaves(tree, split, ds, model, seed=_seeding.derive_seed(seed, _seeding.BOOTSTRAP))
    return tree, split


# ---------------------------------------------------------------- stability

def _round_threshold(x: float, digits: int, grid: float | None) -> float:
    if grid is not None:
        v = round(x / grid) * grid
        v = round(v, 12)
    else:
        v = float(f"{x:.{digits}g}")
    return v + 0.0  # folds -0.0 into 0.0


def canonical_structure(tree: CausalTree, digits: int | None = None, grid: float | None = None) -> tuple:
    """Preorder list of (depth, covariate, rounded threshold); node ids play no part."""
    digits = tree.config.threshold_digits if digits is None else digits
    grid = tree.config.threshold_grid if grid is None else grid
    return tuple((int(tree.depth[t]), tree.feature_names[tree.feature[t]],
                  _round_threshold(float(tree.threshold[t]), digits, grid))
                 for t in tree.preorder() if tree.feature[t] >= 0)


def structure_label(structure: tuple) -> str:
    if not structure:
        return "(root only)"
    return "; ".join(f"{d}:{name}<={thr!r}" for d, name, thr in structure)


@dataclass
class StabilityResult:
    structures: list[tuple]
    table: pd.DataFrame

    @property
    def modal_share(self) -> float:
        return float(self.table["share"].iloc[0])

    @property
    def modal_structure(self) -> tuple:
        return Counter(self.structures).most_common(1)[0][0]


def stability_analysis(ds: Dataset, model, config: TreeConfig = TreeConfig(), n_reps: int = 100, seed: int = 0,
                       threads: int = 1) -> StabilityResult:
    """Repeat split, grow and prune with fresh seeds and tabulate the distinct structures."""
    if n_reps < 1:
        raise ValueError("n_reps must be at least 1")

    def one(r: int) -> tuple:
        s = _seeding.derive_seed(seed, _seeding.STABILITY, r)
        split = honest_split(ds, config.honest_fraction, s, stratify=config.stratify_split,
                             min_treated=config.min_treated, min_control=config.min_control)
        tree = grow_tree(split, ds, model, config)
        if config.cv_folds >= 2:
            tree = prune_cv(tree, split, ds, model, seed=s)
        return canonical_structure(tree)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            structures = list(pool.map(one, range(n_reps)))
    else:
        structures = [one(r) for r in range(n_reps)]
    counts = Counter(structures)
    rows = sorted(counts.items(), key=lambda kv: (-kv[1], structure_label(kv[0])))
    table = pd.DataFrame({"structure": [structure_label(s) for s, _ in rows],
                          "count": [c for _, c in rows],
                          "share": [c / n_reps for _, c in rows]})
    return StabilityResult(structures, table)


# ---------------------------------------------------------------- export

def _num(x):
    if x is None:
        return None
    x = float(x)
    return None if math.isnan(x) else x


def _require_estimates(tree: CausalTree) -> None:
    if tree.leaves is None:
        raise ValueError("tree has no leaf estimates; run estimate_leaves first")


def tree_to_dict(tree: CausalTree) -> dict:
    _require_estimates(tree)
    nodes = []
    for t in range(tree.n_nodes):
        split = tree.feature[t] >= 0
        rec = {
            "id": t,
            "depth": int(tree.depth[t]),
            "feature": tree.feature_names[tree.feature[t]] if split else None,
            "threshold": _num(tree.threshold[t]) if split else None,
            "left": int(tree.left[t]) if split else None,
            "right": int(tree.right[t]) if split else None,
            "n_train_treated": int(tree.n_treated[t]),
            "n_train_control": int(tree.n_control[t]),
            "criterion": _num(tree.criterion[t]),
            "leaf": None,
        }
        if not split:
            leaf = tree.leaves[t]
            rec["leaf"] = {"estimable": leaf.estimable, "estimate": _num(leaf.estimate), "se": _num(leaf.se),
                           "n_treated": leaf.n_treated, "n_control": leaf.n_control,
                           "treated_share_train": _num(leaf.treated_share), "note": leaf.note}
        nodes.append(rec)
    return {"format": TREE_FORMAT, "version": TREE_FORMAT_VERSION, "feature_names": tree.feature_names,
            "n_train": tree.n_train, "n_est": tree.n_est, "config": tree.config.to_dict(), "nodes": nodes}


def tree_from_dict(raw: dict) -> CausalTree:
    if raw.get("format") != TREE_FORMAT:
        raise ValueError("not a causal tree document")
    if raw.get("version") != TREE_FORMAT_VERSION:
        raise ValueError(f"unsupported causal tree version {raw.get('version')!r}")
    names = list(raw["feature_names"])
    nodes = raw["nodes"]
    pos = {nm: i for i, nm in enumerate(names)}
    arr = lambda f, dt: np.array([f(r) for r in nodes], dtype=dt)  # noqa: E731
    leaves = {}
    for r in nodes:
        if r["leaf"] is not None:
            lf = r["leaf"]
            leaves[r["id"]] = LeafEstimate(r["id"], lf["estimable"], lf["estimate"], lf["se"], lf["n_treated"],
                                           lf["n_control"], r["n_train_treated"], r["n_train_control"],
                                           np.nan if lf["treated_share_train"] is None else lf["treated_share_train"],
                                           lf["note"])
    return CausalTree(
        feature_names=names,
        feature=arr(lambda r: -1 if r["feature"] is None else pos[r["feature"]], np.int64),
        threshold=arr(lambda r: np.nan if r["threshold"] is None else r["threshold"], float),
        left=arr(lambda r: -1 if r["left"] is None else r["left"], np.int64),
        right=arr(lambda r: -1 if r["right"] is None else r["right"], np.int64),
        depth=arr(lambda r: r["depth"], np.int64),
        n_treated=arr(lambda r: r["n_train_treated"], np.int64),
        n_control=arr(lambda r: r["n_train_control"], np.int64),
        criterion=arr(lambda r: np.nan if r["criterion"] is None else r["criterion"], float),
        n_train=int(raw["n_train"]), n_est=int(raw["n_est"]),
        config=TreeConfig.from_dict(raw["config"]), leaves=leaves)


def leaf_label(leaf: LeafEstimate) -> str:
    n = leaf.n_treated + leaf.n_control
    if not leaf.estimable:
        return f"not estimable, n={n}"
    return f"{leaf.estimate:.3f} ({leaf.se:.3f}), n={n}"


def export_tree(tree: CausalTree, fmt: str = "json") -> str:
    """Render as ``"json"`` (full hierarchy) or ``"dot"`` (Graphviz, leaves labelled estimate (SE), n)."""
    fmt = fmt.lower()
    if fmt == "json":
        return json.dumps(tree_to_dict(tree), indent=2, sort_keys=True) + "\n"
    if fmt != "dot":
        raise ValueError(f"unknown export format {fmt!r}")
    _require_estimates(tree)
    lines = ["digraph causal_tree {", '  node [shape=box, fontname="Helvetica"];']
    for t in tree.preorder():
        if tree.feature[t] >= 0:
            name = tree.feature_names[tree.feature[t]]
            lines.append(f'  n{t} [label="{name} <= {tree.threshold[t]:.6g}", shape=ellipse];')
            lines.append(f'  n{t} -> n{tree.left[t]} [label="yes"];')
            lines.append(f'  n{t} -> n{tree.right[t]} [label="no"];')
        else:
            lines.append(f'  n{t} [label="{leaf_label(tree.leaves[t])}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def tree_from_json(text: str) -> CausalTree:
    return tree_from_dict(json.loads(text))


def leaf_table(tree: CausalTree) -> pd.DataFrame:
    """One row per leaf in left-to-right order: id, rule path, estimate, SE and counts."""
    _require_estimates(tree)
    rows = []
    for i, t in enumerate([t for t in tree.preorder() if tree.feature[t] < 0], start=1):
        leaf = tree.leaves[t]
        rows.append({"leaf": f"L{i}", "node": t, "rule": tree.rule(t), "estimate": leaf.estimate, "se": leaf.se,
                     "n_treated": leaf.n_treated, "n_control": leaf.n_control,
                     "n_train_treated": leaf.n_train_treated, "n_train_control": leaf.n_train_control,
                     "treated_share_train": leaf.treated_share, "estimable": leaf.estimable})
    return pd.DataFrame(rows)


def leaf_rows(tree: CausalTree) -> list[tuple[str, float, float]]:
    """(leaf id, estimate, SE) for estimable leaves, ready for a sensitivity grid."""
    tab = leaf_table(tree)
    tab = tab[tab["estimable"]]
    return list(zip(tab["leaf"], tab["estimate"].astype(float), tab["se"].astype(float)))


__all__ = [
    "TreeConfig", "HonestSplit", "CausalTree", "LeafEstimate", "honest_split", "evaluate_emse", "grow_tree",
    "pruning_path", "prune_cv", "prune_to", "estimate_leaves", "fit_causal_tree", "canonical_structure",
    "stability_analysis", "export_tree", "tree_from_json", "leaf_table", "tree_features",
]
