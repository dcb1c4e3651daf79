"""Nearest-neighbor matching on the linearized propensity score."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from .dataset import Dataset


class MatchingError(ValueError):
    pass


@dataclass
class MatchSet:
    """Treated units and their matched controls (positions into the input arrays).

    ``controls`` has shape (n_treated, ratio); slots a caliper left empty hold -1
    and the treated unit is listed in ``incomplete``.
    """

    treated: np.ndarray
    controls: np.ndarray
    distances: np.ndarray
    ratio: int
    with_replacement: bool = True
    caliper: float | None = None

    @property
    def incomplete(self) -> np.ndarray:
        return self.treated[(self.controls < 0).any(axis=1)]

    @property
    def n_matched(self) -> np.ndarray:
        return (self.controls >= 0).sum(axis=1)

    def assignments(self) -> dict[int, list[int]]:
        return {int(t): [int(c) for c in row if c >= 0] for t, row in zip(self.treated, self.controls)}

    def control_multiplicity(self, n: int) -> np.ndarray:
        used = self.controls[self.controls >= 0]
        return np.bincount(used, minlength=n)

    def pairs_frame(self, unit_id=None) -> pd.DataFrame:
        rows = []
        for t, row, dist in zip(self.treated, self.controls, self.distances):
            for rank, (c, dd) in enumerate(zip(row, dist), start=1):
                if c < 0:
                    continue
                rows.append({"treated": t if unit_id is None else unit_id[t],
                             "control": c if unit_id is None else unit_id[c],
                             "rank": rank, "distance": dd})
        return pd.DataFrame(rows, columns=["treated", "control", "rank", "distance"])


def _nearest_exact(x: float, sorted_scores: np.ndarray, sorted_pos: np.ndarray, k: int,
                   available: np.ndarray | None) -> tuple[np.ndarray, np.ndarray]:
    """k nearest available controls to x, ties to the lower position."""
    m = len(sorted_scores)
    i = int(np.searchsorted(sorted_scores, x))
    lo, hi = i - 1, i
    kth = -np.inf
    found = 0
    while found < k and (lo >= 0 or hi < m):
        dl = x - sorted_scores[lo] if lo >= 0 else np.inf
        dh = sorted_scores[hi] - x if hi < m else np.inf
        if dl <= dh:
            j, lo = lo, lo - 1
        else:
            j, hi = hi, hi + 1
        if available is None or available[sorted_pos[j]]:
            found += 1
            kth = max(kth, abs(sorted_scores[j] - x))
    if found == 0:
        return np.empty(0, dtype=np.int64), np.empty(0)
    # all controls within kth compete, so equal-distance ties beyond the walk are seen
    # x -/+ kth can round past a run of tied scores, so widen by the distances themselves
    a = int(np.searchsorted(sorted_scores, x - kth, side="left"))
    while a > 0 and abs(sorted_scores[a - 1] - x) <= kth:
        a -= 1
    b = int(np.searchsorted(sorted_scores, x + kth, side="right"))
    while b < m and abs(sorted_scores[b] - x) <= kth:
        b += 1
    pos = sorted_pos[a:b]
    dist = np.abs(sorted_scores[a:b] - x)
    sel = dist <= kth
    if available is not None:
        sel &= available[pos]
    pos, dist = pos[sel], dist[sel]
    order = np.lexsort((pos, dist))[:k]
    return pos[order], dist[order]


def nn_match(scores, treatment, ratio: int = 4, with_replacement: bool = True,
             caliper: float | None = None) -> MatchSet:
    """Match each treated unit to its ``ratio`` nearest controls by |score difference|.

    Ties are broken by the lower control position. Without replacement, treated
    units are processed in position order and each control is used at most once.
    """
    scores = np.asarray(scores, dtype=float)
    d = np.asarray(treatment)
    treated = np.flatnonzero(d == 1)
    control = np.flatnonzero(d == 0)
    if len(treated) == 0:
        raise MatchingError("no treated units to match")
    if ratio < 1:
        raise MatchingError("ratio must be at least 1")
    need = ratio if with_replacement else ratio * len(treated)
    if len(control) < need:
        raise MatchingError(f"insufficient controls: need {need}, have {len(control)}")

    order = np.lexsort((control, scores[control]))
    sorted_pos = control[order]
    sorted_scores = scores[sorted_pos]
    m = len(sorted_scores)
    k = ratio

    out_c = np.full((len(treated), k), -1, dtype=np.int64)
    out_d = np.full((len(treated), k), np.nan)

    if with_replacement:
        xt = scores[treated]
        ins = np.searchsorted(sorted_scores, xt)
        # k-th smallest distance among the k neighbours on either side
        win = np.clip(ins[:, None] + np.arange(-k, k)[None, :], 0, m - 1)
        wdist = np.abs(sorted_scores[win] - xt[:, None])
        wdist[:, 1:][win[:, 1:] == win[:, :-1]] = np.inf
        kth = np.sort(wdist, axis=1)[:, k - 1]
        lo = np.searchsorted(sorted_scores, xt - kth, side="left")
        # clean rows: exactly k controls within kth and both outside neighbours strictly farther
        idx = np.clip(lo[:, None] + np.arange(k)[None, :], 0, m - 1)
        dist = np.abs(sorted_scores[idx] - xt[:, None])
        left_ok = (lo == 0) | (np.abs(sorted_scores[np.maximum(lo - 1, 0)] - xt) > kth)
        nxt = lo + k
        right_ok = (nxt >= m) | (np.abs(sorted_scores[np.minimum(nxt, m - 1)] - xt) > kth)
        clean = (lo + k <= m) & left_ok & right_ok & (dist <= kth[:, None]).all(axis=1)
        pos = sorted_pos[idx]
        o = np.lexsort((pos, dist), axis=1)
        out_c[clean] = np.take_along_axis(pos, o, axis=1)[clean]
        out_d[clean] = np.take_along_axis(dist, o, axis=1)[clean]
        for r in np.flatnonzero(~clean):
            p, dd = _nearest_exact(xt[r], sorted_scores, sorted_pos, k, None)
            out_c[r, :len(p)] = p
            out_d[r, :len(p)] = dd
    else:
        available = np.zeros(len(scores), dtype=bool)
        available[control] = True
        for r, t in enumerate(treated):
            p, dd = _nearest_exact(scores[t], sorted_scores, sorted_pos, k, available)
            out_c[r, :len(p)] = p
            out_d[r, :len(p)] = dd
            available[p] = False

    if caliper is not None:
        far = ~(out_d <= caliper)
        out_c[far] = -1
        out_d[far] = np.nan
    return MatchSet(treated=treated, controls=out_c, distances=out_d, ratio=ratio,
                    with_replacement=with_replacement, caliper=caliper)


@dataclass
class CateEstimate:
    estimate: float
    se: float
    n_treated: int
    n_controls: int

    def to_dict(self) -> dict:
        return {"estimate": self.estimate, "se": self.se, "n_treated": self.n_treated, "n_controls": self.n_controls}


def matched_differences(outcome, ms: MatchSet) -> tuple[np.ndarray, np.ndarray]:
    """Per-treated difference Y_t - mean(Y of matched controls), for units with >= 1 match."""
    y = np.asarray(outcome.outcome if isinstance(outcome, Dataset) else outcome, dtype=float)
    ok = ms.n_matched > 0
    ctrl = ms.controls[ok]
    cy = np.where(ctrl >= 0, y[np.clip(ctrl, 0, None)], 0.0)
    means = cy.sum(axis=1) / (ctrl >= 0).sum(axis=1)
    return y[ms.treated[ok]] - means, ok


def estimate_cate(outcome, ms: MatchSet, n_boot: int = 1000, seed: int = 0) -> CateEstimate:
    """Mean matched difference over treated units; SE from a paired bootstrap over treated units.

    ``outcome`` is a Dataset or an outcome array indexed like the match positions.
    """
    diffs, ok = matched_differences(outcome, ms)
    if len(diffs) == 0:
        raise MatchingError("empty match set")
    est = float(diffs.mean())
    if n_boot > 0 and len(diffs) > 1:
        rng = np.random.default_rng(seed)
        draws = rng.integers(0, len(diffs), size=(n_boot, len(diffs)))
        boot = diffs[draws].mean(axis=1)
        se = float(boot.std(ddof=1))
    else:
        se = np.nan
    used = np.unique(ms.controls[ok][ms.controls[ok] >= 0])
    return CateEstimate(estimate=est, se=se, n_treated=int(ok.sum()), n_controls=int(len(used)))


def normalized_difference(x_t, x_c, w_c=None) -> float:
    """(mean_t - mean_c) / sqrt((var_t + var_c) / 2); NaN when the pooled variance is zero.

    Control observations may carry frequency weights (match multiplicity).
    """
    x_t = np.asarray(x_t, dtype=float)
    x_c = np.asarray(x_c, dtype=float)
    if w_c is None:
        w_c = np.ones(len(x_c))
    w_c = np.asarray(w_c, dtype=float)
    m_t = x_t.mean()
    v_t = x_t.var(ddof=1) if len(x_t) > 1 else 0.0
    wsum = w_c.sum()
    m_c = np.sum(w_c * x_c) / wsum
    v_c = np.sum(w_c * (x_c - m_c) ** 2) / (wsum - 1) if wsum > 1 else 0.0
    pooled = (v_t + v_c) / 2.0
    if pooled <= 0.0:
        return np.nan
    return float((m_t - m_c) / np.sqrt(pooled))


@dataclass
class BalanceReport:
    table: pd.DataFrame
    formula: str = "(mean_treated - mean_control) / sqrt((var_treated + var_control) / 2)"

    @property
    def undefined(self) -> list[str]:
        return self.table.loc[self.table["before"].isna(), "covariate"].tolist()

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write(f"# normalized difference = {self.formula}; after-matching controls weighted by multiplicity\n")
            self.table.to_csv(fh, index=False, float_format=lambda v: repr(float(v)))


def balance(ds: Dataset, model, ms: MatchSet | None = None, score_name: str = "linearized_pscore") -> BalanceReport:
    """Normalized differences before (and after, given a match set) for each covariate and the linearized score."""
    t = ds.treated
    columns = {c: ds.covariates[c].to_numpy(float) for c in ds.covariates.columns}
    columns[score_name] = model.linearized
    rows = []
    if ms is not None:
        ok = ms.n_matched > 0
        matched_t = ms.treated[ok]
        mult = ms.control_multiplicity(ds.n)
        ctrl = np.flatnonzero(mult > 0)
    for name, x in columns.items():
        row = {"covariate": name, "before": normalized_difference(x[t], x[~t])}
        if ms is not None:
            row["after"] = normalized_difference(x[matched_t], x[ctrl], mult[ctrl])
        rows.append(row)
    cols = ["covariate", "before"] + (["after"] if ms is not None else [])
    return BalanceReport(pd.DataFrame(rows, columns=cols))
