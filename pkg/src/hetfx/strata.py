"""Covariate- and propensity-partitioned CATEs and pairwise tests between subgroup estimates."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd

from .dataset import Dataset
from .matching import estimate_cate, nn_match

DEFAULT_PROPENSITY_EDGES = (0.0, 0.2, 0.5, 1.0)


@dataclass(frozen=True)
class StrataSpec:
    """How to cut units into strata.

    source is ``"propensity"`` (bins on the raw score), ``"covariate"`` (bins on
    a named covariate) or ``"categorical"`` (one stratum per listed level).
    ``closed="left"`` gives [a, b) bins with the last bin closed; ``closed="right"``
    gives (a, b] bins with the first closed, which sends values equal to a cut
    point to the lower stratum.
    """

    source: str
    bin_edges: tuple[float, ...] = ()
    labels: tuple[str, ...] = ()
    covariate: str | None = None
    closed: str = "left"
    levels: tuple[float, ...] = ()

    def __post_init__(self):
        if self.source not in ("propensity", "covariate", "categorical"):
            raise ValueError(f"unknown strata source {self.source!r}")
        if self.source != "propensity" and not self.covariate:
            raise ValueError("covariate strata need a covariate name")
        if self.source == "categorical":
            if not self.levels:
                raise ValueError("categorical strata need levels")
            n_strata = len(self.levels)
        else:
            edges = np.asarray(self.bin_edges, dtype=float)
            if len(edges) < 2 or not (np.diff(edges) > 0).all():
                raise ValueError("bin edges must be strictly increasing with at least two entries")
            n_strata = len(edges) - 1
        if self.closed not in ("left", "right"):
            raise ValueError("closed must be 'left' or 'right'")
        if self.labels and len(self.labels) != n_strata:
            raise ValueError(f"expected {n_strata} labels, got {len(self.labels)}")

    @property
    def names(self) -> list[str]:
        if self.labels:
            return list(self.labels)
        if self.source == "categorical":
            return [str(v) for v in self.levels]
        return [str(i + 1) for i in range(len(self.bin_edges) - 1)]

    @property
    def title(self) -> str:
        return "propensity score" if self.source == "propensity" else str(self.covariate)


def default_propensity_spec() -> StrataSpec:
    return StrataSpec("propensity", DEFAULT_PROPENSITY_EDGES, ("low", "mid", "high"), closed="left")


def tercile_spec(values, covariate: str, labels=("low", "mid", "high")) -> StrataSpec:
    """Cut points at the 1/3 and 2/3 order statistics; ties at a cut go to the lower stratum."""
    v = np.asarray(values, dtype=float)
    cuts = np.quantile(v, [1 / 3, 2 / 3], method="inverted_cdf")
    edges = [float(v.min())] + [float(c) for c in cuts] + [float(v.max())]
    # degenerate distributions can repeat a cut; nudge so edges stay increasing
    for i in range(1, len(edges)):
        if edges[i] <= edges[i - 1]:
            edges[i] = np.nextafter(edges[i - 1], np.inf)
    return StrataSpec("covariate", tuple(edges), tuple(labels), covariate=covariate, closed="right")


def stratify(ds: Dataset, model, spec: StrataSpec) -> np.ndarray:
    """Stratum index per unit; units outside the edges get -1 (flagged upstream)."""
    if spec.source == "propensity":
        x = np.asarray(model.scores, dtype=float)
    else:
        x = ds.covariates[spec.covariate].to_numpy(float)
    if spec.source == "categorical":
        out = np.full(len(x), -1)
        for i, level in enumerate(spec.levels):
            out[x == level] = i
        return out
    edges = np.asarray(spec.bin_edges, dtype=float)
    k = len(edges) - 1
    if spec.closed == "left":
        idx = np.searchsorted(edges, x, side="right") - 1
        idx[x == edges[-1]] = k - 1
    else:
        idx = np.searchsorted(edges, x, side="left") - 1
        idx[x == edges[0]] = 0
    idx[(x < edges[0]) | (x > edges[-1])] = -1
    return idx


@dataclass
class StratumResult:
    label: str
    n: int
    n_treated: int
    n_control: int
    estimable: bool
    estimate: float = np.nan
    se: float = np.nan
    note: str = ""


@dataclass
class StrataResult:
    spec: StrataSpec
    rows: list[StratumResult] = field(default_factory=list)
    unassigned: int = 0

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame([vars(r) for r in self.rows])

    @property
    def empty_strata(self) -> list[str]:
        return [r.label for r in self.rows if r.n == 0]


def strata_cates(ds: Dataset, model, spec: StrataSpec, ratio: int = 4, n_boot: int = 1000,
                 seed: int = 0) -> StrataResult:
    """Matching estimate within each stratum, each stratum matched independently.

    Every stratum's bootstrap uses ``seed`` so a single all-covering stratum
    reproduces the whole-sample estimate exactly.
    """
    labels = stratify(ds, model, spec)
    lin = model.linearized
    d = ds.d
    result = StrataResult(spec=spec, unassigned=int((labels < 0).sum()))
    for i, name in enumerate(spec.names):
        rows = np.flatnonzero(labels == i)
        nt = int(d[rows].sum())
        nc = len(rows) - nt
        r = StratumResult(label=name, n=len(rows), n_treated=nt, n_control=nc, estimable=False)
        if len(rows) == 0:
            r.note = "empty stratum"
        elif nt < 1 or nc < ratio:
            r.note = f"needs >= 1 treated and >= {ratio} controls"
        else:
            ms = nn_match(lin[rows], d[rows], ratio=ratio)
            est = estimate_cate(ds.outcome[rows], ms, n_boot=n_boot, seed=seed)
            r.estimable, r.estimate, r.se = True, est.estimate, est.se
        result.rows.append(r)
    return result


def pairwise_tests(estimates: Sequence[float], ses: Sequence[float]) -> np.ndarray:
    """z_ij = (est_i - est_j) / sqrt(se_i^2 + se_j^2); antisymmetric with a zero diagonal."""
    est = np.asarray(estimates, dtype=float)
    se = np.asarray(ses, dtype=float)
    if est.shape != se.shape:
        raise ValueError("estimates and standard errors must align")
    if (se < 0).any():
        raise ValueError("standard errors must be nonnegative")
    denom = np.sqrt(se[:, None] ** 2 + se[None, :] ** 2)
    off = ~np.eye(len(est), dtype=bool)
    if (denom[off] == 0).any():
        i, j = np.argwhere((denom == 0) & off)[0]
        raise ValueError(f"zero standard errors on both sides of pair ({i}, {j})")
    z = np.zeros((len(est), len(est)))
    z[off] = ((est[:, None] - est[None, :])[off]) / denom[off]
    return z


def lower_triangle_frame(z: np.ndarray, labels: Sequence[str]) -> pd.DataFrame:
    """Lower-triangular layout used for pairwise test tables (row minus column)."""
    labels = list(labels)
    out = pd.DataFrame(np.nan, index=labels, columns=labels)
    for i in range(len(labels)):
        for j in range(i):
            out.iloc[i, j] = z[i, j]
    return out
