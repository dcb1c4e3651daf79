"""Bias-formula sensitivity analysis for an unobserved binary confounder.

The bias is the product of gamma (outcome difference associated with the
confounder) and lambda (prevalence difference of the confounder between treated
and control units). Adjusted estimates and their intervals are shifted by the
bias; the interval width does not change.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd

Z_95 = 1.96


def bias(gamma: float, lam: float) -> float:
    return gamma * lam


def adjust(estimate: float, se: float, gamma: float, lam: float, z: float = Z_95) -> tuple[float, tuple[float, float]]:
    if se < 0:
        raise ValueError("standard error must be nonnegative")
    adjusted = estimate - bias(gamma, lam)
    return adjusted, (adjusted - z * se, adjusted + z * se)


@dataclass
class SensitivityGrid:
    rows: list[tuple[str, float, float]]
    gammas: list[float]
    lambdas: list[float]
    z: float = Z_95
    cells: pd.DataFrame = field(default_factory=pd.DataFrame)

    def to_csv(self, path, decimals: int = 3) -> None:
        frame = self.cells.copy()
        for col in ("base_estimate", "base_se", "cate", "ci_lower", "ci_upper"):
            frame[col] = frame[col].round(decimals)
        frame.to_csv(path, index=False)

    def table(self, decimals: int = 3) -> pd.DataFrame:
        """Display layout: partition, gamma, lambda, CATE and a formatted interval."""
        out = self.cells[["partition", "gamma", "lambda"]].copy()
        fmt = f"{{:.{decimals}f}}"
        out["CATE"] = self.cells["cate"].map(fmt.format)
        out["CI"] = [f"({fmt.format(lo)},{fmt.format(hi)})"
                     for lo, hi in zip(self.cells["ci_lower"], self.cells["ci_upper"])]
        return out


def sensitivity_grid(rows: Sequence[tuple[str, float, float]], gammas: Sequence[float],
                     lambdas: Sequence[float], z: float = Z_95) -> SensitivityGrid:
    """Cross every (name, estimate, se) row with every (gamma, lambda) pair.

    A cell is flagged ``crosses_zero`` when its adjusted interval contains 0.
    """
    rows = [(str(n), float(e), float(s)) for n, e, s in rows]
    if not rows or not len(gammas) or not len(lambdas):
        raise ValueError("rows, gammas and lambdas must be nonempty")
    records = []
    for name, est, se in rows:
        for g in gammas:
            for lam in lambdas:
                adj, (lo, hi) = adjust(est, se, g, lam, z)
                records.append({"partition": name, "gamma": float(g), "lambda": float(lam),
                                "base_estimate": est, "base_se": se, "bias": bias(g, lam),
                                "cate": adj, "ci_lower": lo, "ci_upper": hi,
                                "crosses_zero": bool(lo <= 0.0 <= hi)})
    return SensitivityGrid(rows=rows, gammas=list(map(float, gammas)), lambdas=list(map(float, lambdas)), z=z,
                           cells=pd.DataFrame(records))


def ci_width(grid: SensitivityGrid) -> np.ndarray:
    return (grid.cells["ci_upper"] - grid.cells["ci_lower"]).to_numpy()
