"""Shared fixtures-as-functions and independent oracles.

The oracles here are written from the formulas directly, without importing the
package's numerics, so agreement with the package is meaningful.
"""

from __future__ import annotations

import math
import statistics

import numpy as np

from hetfx.propensity import TermSet, fit_logit
from hetfx.synth import DGPConfig, generate, step_dgp


def fit_scores(ds, covariates=None):
    return fit_logit(ds, TermSet(baseline=list(covariates or ds.covariate_names)))


def step_sample(n, seed, **kw):
    """Clean step design: tau = -0.3 for x1 < 0, else -0.1; no confounding."""
    ds, truth = generate(step_dgp(**kw), n, seed)
    return ds, truth, fit_scores(ds)


def homogeneous_config(tau=-0.2, noise=0.1):
    from hetfx.synth import EffectSurface
    return DGPConfig(effect=EffectSurface("constant", value=tau), baseline_coefs=(0.0, 0.0, 0.05, 0.0), noise=noise)


# ------------------------------------------------------------- criterion oracle

def emse_oracle(labels, y, d, n_tr, n_es):
    """Sum over leaves of -n tau^2 / N_tr + (1/N_tr + 1/N_es)(S1^2/p + S0^2/(1-p))."""
    groups = {}
    for lab, yi, di in zip(labels, y, d):
        groups.setdefault(lab, ([], []))[0 if di else 1].append(float(yi))
    total = 0.0
    for treated, control in groups.values():
        n = len(treated) + len(control)
        p = len(treated) / n
        tau = statistics.fmean(treated) - statistics.fmean(control)
        s1 = statistics.variance(treated)
        s0 = statistics.variance(control)
        total += -n * tau * tau / n_tr + (1.0 / n_tr + 1.0 / n_es) * (s1 / p + s0 / (1.0 - p))
    return total


def brute_force_root(X, y, d, n_tr, n_es, min_t, min_c):
    """Every (covariate, midpoint) pair; returns (criterion, j, s) of the best admissible split or None.

    Ties (relative 1e-10) go to the lower covariate index, then the lower threshold.
    """
    lt, lc = max(min_t, 2), max(min_c, 2)
    best = None
    for j in range(X.shape[1]):
        values = sorted(set(X[:, j].tolist()))
        for a, b in zip(values[:-1], values[1:]):
            s = (a + b) / 2.0
            if s >= b:
                s = a
            left = X[:, j] <= s
            counts = [(d[m] == 1).sum() for m in (left, ~left)], [(d[m] == 0).sum() for m in (left, ~left)]
            if min(counts[0]) < lt or min(counts[1]) < lc:
                continue
            crit = emse_oracle(left.astype(int), y, d, n_tr, n_es)
            if best is None or crit < best[0] - 1e-10 * abs(best[0]):
                best = (crit, j, s)
    return best


# ------------------------------------------------------------- logistic oracle

def newton_oracle(X, d, iters=100):
    """Plain Newton iterations on the logistic log-likelihood using numpy only."""
    beta = np.zeros(X.shape[1])
    for _ in range(iters):
        p = 1.0 / (1.0 + np.exp(-X @ beta))
        grad = X.T @ (d - p)
        hess = (X * (p * (1 - p))[:, None]).T @ X
        step = np.linalg.solve(hess, grad)
        beta = beta + step
        if np.max(np.abs(step)) < 1e-14:
            break
    return beta


# ------------------------------------------------------------- matching oracle

def sort_all_matches(scores, treatment, ratio):
    """For each treated unit, sort every control by (distance, index) and keep the first ``ratio``."""
    controls = [j for j, t in enumerate(treatment) if not t]
    out = []
    for i, t in enumerate(treatment):
        if t:
            ranked = sorted(controls, key=lambda j: (abs(scores[i] - scores[j]), j))
            out.append(ranked[:ratio])
    return out


def round_half_away(x, digits=3):
    q = 10 ** digits
    return math.copysign(math.floor(abs(x) * q + 0.5) / q, x)
