"""Propensity scores: logistic MLE, iterative term selection, common-support trimming."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from typing import Sequence

import numpy as np
import pandas as pd
import scipy.linalg
from scipy.special import expit

from .dataset import Dataset

logger = logging.getLogger(__name__)

GRAD_TOL = 1e-8
STEP_TOL = 1e-10
MAX_ITER = 100
# near the optimum a good Newton step can change the log-likelihood by less than
# its rounding error; drops this small are treated as ties
LL_RTOL = 1e-12
# |linear predictor| beyond this at termination means fitted scores of 0 or 1
SEPARATION_ETA = 30.0

Term = tuple  # ("x1",) linear, ("x1", "x1") square, ("x1", "x2") interaction


class SeparationError(RuntimeError):
    def __init__(self, message: str, term: str | None = None):
        super().__init__(message)
        self.term = term


class RankDeficiencyError(RuntimeError):
    def __init__(self, message: str, columns: Sequence[str] = ()):
        super().__init__(message)
        self.columns = list(columns)


def term_name(term: Term) -> str:
    if len(term) == 1:
        return term[0]
    if term[0] == term[1]:
        return f"{term[0]}^2"
    return f"{term[0]}:{term[1]}"


def parse_term(name: str) -> Term:
    if name.endswith("^2"):
        base = name[:-2]
        return (base, base)
    if ":" in name:
        a, b = name.split(":", 1)
        return (a, b)
    return (name,)


@dataclass
class TermSet:
    baseline: list[str]
    linear: list[str] = field(default_factory=list)
    quadratic: list[tuple[str, str]] = field(default_factory=list)
    c_linear: float = 1.0
    c_quadratic: float = 1.96
    log: list[dict] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.c_linear <= 0 or self.c_quadratic <= 0:
            raise ValueError("selection thresholds must be positive")
        names = [term_name(t) for t in self.terms]
        if len(set(names)) != len(names):
            raise ValueError("duplicate terms in TermSet")

    @property
    def linear_terms(self) -> list[str]:
        return list(self.baseline) + list(self.linear)

    @property
    def terms(self) -> list[Term]:
        return [(b,) for b in self.baseline] + [(v,) for v in self.linear] + [tuple(q) for q in self.quadratic]

    def to_dict(self) -> dict:
        return {"baseline": list(self.baseline), "linear": list(self.linear),
                "quadratic": [list(q) for q in self.quadratic],
                "c_linear": self.c_linear, "c_quadratic": self.c_quadratic}

    def log_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.log, columns=["stage", "round", "term", "loglik", "lr", "z", "accepted", "status"])


def design_matrix(covariates: pd.DataFrame, terms: Sequence[Term]) -> tuple[np.ndarray, list[str]]:
    """Intercept column followed by one column per term."""
    n = len(covariates)
    cols = [np.ones(n)]
    names = ["(intercept)"]
    for t in terms:
        col = covariates[t[0]].to_numpy(dtype=float)
        if len(t) == 2:
            col = col * covariates[t[1]].to_numpy(dtype=float)
        cols.append(col)
        names.append(term_name(t))
    return np.column_stack(cols), names


def loglik(beta: np.ndarray, X: np.ndarray, d: np.ndarray) -> float:
    eta = X @ beta
    return float(np.sum(d * eta - np.logaddexp(0.0, eta)))


def score(beta: np.ndarray, X: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Gradient of the log-likelihood."""
    return X.T @ (d - expit(X @ beta))


def information(beta: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Negative Hessian of the log-likelihood."""
    p = expit(X @ beta)
    w = p * (1.0 - p)
    return (X * w[:, None]).T @ X


@dataclass
class NewtonResult:
    beta: np.ndarray
    loglik: float
    n_iter: int
    converged: bool
    trace: list[float]


def newton_logit(X: np.ndarray, d: np.ndarray, beta0: np.ndarray | None = None,
                 grad_tol: float = GRAD_TOL, step_tol: float = STEP_TOL,
                 max_iter: int = MAX_ITER) -> NewtonResult:
    """Newton-Raphson with step halving.

    The log-likelihood trace never decreases by more than ``LL_RTOL`` relative,
    the rounding level of a sum over many units.
    """
    beta = np.zeros(X.shape[1]) if beta0 is None else np.asarray(beta0, dtype=float).copy()
    ll = loglik(beta, X, d)
    trace = [ll]
    for it in range(1, max_iter + 1):
        g = score(beta, X, d)
        if np.max(np.abs(g)) < grad_tol:
            return NewtonResult(beta, ll, it - 1, True, trace)
        H = information(beta, X)
        try:
            step = scipy.linalg.solve(H, g, assume_a="pos")
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
            step = np.linalg.lstsq(H, g, rcond=None)[0]
        t = 1.0
        while True:
            cand = beta + t * step
            ll_new = loglik(cand, X, d)
            if ll_new >= ll - LL_RTOL * max(1.0, abs(ll)) or t < 1e-12:
                break
            t *= 0.5
        if ll_new < ll - LL_RTOL * max(1.0, abs(ll)):
            return NewtonResult(beta, ll, it, False, trace)
        moved = np.max(np.abs(t * step))
        beta, ll = cand, ll_new
        trace.append(ll)
        if moved < step_tol:
            converged = np.max(np.abs(score(beta, X, d))) < 1e-6
            return NewtonResult(beta, ll, it, converged, trace)
    return NewtonResult(beta, ll, max_iter, False, trace)


@dataclass
class PropensityModel:
    terms: TermSet
    coef_names: list[str]
    coefficients: np.ndarray
    std_errors: np.ndarray
    loglik: float
    scores: np.ndarray
    n_iter: int
    dropped_columns: list[str] = field(default_factory=list)
    support_bounds: tuple[float, float] | None = None

    @property
    def linearized(self) -> np.ndarray:
        return np.log(self.scores / (1.0 - self.scores))

    def predict(self, covariates: pd.DataFrame) -> np.ndarray:
        X, names = design_matrix(covariates, self.terms.terms)
        keep = [i for i, nm in enumerate(names) if nm not in self.dropped_columns]
        return expit(X[:, keep] @ self.coefficients)

    def restrict(self, rows) -> "PropensityModel":
        """Copy with scores restricted to ``rows`` (boolean mask or indices)."""
        from dataclasses import replace
        return replace(self, scores=self.scores[rows])

    def coefficient_table(self) -> pd.DataFrame:
        return pd.DataFrame({"term": self.coef_names, "estimate": self.coefficients, "std_error": self.std_errors})

    def to_json(self) -> str:
        payload = {
            "terms": self.terms.to_dict(),
            "coefficients": dict(zip(self.coef_names, self.coefficients.tolist())),
            "std_errors": dict(zip(self.coef_names, self.std_errors.tolist())),
            "loglik": self.loglik,
            "n_iter": self.n_iter,
            "dropped_columns": self.dropped_columns,
            "support_bounds": list(self.support_bounds) if self.support_bounds else None,
        }
        return json.dumps(payload, indent=2, sort_keys=True)


def _drop_constant(X: np.ndarray, names: list[str]) -> tuple[np.ndarray, list[str], list[str]]:
    keep, dropped = [0], []
    for j in range(1, X.shape[1]):
        if np.ptp(X[:, j]) == 0.0:
            dropped.append(names[j])
        else:
            keep.append(j)
    return X[:, keep], [names[j] for j in keep], dropped


def _check_rank(X: np.ndarray, names: list[str]) -> None:
    scale = np.maximum(np.abs(X).max(axis=0), 1e-300)
    Xs = X / scale
    _, R, piv = scipy.linalg.qr(Xs, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = diag.max() * max(X.shape) * np.finfo(float).eps * 10
    rank = int((diag > tol).sum())
    if rank < X.shape[1]:
        bad = [names[j] for j in piv[rank:]]
        raise RankDeficiencyError(f"design matrix is rank deficient; collinear columns: {bad}", bad)


def _fit_arrays(X: np.ndarray, d: np.ndarray,
                names: list[str]) -> tuple[NewtonResult, list[str], np.ndarray, list[str]]:
    if d.min() == d.max():
        raise SeparationError("treatment is constant; the likelihood has no finite maximum", None)
    X, names, dropped = _drop_constant(X, names)
    if dropped:
        logger.info("dropping constant columns: %s", dropped)
    _check_rank(X, names)
    res = newton_logit(X, d)
    eta = X @ res.beta
    if not res.converged or np.max(np.abs(eta)) > SEPARATION_ETA:
        sd = X[:, 1:].std(axis=0) if X.shape[1] > 1 else np.array([])
        if len(sd):
            j = int(np.argmax(np.abs(res.beta[1:]) * sd)) + 1
            culprit = names[j]
        else:
            culprit = names[0]
        raise SeparationError(f"perfect or quasi-complete separation; largest standardized coefficient on {culprit!r}",
                              culprit)
    return res, names, X, dropped


def fit_logit(ds: Dataset, terms: TermSet) -> PropensityModel:
    """Maximum-likelihood logit of treatment on the term set."""
    X, names = design_matrix(ds.covariates, terms.terms)
    d = ds.treatment.astype(float)
    res, names, X, dropped = _fit_arrays(X, d, names)
    cov = np.linalg.pinv(information(res.beta, X))
    scores = expit(X @ res.beta)
    return PropensityModel(
        terms=terms,
        coef_names=names,
        coefficients=res.beta,
        std_errors=np.sqrt(np.clip(np.diag(cov), 0, None)),
        loglik=res.loglik,
        scores=scores,
        n_iter=res.n_iter,
        dropped_columns=dropped,
    )


def quadratic_candidates(linear_terms: Sequence[str]) -> list[tuple[str, str]]:
    """All K(K+1)/2 squares and pairwise interactions of the linear terms."""
    return list(combinations_with_replacement(list(linear_terms), 2))


def _term_column(covariates: pd.DataFrame, term: Term) -> np.ndarray:
    col = covariates[term[0]].to_numpy(dtype=float)
    if len(term) == 2:
        col = col * covariates[term[1]].to_numpy(dtype=float)
    return col


def select_terms(ds: Dataset, baseline: Sequence[str], c_linear: float = 1.0, c_quadratic: float = 1.96,
                 candidates: Sequence[str] | None = None, threads: int = 1) -> TermSet:
    """Iterative likelihood-ratio term selection.

    Stage 1 fits the baseline model. Stage 2 repeatedly adds the remaining linear
    covariate with the largest LR statistic while sqrt(LR) exceeds ``c_linear``.
    Stage 3 does the same over squares and interactions of the selected linear
    terms with threshold ``c_quadratic``. Ties go to the earlier candidate.
    Every fitted candidate is recorded in ``TermSet.log``.
    """
    baseline = list(baseline)
    missing = [b for b in baseline if b not in ds.covariates.columns]
    if missing:
        raise KeyError(f"baseline covariates not in dataset: {missing}")
    if candidates is None:
        candidates = [c for c in ds.covariate_names if c not in baseline]
    d = ds.treatment.astype(float)
    cov = ds.covariates
    log: list[dict] = []

    X0, names0 = design_matrix(cov, [(b,) for b in baseline])
    res0, _, _, _ = _fit_arrays(X0, d, names0)
    log.append({"stage": "baseline", "round": 0, "term": "+".join(baseline) or "(intercept)",
                "loglik": res0.loglik, "lr": np.nan, "z": np.nan, "accepted": True, "status": "ok"})

    selected: list[Term] = [(b,) for b in baseline]
    current_ll = res0.loglik

    def fit_candidate(term: Term):
        X, names = design_matrix(cov, selected + [term])
        try:
            res, _, _, dropped = _fit_arrays(X, d, names)
        except (SeparationError, RankDeficiencyError) as exc:
            return None, f"failed: {exc}"
        if dropped:
            return None, f"failed: constant column {dropped}"
        return res.loglik, "ok"

    def run_stage(stage: str, pool: list[Term], threshold: float) -> None:
        nonlocal current_ll
        pool = list(pool)
        existing = [_term_column(cov, t) for t in selected]
        # squares of binary covariates duplicate an existing column
        keep = []
        for t in pool:
            col = _term_column(cov, t)
            if any(np.array_equal(col, e) for e in existing):
                log.append({"stage": stage, "round": 0, "term": term_name(t), "loglik": np.nan, "lr": np.nan,
                            "z": np.nan, "accepted": False, "status": "redundant: duplicates a model column"})
            else:
                keep.append(t)
        pool = keep
        rnd = 0
        while pool:
            rnd += 1
            if threads > 1:
                with ThreadPoolExecutor(max_workers=threads) as ex:
                    results = list(ex.map(fit_candidate, pool))
            else:
                results = [fit_candidate(t) for t in pool]
            best, best_lr = None, -np.inf
            failed = []
            for t, (ll, status) in zip(pool, results):
                if ll is None:
                    log.append({"stage": stage, "round": rnd, "term": term_name(t), "loglik": np.nan, "lr": np.nan,
                                "z": np.nan, "accepted": False, "status": status})
                    failed.append(t)
                    continue
                lr = max(2.0 * (ll - current_ll), 0.0)
                log.append({"stage": stage, "round": rnd, "term": term_name(t), "loglik": ll, "lr": lr,
                            "z": float(np.sqrt(lr)), "accepted": False, "status": "ok"})
                if lr > best_lr:
                    best, best_lr, best_ll = t, lr, ll
            pool = [t for t in pool if t not in failed]
            if best is None or np.sqrt(best_lr) <= threshold:
                break
            for entry in reversed(log):
                if entry["round"] == rnd and entry["term"] == term_name(best) and entry["stage"] == stage:
                    entry["accepted"] = True
                    break
            selected.append(best)
            current_ll = best_ll
            pool.remove(best)

    run_stage("linear", [(c,) for c in candidates], c_linear)
    linear_names = [t[0] for t in selected]
    run_stage("quadratic", quadratic_candidates(linear_names), c_quadratic)

    extra_linear = [t[0] for t in selected if len(t) == 1 and t[0] not in baseline]
    quadratic = [tuple(t) for t in selected if len(t) == 2]
    return TermSet(baseline=baseline, linear=extra_linear, quadratic=quadratic,
                   c_linear=c_linear, c_quadratic=c_quadratic, log=log)


def linearized_score(e):
    """log(e / (1 - e)); e must lie strictly inside (0, 1)."""
    arr = np.asarray(e, dtype=float)
    if ((arr <= 0.0) | (arr >= 1.0)).any():
        raise ValueError("propensity scores must lie strictly inside (0, 1)")
    out = np.log(arr / (1.0 - arr))
    return float(out) if np.ndim(e) == 0 else out


@dataclass
class TrimReport:
    keep: np.ndarray
    lower: float
    upper: float
    n_before: int
    n_after: int
    dropped_treated: int
    dropped_control: int

    def to_dict(self) -> dict:
        return {"lower": self.lower, "upper": self.upper, "n_before": self.n_before, "n_after": self.n_after,
                "dropped_treated": self.dropped_treated, "dropped_control": self.dropped_control}


def trim_common_support(ds: Dataset, model: PropensityModel) -> tuple[Dataset, TrimReport]:
    """Drop treated units above the highest control score and controls below the lowest treated score.

    Records the bounds on ``model.support_bounds``. Use ``model.restrict(report.keep)``
    to align the scores with the trimmed dataset.
    """
    e = model.scores
    if len(e) != ds.n:
        raise ValueError("model scores are not aligned with the dataset rows")
    t = ds.treated
    if not t.any() or t.all():
        raise ValueError("both treated and control units are required for trimming")
    upper = float(e[~t].max())
    lower = float(e[t].min())
    keep = ~((t & (e > upper)) | (~t & (e < lower)))
    if not (keep & t).any() or not (keep & ~t).any():
        raise ValueError("trimming left an empty treated or control group")
    model.support_bounds = (lower, upper)
    report = TrimReport(keep=keep, lower=lower, upper=upper, n_before=ds.n, n_after=int(keep.sum()),
                        dropped_treated=int((t & ~keep).sum()), dropped_control=int((~t & ~keep).sum()))
    return ds.subset(keep), report
