"""Latent-index selection model with known effect surfaces.

Units get a propensity e(x) and a latent resistance u; they take treatment when
``e(x) - u >= 0``. Potential outcomes are built from a baseline model plus an
effect surface tau, which may depend on covariates or on (e, u). The hidden
truth table is returned separately and written to ``*.truth.csv`` so that no
estimator can read it by accident.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
from scipy.special import expit

from .dataset import Dataset

EFFECT_KINDS = ("constant", "step", "linear_eu")


@dataclass(frozen=True)
class EffectSurface:
    """tau as a function of covariates or of (e, u).

    constant:  tau = value
    step:      tau = below if x[covariate] < cut else above
    linear_eu: tau = value + slope_e * e + slope_u * u
    """

    kind: str = "constant"
    value: float = -0.2
    covariate: int = 0
    cut: float = 0.0
    below: float = -0.3
    above: float = -0.1
    slope_e: float = 0.0
    slope_u: float = 0.0

    def __post_init__(self):
        if self.kind not in EFFECT_KINDS:
            raise ValueError(f"unknown effect surface {self.kind!r}")

    def __call__(self, X: np.ndarray, e: np.ndarray, u: np.ndarray) -> np.ndarray:
        if self.kind == "constant":
            return np.full(len(e), float(self.value))
        if self.kind == "step":
            return np.where(X[:, self.covariate] < self.cut, self.below, self.above).astype(float)
        return self.value + self.slope_e * np.asarray(e) + self.slope_u * np.asarray(u)

    @property
    def depends_on_u(self) -> bool:
        return self.kind == "linear_eu" and self.slope_u != 0.0


@dataclass(frozen=True)
class DGPConfig:
    n_covariates: int = 4
    covariate_dist: str = "uniform"          # uniform on [-1, 1] | normal | binary
    propensity_intercept: float = 0.0
    propensity_coefs: tuple[float, ...] = (0.0, 0.5, 0.0, 0.0)
    propensity_constant: float | None = None  # overrides the logistic model
    resistance_fixed: float | None = None     # u ~ Uniform(0, 1) unless fixed
    effect: EffectSurface = field(default_factory=EffectSurface)
    baseline_intercept: float = 0.4
    baseline_coefs: tuple[float, ...] = (0.0, 0.05, 0.05, 0.0)
    baseline_u: float = 0.0                   # dependence of Y0 on u
    noise: float = 0.1
    effect_noise: float = 0.0

    def __post_init__(self):
        if self.covariate_dist not in ("uniform", "normal", "binary"):
            raise ValueError(f"unknown covariate distribution {self.covariate_dist!r}")
        if self.propensity_constant is None and len(self.propensity_coefs) != self.n_covariates:
            raise ValueError("propensity_coefs must have one entry per covariate")
        if len(self.baseline_coefs) != self.n_covariates:
            raise ValueError("baseline_coefs must have one entry per covariate")

    def propensity(self, X: np.ndarray) -> np.ndarray:
        if self.propensity_constant is not None:
            return np.full(X.shape[0], float(self.propensity_constant))
        return expit(self.propensity_intercept + X @ np.asarray(self.propensity_coefs, dtype=float))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "DGPConfig":
        raw = dict(raw)
        if "effect" in raw and isinstance(raw["effect"], dict):
            raw["effect"] = EffectSurface(**raw["effect"])
        for key in ("propensity_coefs", "baseline_coefs"):
            if key in raw:
                raw[key] = tuple(raw[key])
        return cls(**raw)


def step_dgp(noise: float = 0.1, confounding: float = 0.0) -> DGPConfig:
    """Step surface: tau = -0.3 where x1 < 0, else -0.1.

    Treatment depends on x2 and the baseline outcome on x3. ``confounding`` adds
    an x2 term to the baseline, which makes x2 a confounder.
    """
    return DGPConfig(
        n_covariates=4,
        propensity_coefs=(0.0, 0.5, 0.0, 0.0),
        effect=EffectSurface("step", covariate=0, cut=0.0, below=-0.3, above=-0.1),
        baseline_coefs=(0.0, confounding, 0.05, 0.0),
        noise=noise,
    )


def sample_covariates(config: DGPConfig, n: int, rng: np.random.Generator) -> np.ndarray:
    p = config.n_covariates
    if config.covariate_dist == "uniform":
        return rng.uniform(-1.0, 1.0, size=(n, p))
    if config.covariate_dist == "normal":
        return rng.standard_normal((n, p))
    return rng.integers(0, 2, size=(n, p)).astype(float)


def generate(config: DGPConfig, n: int, seed: int) -> tuple[Dataset, pd.DataFrame]:
    """Draw ``n`` units. Returns the observable dataset and the hidden truth table."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    X = sample_covariates(config, n, rng)
    e = config.propensity(X)
    if config.resistance_fixed is not None:
        u = np.full(n, float(config.resistance_fixed))
    else:
        u = rng.uniform(0.0, 1.0, size=n)
    d = (e - u >= 0).astype(float)

    y0 = (config.baseline_intercept + X @ np.asarray(config.baseline_coefs, dtype=float)
          + config.baseline_u * u + config.noise * rng.standard_normal(n))
    tau = config.effect(X, e, u)
    y1 = y0 + tau + config.effect_noise * rng.standard_normal(n)
    y = np.where(d == 1.0, y1, y0)

    ds = Dataset.from_arrays(X, d, y)
    truth = pd.DataFrame({"id": ds.unit_id, "e": e, "u": u, "y0": y0, "y1": y1, "tau": tau})
    return ds, truth


def true_mte_surface(config: DGPConfig, e_grid: Sequence[float], u_grid: Sequence[float],
                     restrict_to_treated: bool = False) -> np.ma.MaskedArray:
    """Effect surface over the (e, u) grid; rows index u, columns index e.

    With ``restrict_to_treated`` the untreated region ``e < u`` is masked. The
    diagonal ``e == u`` stays visible because units on it take treatment.
    """
    e_grid = np.asarray(e_grid, dtype=float)
    u_grid = np.asarray(u_grid, dtype=float)
    if ((e_grid <= 0) | (e_grid >= 1)).any() or ((u_grid <= 0) | (u_grid >= 1)).any():
        raise ValueError("grids must lie strictly inside (0, 1)")
    if config.effect.kind == "step":
        raise ValueError("a step-in-covariate surface is not a function of (e, u)")
    E, U = np.meshgrid(e_grid, u_grid)
    values = config.effect(np.empty((E.size, 0)), E.ravel(), U.ravel()).reshape(E.shape)
    mask = E < U if restrict_to_treated else np.zeros_like(values, dtype=bool)
    return np.ma.MaskedArray(values, mask=mask)


def surface_table(surface: np.ma.MaskedArray, e_grid, u_grid) -> pd.DataFrame:
    E, U = np.meshgrid(np.asarray(e_grid, float), np.asarray(u_grid, float))
    return pd.DataFrame({"e": E.ravel(), "u": U.ravel(),
                         "tau": surface.filled(np.nan).ravel(), "masked": np.ma.getmaskarray(surface).ravel()})


def write_synthetic(ds: Dataset, truth: pd.DataFrame, stem) -> tuple[Path, Path]:
    """Write ``<stem>.csv`` (observable) and ``<stem>.truth.csv`` (oracle only)."""
    from .dataset import write_csv

    stem = Path(stem)
    data_path = stem.with_name(stem.name + ".csv")
    truth_path = stem.with_name(stem.name + ".truth.csv")
    write_csv(ds, data_path)
    truth.to_csv(truth_path, index=False, float_format=lambda v: repr(float(v)))
    return data_path, truth_path
