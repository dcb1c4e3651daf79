"""Unit-level observational data: loading, validation, and missing-value preparation."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

MISSING_TOKENS = frozenset({"", "NA"})
KINDS = ("covariate", "treatment", "outcome", "weight", "id")
INDICATOR_SUFFIX = "_missing"


class DataError(ValueError):
    """Invalid input data. ``row`` is 1-based over data rows (header excluded)."""

    def __init__(self, message: str, row: int | None = None, column: str | None = None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.row = row
        self.column = column


@dataclass(frozen=True)
class ColumnSchema:
    name: str
    kind: str = "covariate"
    declared_range: tuple[float, float] | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown column kind {self.kind!r}; expected one of {KINDS}")


def validate_schema(schema: Sequence[ColumnSchema]) -> None:
    kinds = [c.kind for c in schema]
    names = [c.name for c in schema]
    if len(set(names)) != len(names):
        raise ValueError("duplicate column names in schema")
    for kind in ("treatment", "outcome"):
        if kinds.count(kind) != 1:
            raise ValueError(f"schema needs exactly one {kind} column, found {kinds.count(kind)}")
    for kind in ("weight", "id"):
        if kinds.count(kind) > 1:
            raise ValueError(f"schema allows at most one {kind} column")
    if "covariate" not in kinds:
        raise ValueError("schema needs at least one covariate column")


def schema_from_columns(columns: Iterable[str], treatment: str, outcome: str,
                        id: str | None = None, weight: str | None = None) -> list[ColumnSchema]:
    """Treat every column not named as treatment/outcome/id/weight as a covariate."""
    roles = {treatment: "treatment", outcome: "outcome"}
    if id is not None:
        roles[id] = "id"
    if weight is not None:
        roles[weight] = "weight"
    return [ColumnSchema(c, roles.get(c, "covariate")) for c in columns]


@dataclass(frozen=True, eq=False)
class Dataset:
    """Covariates, binary treatment D, outcome Y, optional weights.

    Before :func:`prepare`, covariate cells may be NaN and treatment/outcome may
    be NaN for units that will be dropped. ``missing_flags`` holds one 0/1 column
    per covariate that needed imputation (named ``<column>_missing``); the same
    columns are appended to ``covariates`` so estimators can condition on them.
    """

    unit_id: np.ndarray
    covariates: pd.DataFrame
    treatment: np.ndarray
    outcome: np.ndarray
    weight: np.ndarray
    missing_flags: pd.DataFrame = field(default_factory=pd.DataFrame)
    n_dropped: int = 0
    prepared: bool = False
    names: dict = field(default_factory=lambda: {"id": "id", "treatment": "d", "outcome": "y", "weight": None})

    def __post_init__(self):
        n = len(self.unit_id)
        for label, arr in (("covariates", self.covariates), ("treatment", self.treatment),
                           ("outcome", self.outcome), ("weight", self.weight)):
            if len(arr) != n:
                raise DataError(f"{label} has {len(arr)} rows, expected {n}")
        if len(pd.unique(self.unit_id)) != n:
            raise DataError("unit_id values are not unique")
        d = self.treatment[~np.isnan(self.treatment)]
        if not np.isin(d, (0.0, 1.0)).all():
            raise DataError("treatment values must be 0 or 1")
        y = self.outcome[~np.isnan(self.outcome)]
        if not np.isfinite(y).all():
            raise DataError("outcome values must be finite")
        if (self.weight < 0).any():
            raise DataError("weights must be nonnegative")

    @classmethod
    def from_arrays(cls, X, d, y, covariate_names: Sequence[str] | None = None,
                    unit_id=None, weight=None) -> "Dataset":
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        n = X.shape[0]
        if covariate_names is None:
            covariate_names = [f"x{j + 1}" for j in range(X.shape[1])]
        if unit_id is None:
            unit_id = np.arange(1, n + 1)
        return cls(
            unit_id=np.asarray(unit_id),
            covariates=pd.DataFrame(X, columns=list(covariate_names)),
            treatment=np.asarray(d, dtype=float),
            outcome=np.asarray(y, dtype=float),
            weight=np.ones(n) if weight is None else np.asarray(weight, dtype=float),
        )

    @property
    def n(self) -> int:
        return len(self.unit_id)

    @property
    def covariate_names(self) -> list[str]:
        return list(self.covariates.columns)

    @property
    def X(self) -> np.ndarray:
        return self.covariates.to_numpy(dtype=float)

    @property
    def d(self) -> np.ndarray:
        return self.treatment.astype(np.int8)

    @property
    def treated(self) -> np.ndarray:
        return self.treatment == 1.0

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        if rows.dtype == bool:
            rows = np.flatnonzero(rows)
        return replace(
            self,
            unit_id=self.unit_id[rows],
            covariates=self.covariates.iloc[rows].reset_index(drop=True),
            treatment=self.treatment[rows],
            outcome=self.outcome[rows],
            weight=self.weight[rows],
            missing_flags=self.missing_flags.iloc[rows].reset_index(drop=True)
            if len(self.missing_flags.columns) else self.missing_flags,
        )

    def equals(self, other: "Dataset") -> bool:
        return (
            np.array_equal(self.unit_id, other.unit_id)
            and self.covariates.equals(other.covariates)
            and np.array_equal(self.treatment, other.treatment, equal_nan=True)
            and np.array_equal(self.outcome, other.outcome, equal_nan=True)
            and np.array_equal(self.weight, other.weight)
            and self.missing_flags.equals(other.missing_flags)
        )


def _parse_float(text: str, row: int, column: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"unparseable numeric cell {text!r}", row, column) from None
    if not np.isfinite(value):
        raise DataError(f"non-finite numeric cell {text!r}", row, column)
    return value


def load_csv(path, schema: Sequence[ColumnSchema]) -> Dataset:
    """Read a UTF-8 CSV with a header row; empty or ``NA`` cells are missing."""
    validate_schema(schema)
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"input file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path} is empty") from None
        rows = list(reader)

    position = {name: i for i, name in enumerate(header)}
    for col in schema:
        if col.name not in position:
            raise DataError(f"missing column {col.name!r} in {path}")

    n = len(rows)
    values: dict[str, np.ndarray] = {}
    ids = None
    for col in schema:
        j = position[col.name]
        if col.kind == "id":
            ids = np.array([r[j] for r in rows], dtype=object)
            continue
        out = np.empty(n)
        for i, r in enumerate(rows, start=1):
            if len(r) != len(header):
                raise DataError(f"expected {len(header)} cells, found {len(r)}", i)
            cell = r[j].strip()
            if cell in MISSING_TOKENS:
                out[i - 1] = np.nan
                continue
            v = _parse_float(cell, i, col.name)
            if col.kind == "treatment" and v not in (0.0, 1.0):
                raise DataError(f"non-binary treatment cell {cell!r}", i, col.name)
            if col.declared_range is not None:
                lo, hi = col.declared_range
                if not lo <= v <= hi:
                    raise DataError(f"value {v} outside declared range [{lo}, {hi}]", i, col.name)
            out[i - 1] = v
        values[col.name] = out

    names = {c.kind: c.name for c in schema if c.kind != "covariate"}
    if ids is None:
        ids = np.arange(1, n + 1)
    else:
        try:
            ids = ids.astype(np.int64)
        except ValueError:
            ids = ids.astype(str)
    weight_name = names.get("weight")
    weight = values[weight_name] if weight_name else np.ones(n)
    if np.isnan(weight).any():
        raise DataError("missing weight cells are not supported", int(np.argmax(np.isnan(weight))) + 1, weight_name)
    covariate_names = [c.name for c in schema if c.kind == "covariate"]
    return Dataset(
        unit_id=ids,
        covariates=pd.DataFrame({c: values[c] for c in covariate_names}),
        treatment=values[names["treatment"]],
        outcome=values[names["outcome"]],
        weight=weight,
        names={"id": names.get("id", "id"), "treatment": names["treatment"],
               "outcome": names["outcome"], "weight": weight_name},
    )


def prepare(ds: Dataset, policy: str = "mean") -> Dataset:
    """Drop units missing D or Y, then mean-impute covariates with indicator flags.

    Indicator columns are appended only for columns that had missing cells, so a
    complete dataset passes through unchanged and the operation is idempotent.
    """
    if policy != "mean":
        raise ValueError(f"unsupported imputation policy {policy!r}; only 'mean' is built in")
    keep = ~(np.isnan(ds.treatment) | np.isnan(ds.outcome))
    n_drop = int((~keep).sum())
    if n_drop:
        logger.info("dropping %d units with missing treatment or outcome", n_drop)
        ds = ds.subset(keep)

    cov = ds.covariates.copy()
    flags = ds.missing_flags.copy() if len(ds.missing_flags.columns) else pd.DataFrame(index=cov.index)
    for name in list(cov.columns):
        miss = cov[name].isna().to_numpy()
        if not miss.any():
            continue
        if miss.all():
            raise DataError(f"covariate {name!r} is entirely missing; no mean exists", column=name)
        cov.loc[miss, name] = cov.loc[~miss, name].mean()
        flag = f"{name}{INDICATOR_SUFFIX}"
        cov[flag] = miss.astype(float)
        flags[flag] = miss.astype(np.int8)
    if not len(flags.columns):
        flags = pd.DataFrame()
    return replace(ds, covariates=cov, missing_flags=flags, n_dropped=ds.n_dropped + n_drop, prepared=True)


def write_csv(ds: Dataset, path) -> list[ColumnSchema]:
    """Write the dataset with full float precision; returns the schema to reload it."""
    names = ds.names
    frame = pd.DataFrame({names["id"]: ds.unit_id})
    for c in ds.covariates.columns:
        frame[c] = ds.covariates[c].to_numpy()
    frame[names["treatment"]] = ds.treatment
    frame[names["outcome"]] = ds.outcome
    schema = [ColumnSchema(names["id"], "id")]
    schema += [ColumnSchema(c, "covariate") for c in ds.covariates.columns]
    schema += [ColumnSchema(names["treatment"], "treatment"), ColumnSchema(names["outcome"], "outcome")]
    if names.get("weight"):
        frame[names["weight"]] = ds.weight
        schema.append(ColumnSchema(names["weight"], "weight"))
    frame.to_csv(path, index=False, na_rep="NA", float_format=lambda v: repr(float(v)))
    return schema


def to_json(ds: Dataset) -> str:
    """JSON export including imputation flags."""
    payload = {
        "n": ds.n,
        "n_dropped": ds.n_dropped,
        "prepared": ds.prepared,
        "names": ds.names,
        "unit_id": [x.item() if hasattr(x, "item") else x for x in ds.unit_id],
        "covariates": {c: ds.covariates[c].tolist() for c in ds.covariates.columns},
        "treatment": ds.treatment.tolist(),
        "outcome": ds.outcome.tolist(),
        "weight": ds.weight.tolist(),
        "missing_flags": {c: ds.missing_flags[c].astype(int).tolist() for c in ds.missing_flags.columns},
    }
    return json.dumps(payload, allow_nan=True)


def describe(ds: Dataset, columns: Sequence[str] | None = None) -> pd.DataFrame:
    """Weighted means and SDs by treatment group; weights are used only here."""
    columns = list(columns) if columns is not None else ds.covariate_names
    rows = []
    for name in columns + ["__outcome__"]:
        x = ds.outcome if name == "__outcome__" else ds.covariates[name].to_numpy(float)
        row = {"variable": ds.names["outcome"] if name == "__outcome__" else name}
        for label, mask in (("control", ~ds.treated), ("treated", ds.treated)):
            w = ds.weight[mask]
            m = np.average(x[mask], weights=w) if w.sum() > 0 else np.nan
            v = np.average((x[mask] - m) ** 2, weights=w) if w.sum() > 0 else np.nan
            row[f"mean_{label}"] = m
            row[f"sd_{label}"] = np.sqrt(v)
        rows.append(row)
    total_w = ds.weight.sum()
    rows.append({"variable": "weighted_share", "mean_control": ds.weight[~ds.treated].sum() / total_w,
                 "mean_treated": ds.weight[ds.treated].sum() / total_w})
    rows.append({"variable": "N", "mean_control": float((~ds.treated).sum()), "mean_treated": float(ds.treated.sum())})
    return pd.DataFrame(rows)
