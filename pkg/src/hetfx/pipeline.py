"""End-to-end workflow driven by one JSON config.

Stages run in a fixed order: propensity (fit, select, trim), match, strata,
tree, forest, sensitivity. Each stage only sees the prepared dataset and what
earlier stages produced. Every artifact is recorded in ``manifest.json`` with
its SHA-256 so reruns can be compared byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable

import numpy as np
import pandas as pd

from . import _seeding
from .causal_tree import TreeConfig, export_tree, fit_causal_tree, leaf_rows, leaf_table, stability_analysis
from .dataset import Dataset, describe, load_csv, prepare, schema_from_columns
from .forest import ForestConfig, forest_to_json, grow_forest, ite_quartile_summary, predict_ite, variable_importance
from .matching import balance, estimate_cate, nn_match
from .propensity import TermSet, fit_logit, select_terms, trim_common_support
from .sensitivity import sensitivity_grid
from .strata import (DEFAULT_PROPENSITY_EDGES, StrataSpec, lower_triangle_frame, pairwise_tests, strata_cates,
                     stratify, tercile_spec)
from .synth import DGPConfig, generate, step_dgp, write_synthetic

logger = logging.getLogger(__name__)

STAGES = ("propensity", "match", "strata", "tree", "forest", "sensitivity")
TOP_LEVEL_KEYS = {"seed", "input", "synth", "output", "missing", "propensity", "trim", "matching", "strata", "tree",
                  "forest", "sensitivity", "stages"}
TREE_EXTRA_KEYS = {"stability_reps"}
FOREST_EXTRA_KEYS = {"quartile_covariates"}
SEED_TREE = 11
SEED_FOREST = 12
SEED_MATCH = 13


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage '{stage}' failed: {message}")
        self.stage = stage


@dataclass
class RunConfig:
    seed: int
    output: Path
    base_dir: Path
    input: dict | None = None
    synth: dict | None = None
    missing: str = "mean"
    propensity: dict = field(default_factory=dict)
    trim: bool = True
    matching: dict = field(default_factory=dict)
    strata: list[dict] = field(default_factory=list)
    tree: dict = field(default_factory=dict)
    forest: dict = field(default_factory=dict)
    sensitivity: dict = field(default_factory=dict)
    stages: list[str] = field(default_factory=lambda: list(STAGES))

    def resolve(self, path: str | Path) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p


def bundled_demo_config() -> Path:
    return Path(str(resources.files("hetfx") / "data" / "demo.json"))


def load_config(path, seed: int | None = None, output: str | Path | None = None) -> RunConfig:
    """Parse and validate a config file; ``seed`` and ``output`` override the file."""
    path = Path(path)
    if not path.exists():
        if path.name in ("demo", "demo.json"):
            path = bundled_demo_config()
        else:
            raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    return config_from_dict(raw, path.parent, seed=seed, output=output)


def config_from_dict(raw: dict, base_dir: Path | str = ".", seed: int | None = None,
                     output: str | Path | None = None) -> RunConfig:
    unknown = set(raw) - TOP_LEVEL_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    seed = raw.get("seed") if seed is None else seed
    if seed is None:
        raise ConfigError("a seed is required (config 'seed' or --seed)")
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed must be a nonnegative integer")
    base_dir = Path(base_dir)
    out = output if output is not None else raw.get("output", "hetfx-out")
    cfg = RunConfig(seed=seed, output=Path(out) if output is not None else base_dir / out, base_dir=base_dir,
                    input=raw.get("input"), synth=raw.get("synth"), missing=raw.get("missing", "mean"),
                    propensity=raw.get("propensity", {}), trim=raw.get("trim", True),
                    matching=raw.get("matching", {}), strata=raw.get("strata", []), tree=raw.get("tree", {}),
                    forest=raw.get("forest", {}), sensitivity=raw.get("sensitivity", {}),
                    stages=raw.get("stages", list(STAGES)))
    bad = [s for s in cfg.stages if s not in STAGES]
    if bad:
        raise ConfigError(f"unknown stages: {bad}")
    if cfg.input is not None and cfg.synth is not None:
        raise ConfigError("give either 'input' or 'synth', not both")
    if cfg.input is not None:
        for key in ("path", "treatment", "outcome"):
            if key not in cfg.input:
                raise ConfigError(f"input.{key} is required")
    try:
        TreeConfig.from_dict({k: v for k, v in cfg.tree.items() if k not in TREE_EXTRA_KEYS})
        ForestConfig.from_dict({k: v for k, v in cfg.forest.items() if k not in FOREST_EXTRA_KEYS})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid tree or forest settings: {exc}") from None
    return cfg


# ---------------------------------------------------------------- artifacts

def _float(v) -> str:
    return repr(float(v))


@dataclass
class Manifest:
    output: Path
    entries: list[dict] = field(default_factory=list)

    def _record(self, name: str, stage: str, data: bytes) -> Path:
        path = self.output / name
        path.write_bytes(data)
        self.entries.append({"file": name, "stage": stage, "sha256": hashlib.sha256(data).hexdigest()})
        return path

    def text(self, name: str, stage: str, text: str) -> Path:
        return self._record(name, stage, text.encode("utf-8"))

    def json(self, name: str, stage: str, payload: Any) -> Path:
        return self.text(name, stage, json.dumps(payload, indent=2, sort_keys=True, default=_jsonable) + "\n")

    def csv(self, name: str, stage: str, frame: pd.DataFrame, index: bool = False, header_note: str = "") -> Path:
        body = frame.to_csv(index=index, float_format=_float, lineterminator="\n")
        return self.text(name, stage, (f"# {header_note}\n" if header_note else "") + body)

    def file(self, path: Path, stage: str) -> None:
        data = path.read_bytes()
        self.entries.append({"file": path.name, "stage": stage, "sha256": hashlib.sha256(data).hexdigest()})

    def write(self) -> Path:
        path = self.output / "manifest.json"
        path.write_text(json.dumps({"artifacts": self.entries}, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    @property
    def files(self) -> list[str]:
        return [e["file"] for e in self.entries]


def _jsonable(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, Path):
        return str(v)
    raise TypeError(f"cannot serialize {type(v).__name__}")


# ---------------------------------------------------------------- stages

@dataclass
class Context:
    cfg: RunConfig
    manifest: Manifest
    threads: int = 1
    ds: Dataset | None = None
    model: Any = None
    rows: list[tuple[str, float, float]] = field(default_factory=list)


def _load_data(ctx: Context) -> None:
    cfg = ctx.cfg
    if cfg.synth is not None:
        n = int(cfg.synth.get("n", 2000))
        if "dgp" in cfg.synth:
            dgp = DGPConfig.from_dict(cfg.synth["dgp"])
        else:
            dgp = step_dgp(**cfg.synth.get("step", {}))
        ds, _ = generate(dgp, n, int(cfg.synth.get("seed", cfg.seed)))
    elif cfg.input is not None:
        inp = cfg.input
        path = cfg.resolve(inp["path"])
        if not path.exists():
            raise FileNotFoundError(f"input file not found: {path}")
        header = pd.read_csv(path, nrows=0).columns.tolist()
        schema = schema_from_columns(header, inp["treatment"], inp["outcome"], id=inp.get("id"),
                                     weight=inp.get("weight"))
        if "covariates" in inp:
            keep = set(inp["covariates"]) | {inp["treatment"], inp["outcome"], inp.get("id"), inp.get("weight")}
            schema = [c for c in schema if c.name in keep]
        ds = load_csv(path, schema)
    else:
        raise ConfigError("config needs an 'input' or a 'synth' block")
    ctx.ds = prepare(ds, cfg.missing)
    ctx.manifest.csv("data_summary.csv", "data", describe(ctx.ds))


def stage_propensity(ctx: Context) -> None:
    cfg, ds = ctx.cfg, ctx.ds
    pc = cfg.propensity
    baseline = pc.get("baseline", ds.covariate_names)
    unknown = [c for c in list(baseline) + list(pc.get("candidates") or []) if c not in ds.covariate_names]
    if unknown:
        raise ValueError(f"unknown covariates in propensity settings: {unknown}")
    if pc.get("select", False):
        terms = select_terms(ds, baseline, pc.get("c_linear", 1.0), pc.get("c_quadratic", 1.96),
                             candidates=pc.get("candidates"), threads=ctx.threads)
    else:
        terms = TermSet(baseline=list(baseline), c_linear=pc.get("c_linear", 1.0),
                        c_quadratic=pc.get("c_quadratic", 1.96))
    model = fit_logit(ds, terms)
    keep = np.ones(ds.n, dtype=bool)
    if cfg.trim:
        trimmed, report = trim_common_support(ds, model)
        keep = report.keep
        ctx.manifest.json("trim_report.json", "propensity", report.to_dict())
    scores = pd.DataFrame({"id": ds.unit_id, "score": model.scores, "linearized": model.linearized,
                           "in_support": keep.astype(int)})
    ctx.manifest.text("propensity_model.json", "propensity", model.to_json() + "\n")
    ctx.manifest.csv("propensity_scores.csv", "propensity", scores)
    if terms.log:
        ctx.manifest.csv("propensity_selection.csv", "propensity", terms.log_frame())
    if cfg.trim:
        ctx.ds, ctx.model = trimmed, model.restrict(keep)
    else:
        ctx.model = model


def stage_match(ctx: Context) -> None:
    mc = ctx.cfg.matching
    ds, model = ctx.ds, ctx.model
    ms = nn_match(model.linearized, ds.d, ratio=mc.get("ratio", 4), with_replacement=mc.get("with_replacement", True),
                  caliper=mc.get("caliper"))
    est = estimate_cate(ds.outcome, ms, n_boot=mc.get("n_boot", 1000),
                        seed=_seeding.derive_seed(ctx.cfg.seed, SEED_MATCH))
    bal = balance(ds, model, ms)
    ctx.manifest.json("matching_estimate.json", "match", {**est.to_dict(), "incomplete": len(ms.incomplete)})
    ctx.manifest.csv("matches.csv", "match", ms.pairs_frame(ds.unit_id))
    ctx.manifest.csv("balance.csv", "match", bal.table, header_note=f"normalized difference = {bal.formula}")
    ctx.rows.append(("overall", est.estimate, est.se))


def _strata_spec(entry: dict, ds: Dataset) -> StrataSpec:
    source = entry.get("source", "propensity")
    if source == "covariate" and entry.get("terciles", not entry.get("bin_edges")):
        return tercile_spec(ds.covariates[entry["covariate"]].to_numpy(float), entry["covariate"],
                            tuple(entry.get("labels", ("low", "mid", "high"))))
    return StrataSpec(source=source, bin_edges=tuple(entry.get("bin_edges", ())),
                      labels=tuple(entry.get("labels", ())), covariate=entry.get("covariate"),
                      closed=entry.get("closed", "left"), levels=tuple(entry.get("levels", ())))


def stage_strata(ctx: Context) -> None:
    ds, model = ctx.ds, ctx.model
    entries = ctx.cfg.strata or [{"name": "propensity", "source": "propensity",
                                  "bin_edges": list(DEFAULT_PROPENSITY_EDGES), "labels": ["low", "mid", "high"]}]
    ratio = ctx.cfg.matching.get("ratio", 4)
    n_boot = ctx.cfg.matching.get("n_boot", 1000)
    long_rows, wide_rows = [], []
    for entry in entries:
        spec = _strata_spec(entry, ds)
        name = entry.get("name", spec.title)
        res = strata_cates(ds, model, spec, ratio=ratio, n_boot=n_boot,
                           seed=_seeding.derive_seed(ctx.cfg.seed, SEED_MATCH))
        frame = res.frame()
        frame.insert(0, "partition", name)
        long_rows.append(frame)
        wide = {"partition": name, "labels": "|".join(spec.names)}
        for k, r in enumerate(res.rows, start=1):
            wide[f"stratum_{k}"] = f"{r.estimate:.3f} ({r.se:.3f})" if r.estimable else "not estimable"
        wide_rows.append(wide)
        ok = [r for r in res.rows if r.estimable]
        if len(ok) >= 2:
            z = pairwise_tests([r.estimate for r in ok], [r.se for r in ok])
            tri = lower_triangle_frame(z, [r.label for r in ok])
            ctx.manifest.csv(f"pairwise_{name}.csv", "strata", tri, index=True)
        ctx.rows.extend((f"{name}:{r.label}", r.estimate, r.se) for r in ok)
    ctx.manifest.csv("strata.csv", "strata", pd.concat(long_rows, ignore_index=True))
    ctx.manifest.csv("strata_table.csv", "strata", pd.DataFrame(wide_rows))


def stage_tree(ctx: Context) -> None:
    tc = dict(ctx.cfg.tree)
    reps = int(tc.pop("stability_reps", 0))
    config = TreeConfig.from_dict(tc)
    seed = _seeding.derive_seed(ctx.cfg.seed, SEED_TREE)
    tree, _ = fit_causal_tree(ctx.ds, ctx.model, config, seed=seed)
    ctx.manifest.text("tree.json", "tree", export_tree(tree, "json"))
    ctx.manifest.text("tree.dot", "tree", export_tree(tree, "dot"))
    ctx.manifest.csv("tree_leaves.csv", "tree", leaf_table(tree))
    ctx.rows.extend((f"tree:{name}", est, se) for name, est, se in leaf_rows(tree))
    if reps > 0:
        stab = stability_analysis(ctx.ds, ctx.model, config, n_reps=reps, seed=seed, threads=ctx.threads)
        ctx.manifest.csv("tree_stability.csv", "tree", stab.table)


def _labels(spec: StrataSpec, idx: np.ndarray) -> np.ndarray:
    names = np.array(spec.names + ["unassigned"], dtype=object)
    return names[np.where(idx >= 0, idx, len(spec.names))]


def stage_forest(ctx: Context) -> None:
    fc = dict(ctx.cfg.forest)
    extra = fc.pop("quartile_covariates", [])
    config = ForestConfig.from_dict({**fc, "seed": _seeding.derive_seed(ctx.cfg.seed, SEED_FOREST)})
    ds, model = ctx.ds, ctx.model
    forest = grow_forest(ds, model, config, threads=ctx.threads)
    ite = predict_ite(forest, ds, model, errors="mask")
    ctx.manifest.text("forest.json", "forest", forest_to_json(forest))
    ctx.manifest.csv("forest_ite.csv", "forest", ite.frame(ds.unit_id))
    ctx.manifest.csv("forest_importance.csv", "forest", variable_importance(forest))
    ok = ~np.isnan(ite.estimate)
    if ok.sum() >= 4:
        sub = ds.subset(ok)
        p_spec = StrataSpec("propensity", DEFAULT_PROPENSITY_EDGES, ("low", "mid", "high"))
        groups = {"propensity score": _labels(p_spec, stratify(sub, model.restrict(ok), p_spec))}
        for cov in extra:
            t_spec = tercile_spec(sub.covariates[cov].to_numpy(float), cov)
            groups[cov] = _labels(t_spec, stratify(sub, None, t_spec))
        table = ite_quartile_summary(ite.estimate[ok], sub, groups)
        ctx.manifest.csv("forest_quartiles.csv", "forest", table, index=True)


def stage_sensitivity(ctx: Context) -> None:
    sc = ctx.cfg.sensitivity
    rows = [tuple(r) for r in sc["rows"]] if "rows" in sc else ctx.rows
    if not rows:
        raise ValueError("no estimates to adjust; run an estimation stage or give sensitivity.rows")
    grid = sensitivity_grid(rows, sc.get("gammas", [0.10, 0.20, 0.40]), sc.get("lambdas", [-0.10]),
                            z=sc.get("z", 1.96))
    ctx.manifest.csv("sensitivity.csv", "sensitivity", grid.cells)


STAGE_FUNCS: dict[str, Callable[[Context], None]] = {
    "propensity": stage_propensity, "match": stage_match, "strata": stage_strata, "tree": stage_tree,
    "forest": stage_forest, "sensitivity": stage_sensitivity,
}


def run_pipeline(cfg: RunConfig, stages: list[str] | None = None, threads: int = 1) -> Manifest:
    """Run ``stages`` (default: the config's list) in canonical order and write the manifest.

    Raises ConfigError for problems with the config or input and StageError when a stage fails.
    """
    stages = list(cfg.stages if stages is None else stages)
    order = [s for s in STAGES if s in stages]
    cfg.output.mkdir(parents=True, exist_ok=True)
    ctx = Context(cfg, Manifest(cfg.output), threads=threads)
    standalone_sensitivity = order == ["sensitivity"] and "rows" in cfg.sensitivity
    if not standalone_sensitivity:
        try:
            _load_data(ctx)
        except (FileNotFoundError, ConfigError) as exc:
            raise ConfigError(str(exc)) from None
        except Exception as exc:  # noqa: BLE001 - reported with the stage name
            raise StageError("data", str(exc)) from exc
        if "propensity" not in order:
            order.insert(0, "propensity")
    for stage in order:
        logger.info("running stage %s", stage)
        try:
            STAGE_FUNCS[stage](ctx)
        except Exception as exc:  # noqa: BLE001
            raise StageError(stage, str(exc)) from exc
    ctx.manifest.write()
    return ctx.manifest


def run_synth(cfg: RunConfig) -> Manifest:
    """Write the configured synthetic dataset and its hidden truth table."""
    if cfg.synth is None:
        raise ConfigError("the synth command needs a 'synth' block")
    sc = cfg.synth
    dgp = DGPConfig.from_dict(sc["dgp"]) if "dgp" in sc else step_dgp(**sc.get("step", {}))
    ds, truth = generate(dgp, int(sc.get("n", 2000)), int(sc.get("seed", cfg.seed)))
    cfg.output.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(cfg.output)
    data_path, truth_path = write_synthetic(ds, truth, cfg.output / sc.get("stem", "synthetic"))
    manifest.file(data_path, "synth")
    manifest.file(truth_path, "synth")
    manifest.json("synthetic_dgp.json", "synth", dgp.to_dict())
    manifest.write()
    return manifest
