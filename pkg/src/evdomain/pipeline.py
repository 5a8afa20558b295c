"""End-to-end orchestration: ingest, calibrate, balance, sample, report.

Stages, each persisted as text in the output directory:

1. ``stage1_gumbel.json``: Gumbel virtual data from the expert quantiles.
2. ``stage2_calibration.json``: Frechet and Weibull anchors per candidate m.
3. ``stage3_compatibility.json``: virtual size m* per model (KL to the Gumbel prior predictive).
4. ``stage4_draws.csv`` and ``stage4_diagnostics.json``: mixture MCMC output.
5. ``report.json`` with ``predictive.csv``, ``weights.csv`` and ``draws.csv``.

Every stage draws its randomness from ``SeedSequence([seed, stage, ...])``,
so a stage replayed from persisted inputs reproduces a full run exactly.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from evdomain import __version__
from evdomain.calibration import (GUMBEL_GRID, CORSICA_EXPERT, CalibrationResult, CompatibilityResult,
                                  ConfigurationError, ExpertQuantiles, GridSpec, ISConfig,
                                  calibrate_frechet, calibrate_gumbel_virtual, calibrate_virtual_size,
                                  calibrate_weibull)
from evdomain.evd_core import Model
from evdomain.inference import (MCMCSettings, MixtureConfig, PosteriorDraws, SelectionReport,
                                mixture_posterior_mcmc, predictive_cdf, predictive_quantile, summarize)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
STAGES = {1: "gumbel_calibration", 2: "shape_calibration", 3: "compatibility", 4: "mcmc", 5: "report"}
MODEL_ORDER = (Model.FRECHET, Model.WEIBULL, Model.GUMBEL)


class DataError(ValueError):
    pass


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` is its number, ``name`` its identity."""

    def __init__(self, stage: int, cause: BaseException):
        self.stage = stage
        self.name = STAGES[stage]
        self.cause = cause
        super().__init__(f"stage {stage} ({self.name}) failed: {type(cause).__name__}: {cause}")


# -- data ------------------------------------------------------------------


@dataclass(frozen=True)
class Dataset:
    labels: tuple
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, float)
        if v.ndim != 1 or v.size < 1:
            raise DataError("dataset needs at least one value")
        if len(self.labels) != v.size:
            raise DataError("one label per value")
        if not np.all(np.isfinite(v)):
            raise DataError("values must be finite")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "labels", tuple(str(s) for s in self.labels))

    def __len__(self):
        return self.values.size

    @property
    def records(self) -> List[Tuple[str, float]]:
        return list(zip(self.labels, self.values.tolist()))


def _number(s: str) -> Optional[float]:
    try:
        v = float(s)
    except ValueError:
        return None
    return v if math.isfinite(v) else None


def ingest_csv(path) -> Dataset:
    """Read ``label,value`` rows; a first row with a non-numeric value is a header."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: no such file")
    labels, values, errors = [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2:
                errors.append(f"line {lineno}: expected 2 columns, got {len(row)}")
                continue
            v = _number(row[1].strip())
            if v is None:
                if lineno == 1 and not labels:
                    continue   # header
                errors.append(f"line {lineno}: value {row[1].strip()!r} is not a finite number")
                continue
            labels.append(row[0].strip())
            values.append(v)
    if errors:
        raise DataError(f"{path}: malformed rows\n  " + "\n  ".join(errors))
    if not values:
        raise DataError(f"{path}: no data rows")
    return Dataset(tuple(labels), np.array(values))


def fixture_path(name: str = "corsica.csv") -> Path:
    return Path(str(resources.files("evdomain") / "data" / name))


def load_fixture() -> Dataset:
    """Daily rainfall maxima per year (mm), Corsica, 1987-2015."""
    return ingest_csv(fixture_path())


# -- configuration -----------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    expert: ExpertQuantiles = CORSICA_EXPERT
    mu_inf: float = 0.0
    gumbel_m: int = 3
    candidate_ms: tuple = (2, 3, 4, 5, 6, 7, 8)
    is_cfg: ISConfig = ISConfig()
    grid: GridSpec = GridSpec()
    gumbel_grid: GridSpec = GUMBEL_GRID
    gumbel_nodes: int = 2001
    compat_draws: int = 100_000
    compat_bins: int = 512
    tie_band: float = 2.0
    mcmc: MCMCSettings = MCMCSettings(n_iter=20_000, burn_in=5_000)
    prior_weights: tuple = (1 / 3, 1 / 3, 1 / 3)   # Frechet, Weibull, Gumbel
    periods: tuple = (10, 50, 100)
    seed: int = 20240101

    def __post_init__(self):
        ms = tuple(sorted({float(m) for m in self.candidate_ms}))
        if not ms or any(m <= 0 for m in ms):
            raise ConfigurationError("candidate_ms must be a nonempty set of positive sizes")
        object.__setattr__(self, "candidate_ms", tuple(int(m) if m.is_integer() else m for m in ms))
        if int(self.gumbel_m) != self.gumbel_m or self.gumbel_m < 3:
            raise ConfigurationError("gumbel_m must be an integer of at least 3")
        if not all(T > 1 for T in self.periods):
            raise ConfigurationError("return periods must exceed 1")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigurationError("seed must be a nonnegative integer")
        if len(self.prior_weights) != 3:
            raise ConfigurationError("prior_weights needs one weight per model (Frechet, Weibull, Gumbel)")
        MixtureConfig(tuple(self.prior_weights))

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "expert": self.expert.to_pairs(),
            "mu_inf": self.mu_inf,
            "gumbel_m": self.gumbel_m,
            "candidate_ms": list(self.candidate_ms),
            "is": asdict(self.is_cfg),
            "grid": asdict(self.grid),
            "gumbel_grid": asdict(self.gumbel_grid),
            "gumbel_nodes": self.gumbel_nodes,
            "compatibility": {"n_draws": self.compat_draws, "bins": self.compat_bins,
                              "tie_band": self.tie_band},
            "mcmc": asdict(self.mcmc),
            "prior_weights": list(self.prior_weights),
            "periods": list(self.periods),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        version = d.pop("schema_version", None)
        if version != SCHEMA_VERSION:
            raise ConfigurationError(f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})")
        known = {"expert", "mu_inf", "gumbel_m", "candidate_ms", "is", "grid", "gumbel_grid",
                 "gumbel_nodes", "compatibility", "mcmc", "prior_weights", "periods", "seed"}
        extra = set(d) - known
        if extra:
            raise ConfigurationError(f"unknown config keys: {sorted(extra)}")
        kw = {}
        try:
            if "expert" in d:
                kw["expert"] = ExpertQuantiles.from_pairs(d["expert"])
            for k in ("mu_inf", "gumbel_m", "gumbel_nodes", "seed"):
                if k in d:
                    kw[k] = d[k]
            for k in ("candidate_ms", "prior_weights", "periods"):
                if k in d:
                    kw[k] = tuple(d[k])
            if "is" in d:
                kw["is_cfg"] = ISConfig(**d["is"])
            if "grid" in d:
                kw["grid"] = GridSpec(**d["grid"])
            if "gumbel_grid" in d:
                kw["gumbel_grid"] = GridSpec(**d["gumbel_grid"])
            if "mcmc" in d:
                kw["mcmc"] = MCMCSettings(**d["mcmc"])
            c = d.get("compatibility", {})
            for src, dst in (("n_draws", "compat_draws"), ("bins", "compat_bins"), ("tie_band", "tie_band")):
                if src in c:
                    kw[dst] = c[src]
            return cls(**kw)
        except ConfigurationError:
            raise
        except (TypeError, ValueError, KeyError, IndexError) as e:
            raise ConfigurationError(f"invalid config: {e}") from e

    def digest(self) -> str:
        return hashlib.sha256(_dumps(self.to_dict()).encode()).hexdigest()

    def with_seed(self, seed: int) -> "RunConfig":
        d = self.to_dict()
        d["seed"] = seed
        return RunConfig.from_dict(d)


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigurationError(f"{path}: {e}") from e
    if not isinstance(d, dict):
        raise ConfigurationError(f"{path}: top level must be an object")
    return RunConfig.from_dict(d)


def default_config_path() -> Path:
    return fixture_path("default_config.json")


# -- persistence helpers ---------------------------------------------------


def _clean(obj):
    """JSON-safe copy: non-finite floats become null, numpy scalars become Python numbers."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    return obj


def _dumps(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def _write_json(path: Path, obj) -> None:
    try:
        path.write_text(_dumps(obj), encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot write {path}: {e}") from e


def _read_json(path: Path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _data_digest(data: Dataset) -> str:
    return hashlib.sha256(_dumps(data.records).encode()).hexdigest()


def _stamp(config: RunConfig, data: Dataset) -> dict:
    return {"config_digest": config.digest(), "data_digest": _data_digest(data), "seed": config.seed}


def _stage_seed(config: RunConfig, stage: int, *extra: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([config.seed, stage, *extra])


def _rng(config, stage, *extra) -> np.random.Generator:
    return np.random.default_rng(_stage_seed(config, stage, *extra))


def _m_key(m) -> str:
    return repr(float(m))


# -- stages ----------------------------------------------------------------


@dataclass
class PipelineState:
    gumbel: Optional[CalibrationResult] = None
    shape: Dict[str, Dict[float, CalibrationResult]] = field(default_factory=dict)
    compatibility: Dict[str, CompatibilityResult] = field(default_factory=dict)
    draws: Optional[PosteriorDraws] = None
    report: Optional[SelectionReport] = None
    failure: Optional[StageError] = None

    def hypers(self) -> list:
        """Block priors in the order Frechet, Weibull, Gumbel."""
        out = []
        for model in (Model.FRECHET, Model.WEIBULL):
            m = self.compatibility[model.value].m_star
            out.append(self.shape[model.value][m].hyper)
        return out + [self.gumbel.hyper]


def stage1(config: RunConfig) -> CalibrationResult:
    return calibrate_gumbel_virtual(config.expert, config.gumbel_grid, config.gumbel_m,
                                    config.gumbel_nodes, config.mu_inf)


def stage2(config: RunConfig) -> Dict[str, Dict[float, CalibrationResult]]:
    out = {Model.FRECHET.value: {}, Model.WEIBULL.value: {}}
    for k, m in enumerate(config.candidate_ms):
        out["frechet"][m] = calibrate_frechet(m, config.expert, config.mu_inf, config.grid, config.is_cfg,
                                              _rng(config, 2, 0, k))
        out["weibull"][m] = calibrate_weibull(m, config.expert, config.grid, config.is_cfg,
                                              _rng(config, 2, 1, k))
    return out


def stage3(config: RunConfig, gumbel: CalibrationResult, shape) -> Dict[str, CompatibilityResult]:
    out = {}
    for k, model in enumerate((Model.FRECHET, Model.WEIBULL)):
        seed = int(_stage_seed(config, 3, k).generate_state(1, np.uint64)[0] >> np.uint64(1))
        out[model.value] = calibrate_virtual_size(model, gumbel.hyper, shape[model.value], seed,
                                                  config.compat_draws, config.compat_bins, config.tie_band)
    return out


def stage4(config: RunConfig, data: Dataset, hypers: Sequence) -> PosteriorDraws:
    return mixture_posterior_mcmc(data.values, hypers, MixtureConfig(tuple(config.prior_weights)),
                                  config.mcmc, _stage_seed(config, 4),
                                  labels=[m.value for m in MODEL_ORDER])


def _provenance(config: RunConfig, data: Dataset, state: PipelineState) -> dict:
    prov = {
        "package_version": __version__,
        "schema_version": SCHEMA_VERSION,
        **_stamp(config, data),
        "n_data": len(data),
        "config": config.to_dict(),
    }
    if state.gumbel is not None:
        prov["gumbel_prior"] = state.gumbel.to_dict()
    if state.compatibility:
        prov["compatibility"] = {k: v.to_dict() for k, v in state.compatibility.items()}
        prov["priors"] = {}
        for model in (Model.FRECHET, Model.WEIBULL):
            m = state.compatibility[model.value].m_star
            prov["priors"][model.value] = state.shape[model.value][m].to_dict()
    return prov


def stage5(config: RunConfig, data: Dataset, state: PipelineState) -> SelectionReport:
    return summarize(state.draws, config.periods, _provenance(config, data, state))


# -- persistence of stage outputs ------------------------------------------


def _save_stage(out: Path, stage: int, config: RunConfig, data: Dataset, state: PipelineState) -> None:
    stamp = _stamp(config, data)
    if stage == 1:
        _write_json(out / "stage1_gumbel.json", {**stamp, "result": state.gumbel.to_dict()})
    elif stage == 2:
        res = {mod: {_m_key(m): r.to_dict() for m, r in d.items()} for mod, d in state.shape.items()}
        _write_json(out / "stage2_calibration.json", {**stamp, "results": res})
    elif stage == 3:
        _write_json(out / "stage3_compatibility.json",
                    {**stamp, "results": {k: v.to_dict() for k, v in state.compatibility.items()}})
    elif stage == 4:
        state.draws.to_csv(out / "stage4_draws.csv")
        _write_json(out / "stage4_diagnostics.json", {**stamp, "diagnostics": state.draws.diagnostics})


def _load_stage(out: Path, stage: int, config: RunConfig, data: Dataset, state: PipelineState) -> bool:
    """Fill ``state`` from persisted output of ``stage``; False if absent or stale."""
    names = {1: "stage1_gumbel.json", 2: "stage2_calibration.json", 3: "stage3_compatibility.json",
             4: "stage4_diagnostics.json"}
    path = out / names[stage]
    if not path.is_file():
        return False
    try:
        d = _read_json(path)
    except (OSError, json.JSONDecodeError):
        return False
    stamp = _stamp(config, data)
    if any(d.get(k) != v for k, v in stamp.items()):
        return False
    if stage == 1:
        state.gumbel = CalibrationResult.from_dict(d["result"])
    elif stage == 2:
        state.shape = {mod: {float(m): CalibrationResult.from_dict(r) for m, r in res.items()}
                       for mod, res in d["results"].items()}
        state.shape = {mod: {_as_m(m, config): r for m, r in res.items()} for mod, res in state.shape.items()}
    elif stage == 3:
        state.compatibility = {
            k: CompatibilityResult(_as_m(v["m_star"], config),
                                   {_as_m(float(m), config): x for m, x in v["kl"].items()},
                                   {_as_m(float(m), config): x for m, x in v["kl_se"].items()},
                                   _as_m(v["m_argmin"], config))
            for k, v in d["results"].items()}
    elif stage == 4:
        csv_path = out / "stage4_draws.csv"
        if not csv_path.is_file():
            return False
        draws = PosteriorDraws.from_csv(csv_path)
        draws.diagnostics = d["diagnostics"]
        state.draws = draws
    return True


def _as_m(m, config: RunConfig):
    """Map a persisted size back to the matching entry of ``candidate_ms``."""
    for c in config.candidate_ms:
        if float(c) == float(m):
            return c
    return m


# -- orchestration ---------------------------------------------------------


def run_pipeline(config: RunConfig, data: Dataset, out_dir=None, until: int = 5,
                 resume: bool = False) -> PipelineState:
    """Run stages 1..``until``.

    With ``out_dir`` every stage output is persisted; with ``resume`` a stage
    whose persisted output matches the config, data and seed is reloaded
    instead of recomputed.  A failing stage is recorded in ``state.failure``
    (a :class:`StageError`) and later stages are skipped.
    """
    if until not in STAGES:
        raise ConfigurationError(f"until must be one of {sorted(STAGES)}")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise DataError(f"cannot create {out}: {e}") from e
    state = PipelineState()
    for stage in range(1, until + 1):
        if resume and out is not None and stage < 5 and _load_stage(out, stage, config, data, state):
            log.info("stage %d (%s): reloaded from %s", stage, STAGES[stage], out)
            continue
        log.info("stage %d (%s)", stage, STAGES[stage])
        try:
            if stage == 1:
                state.gumbel = stage1(config)
            elif stage == 2:
                state.shape = stage2(config)
            elif stage == 3:
                state.compatibility = stage3(config, state.gumbel, state.shape)
            elif stage == 4:
                state.draws = stage4(config, data, state.hypers())
            else:
                state.report = stage5(config, data, state)
        except (KeyboardInterrupt, SystemExit):
            raise
        except Exception as e:          # noqa: BLE001 -- any failure is tagged with its stage
            state.failure = StageError(stage, e)
            log.error("%s", state.failure)
            break
        if out is not None and stage < 5:
            _save_stage(out, stage, config, data, state)
    return state


def partial_report(config: RunConfig, data: Dataset, state: PipelineState) -> dict:
    """Report document for a run that stopped early."""
    doc = {"status": "failed", "provenance": _provenance(config, data, state)}
    if state.failure is not None:
        doc["failure"] = {"stage": state.failure.stage, "name": state.failure.name,
                          "error": type(state.failure.cause).__name__, "message": str(state.failure.cause)}
    return doc


# -- report emission -------------------------------------------------------


def predictive_curve(draws: PosteriorDraws, n: int = 200, max_draws: int = 4000) -> np.ndarray:
    """``(x, F(x))`` on an even grid between the 0.1% and 99.9% predictive quantiles."""
    lo = predictive_quantile(draws, 1e-3, max_draws)
    hi = predictive_quantile(draws, 1 - 1e-3, max_draws)
    x = np.linspace(lo, hi, n)
    return np.column_stack([x, predictive_cdf(draws, x, max_draws)])


def _write_rows(path: Path, header, rows) -> None:
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
    except OSError as e:
        raise DataError(f"cannot write {path}: {e}") from e


def report_document(report: SelectionReport) -> dict:
    doc = report.to_dict()
    doc["status"] = "flagged" if not report.diagnostics.get("converged", True) else "ok"
    return _clean(doc)


def emit_report(report, fmt: str, path, draws: Optional[PosteriorDraws] = None,
                timestamp: Optional[str] = None) -> Path:
    """Write the report document to ``path`` (format ``"json"``).

    ``report`` is a :class:`SelectionReport` or an already built partial
    document.  With ``draws``, companion files ``draws.csv``,
    ``weights.csv`` and ``predictive.csv`` go next to it.  Only the
    ``generated_at`` field varies between runs with the same seed.
    """
    if fmt != "json":
        raise ConfigurationError(f"unsupported report format {fmt!r}")
    path = Path(path)
    if path.parent and not path.parent.is_dir():
        raise DataError(f"cannot write {path}: directory does not exist")
    doc = report_document(report) if isinstance(report, SelectionReport) else _clean(dict(report))
    doc["generated_at"] = timestamp or datetime.now(timezone.utc).isoformat(timespec="seconds")
    if draws is not None:
        base = path.parent
        draws.to_csv(base / "draws.csv")
        rows = []
        for c in range(draws.n_chains):
            for s in range(draws.n_draws):
                rows.append([c, s] + [repr(float(v)) for v in draws.weights[c, s]])
        _write_rows(base / "weights.csv", ["chain", "draw"] + [f"W.{lab}" for lab in draws.labels], rows)
        curve = predictive_curve(draws)
        with np.errstate(divide="ignore"):
            period = 1.0 / (1.0 - curve[:, 1])
        _write_rows(base / "predictive.csv", ["x", "cdf", "return_period"],
                    [[repr(float(a)), repr(float(b)), repr(float(t))] for a, b, t in zip(curve[:, 0], curve[:, 1], period)])
        doc["companions"] = ["draws.csv", "weights.csv", "predictive.csv"]
    try:
        path.write_text(_dumps(doc), encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot write {path}: {e}") from e
    return path


def report_body(path) -> str:
    """Report text with the timestamp removed, for run-to-run comparison."""
    d = _read_json(Path(path))
    d.pop("generated_at", None)
    return _dumps(d)
