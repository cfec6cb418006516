"""End-to-end runs: ingest, partition, parallel fits, merge, report.

A run directory holds everything a run produces::

    config.ini            resolved configuration
    fits/sub_001.npz ...  one versioned blob per subdomain (reused on resume)
    risks.csv             merged relative-risk summaries, one row per (area, disease)
    global_params.csv     consensus summaries of rho, sigma2 and alpha
    local_params.csv      per-subdomain summaries of the same parameters
    criteria.csv          DIC / WAIC and their components
    subdomains.csv        subdomain index (as used in the other tables), label, sizes
    global_draws.npz      consensus draws (used by ``report``)
    timing.json           wall-clock seconds per stage (not deterministic)
    manifest.json         list of output files

All numeric CSV fields are written with ``repr`` so that identical runs give
byte-identical files.
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import json
import logging
import time
from collections import OrderedDict
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, GraphError, NumericalError, PipelineError
from .graph import AreaGraph, PartitionPlan, build_graph, expand_partition, read_partition, subgraph, _data_lines
from .inference import CountPanel, FitConfig, RiskSummary, SubmodelFit, fit_submodel
from .merge import STRATEGIES, MergedResult, kde_density, merge_fits
from .runner import derive_seed, resolve_workers, run_jobs

logger = logging.getLogger(__name__)

__all__ = [
    "PipelineConfig",
    "RunReport",
    "read_counts_table",
    "ingest_counts",
    "load_inputs",
    "run_pipeline",
    "merge_run",
    "report",
    "CSV_HEADERS",
]

CSV_HEADERS = {
    "risks.csv": ["area", "disease", "mean", "median", "sd", "q025", "q975", "exceed", "home", "n_sources"],
    "global_params.csv": ["parameter", "mean", "sd", "q025", "median", "q975"],
    "local_params.csv": ["subdomain", "parameter", "mean", "sd", "q025", "median", "q975", "cmc_weight"],
    "criteria.csv": ["criterion", "value"],
    "subdomains.csv": ["subdomain", "label", "n_home", "n_expanded", "n_components"],
}


# ------------------------------------------------------------------ #
# Configuration
# ------------------------------------------------------------------ #


@dataclass
class PipelineConfig:
    """Declarative description of one run (see :meth:`from_file`)."""

    edges: Path
    counts: Path
    output: Path
    partition: Path | None = None
    k: int = 0
    strategy: str = "original"
    fit: FitConfig = field(default_factory=FitConfig)
    workers: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.k < 0:
            raise ConfigError("k must be >= 0")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")

    @classmethod
    def from_file(cls, path: str | Path) -> "PipelineConfig":
        """Parse an INI file; relative paths are resolved against its folder.

        Sections: ``[data]`` edges, counts, partition (optional);
        ``[model]`` k, strategy; ``[fit]`` any :class:`FitConfig` field except
        ``seed``; ``[execution]`` workers, seed; ``[output]`` directory.
        """
        path = Path(path)
        cp = configparser.ConfigParser()
        try:
            with open(path, encoding="utf-8") as fh:
                cp.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        base = path.resolve().parent

        def _path(sec, key, required=True):
            val = cp.get(sec, key, fallback=None)
            if val is None or not val.strip():
                if required:
                    raise ConfigError(f"{path}: [{sec}] {key} is required")
                return None
            p = Path(val.strip())
            return p if p.is_absolute() else base / p

        known = {"data", "model", "fit", "execution", "output"}
        extra = set(cp.sections()) - known
        if extra:
            raise ConfigError(f"{path}: unknown sections {sorted(extra)}")
        try:
            fit_kwargs = {}
            types = {f.name: f.type for f in fields(FitConfig)}
            if cp.has_section("fit"):
                for key, raw in cp.items("fit"):
                    if key == "seed":
                        raise ConfigError(f"{path}: set the seed under [execution]")
                    if key not in types:
                        raise ConfigError(f"{path}: unknown [fit] key {key!r}")
                    fit_kwargs[key] = _coerce_fit_value(key, raw)
            return cls(
                edges=_path("data", "edges"),
                counts=_path("data", "counts"),
                partition=_path("data", "partition", required=False),
                output=_path("output", "directory"),
                k=cp.getint("model", "k", fallback=0),
                strategy=cp.get("model", "strategy", fallback="original").strip(),
                fit=FitConfig(**fit_kwargs),
                workers=cp.getint("execution", "workers", fallback=1),
                seed=cp.getint("execution", "seed", fallback=0),
            )
        except ConfigError:
            raise
        except (ValueError, TypeError, configparser.Error) as exc:
            raise ConfigError(f"{path}: {exc}") from exc

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp["data"] = {"edges": str(self.edges), "counts": str(self.counts)}
        if self.partition is not None:
            cp["data"]["partition"] = str(self.partition)
        cp["model"] = {"k": str(self.k), "strategy": self.strategy}
        cp["fit"] = {k: _format_value(v) for k, v in self.fit.to_dict().items() if k != "seed" and v is not None}
        cp["execution"] = {"workers": str(self.workers), "seed": str(self.seed)}
        cp["output"] = {"directory": str(self.output)}
        lines = []
        for sec in cp.sections():
            lines.append(f"[{sec}]")
            lines.extend(f"{k} = {v}" for k, v in cp[sec].items())
            lines.append("")
        return "\n".join(lines)


def _coerce_fit_value(key: str, raw: str):
    raw = raw.strip()
    if key in ("n_samples", "max_newton_iter", "hyper_maxiter", "cpo_points"):
        return int(raw)
    if key == "backend":
        return raw or None
    if key == "dof":
        return None if raw.lower() in ("", "none", "default") else float(raw)
    return float(raw)


def _format_value(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


# ------------------------------------------------------------------ #
# Inputs
# ------------------------------------------------------------------ #


def read_counts_table(path: str | Path) -> list[dict[str, str]]:
    """Rows of a counts CSV as dictionaries (header required)."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = [r for r in csv.DictReader(fh)]
    except OSError as exc:
        raise ConfigError(f"cannot read counts file {path}: {exc}") from exc
    if not rows:
        raise ConfigError(f"{path}: no data rows")
    cols = set(rows[0])
    need = {"area", "disease", "observed"}
    if not need <= cols:
        raise ConfigError(f"{path}: header must include {sorted(need)}")
    return rows


def _number(row, key, path, lineno, kind=float):
    try:
        v = kind(row[key])
    except (TypeError, ValueError):
        raise ConfigError(f"{path}:{lineno}: bad {key} value {row.get(key)!r}") from None
    if v < 0:
        raise ConfigError(f"{path}:{lineno}: negative {key}")
    return v


def ingest_counts(path: str | Path, graph: AreaGraph) -> CountPanel:
    """Read counts aligned to ``graph``'s area order.

    With an ``expected`` column the values pass through (summed over rows of
    the same area and disease).  Otherwise ``age_group`` and ``population``
    columns are required and expected counts come from indirect
    standardisation, ``E_ij = sum_k n_ijk m_jk`` with
    ``m_jk = sum_i O_ijk / sum_i n_ijk``.
    """
    rows = read_counts_table(path)
    cols = set(rows[0])
    has_e = "expected" in cols and all((r.get("expected") or "").strip() for r in rows)
    if not has_e and not {"age_group", "population"} <= cols:
        raise ConfigError(f"{path}: need an expected column or age_group and population columns")
    diseases: dict[str, int] = OrderedDict()
    for r in rows:
        diseases.setdefault(r["disease"].strip(), len(diseases))
    I, J = graph.n_areas, len(diseases)
    O = np.zeros((I, J), dtype=np.int64)
    seen = np.zeros((I, J), dtype=bool)
    if has_e:
        E = np.zeros((I, J))
        for lineno, r in enumerate(rows, start=2):
            i = _area(graph, r, path, lineno)
            j = diseases[r["disease"].strip()]
            O[i, j] += _number(r, "observed", path, lineno, int)
            E[i, j] += _number(r, "expected", path, lineno)
            seen[i, j] = True
    else:
        groups: dict[str, int] = OrderedDict()
        for r in rows:
            groups.setdefault(r["age_group"].strip(), len(groups))
        K = len(groups)
        Ok = np.zeros((I, J, K))
        nk = np.zeros((I, J, K))
        for lineno, r in enumerate(rows, start=2):
            i = _area(graph, r, path, lineno)
            j = diseases[r["disease"].strip()]
            k = groups[r["age_group"].strip()]
            o = _number(r, "observed", path, lineno, int)
            O[i, j] += o
            Ok[i, j, k] += o
            nk[i, j, k] += _number(r, "population", path, lineno)
            seen[i, j] = True
        tot_n = nk.sum(axis=0)  # J x K
        names = list(diseases)
        for j in range(J):
            if tot_n[j].sum() <= 0:
                raise ConfigError(f"{path}: zero total population for disease {names[j]!r}")
        with np.errstate(invalid="ignore", divide="ignore"):
            m = np.where(tot_n > 0, Ok.sum(axis=0) / np.where(tot_n > 0, tot_n, 1.0), 0.0)
        E = np.einsum("ijk,jk->ij", nk, m)
    if not seen.all():
        i, j = np.argwhere(~seen)[0]
        raise ConfigError(f"{path}: no counts for area {graph.area_ids[i]!r}, disease {list(diseases)[j]!r}")
    if np.any(E <= 0):
        i, j = np.argwhere(E <= 0)[0]
        raise ConfigError(f"{path}: expected count for area {graph.area_ids[i]!r}, disease {list(diseases)[j]!r} is not positive")
    return CountPanel(O, E, tuple(diseases), graph.area_ids)


def _area(graph, row, path, lineno):
    try:
        return graph.index_of(row["area"].strip())
    except GraphError:
        raise ConfigError(f"{path}:{lineno}: unknown area {row['area']!r}") from None


def _area_order(counts_path) -> list[str]:
    rows = read_counts_table(counts_path)
    seen: dict[str, None] = OrderedDict()
    for r in rows:
        seen.setdefault(r["area"].strip())
    return list(seen)


def _read_graph(edges_path, labels) -> AreaGraph:
    pairs = []
    try:
        for lineno, line in _data_lines(edges_path):
            parts = [p.strip() for p in line.split("\t")]
            if len(parts) != 2 or not all(parts):
                raise ConfigError(f"{edges_path}:{lineno}: expected 'label_a<TAB>label_b'")
            pairs.append((parts[0], parts[1]))
    except OSError as exc:
        raise ConfigError(f"cannot read edge list {edges_path}: {exc}") from exc
    return build_graph(pairs, labels)


def load_inputs(cfg: PipelineConfig, single: bool = False) -> tuple[AreaGraph, CountPanel, PartitionPlan]:
    """Graph, counts and partition plan described by ``cfg``.

    Areas are indexed in order of first appearance in the counts file.
    ``single`` (or a missing partition file) gives one subdomain, ``k = 0``.
    """
    labels = _area_order(cfg.counts)
    g = _read_graph(cfg.edges, labels)
    data = ingest_counts(cfg.counts, g)
    if single or cfg.partition is None:
        plan = expand_partition(g, np.zeros(g.n_areas, dtype=np.int64), 0, subdomain_ids=("1",))
    else:
        try:
            home, ids = read_partition(cfg.partition, g)
        except OSError as exc:
            raise ConfigError(f"cannot read partition {cfg.partition}: {exc}") from exc
        plan = expand_partition(g, home, cfg.k, subdomain_ids=ids)
    return g, data, plan


# ------------------------------------------------------------------ #
# Running
# ------------------------------------------------------------------ #


@dataclass
class RunReport:
    """Timings (seconds), criteria and the files written."""

    run_seconds: float
    merge_seconds: float
    total_seconds: float
    criteria: dict[str, float]
    files: list[str]
    output: Path
    n_subdomains: int
    reused: int = 0
    warnings: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class _FitJob:
    index: int
    blob: str
    key: str
    observed: np.ndarray
    expected: np.ndarray
    disease_names: tuple
    area_ids: tuple
    global_index: np.ndarray
    edges: np.ndarray
    fit: dict


def _job_key(fit_cfg: dict, members: np.ndarray, data: CountPanel, sub: AreaGraph) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(fit_cfg, sort_keys=True).encode())
    h.update(np.ascontiguousarray(members, dtype=np.int64).tobytes())
    h.update(np.ascontiguousarray(data.observed, dtype=np.int64).tobytes())
    h.update(np.ascontiguousarray(data.expected, dtype=np.float64).tobytes())
    h.update(np.ascontiguousarray(sub.edges, dtype=np.int64).tobytes())
    h.update("\x1f".join(data.area_ids).encode())
    h.update("\x1f".join(data.disease_names).encode())
    return h.hexdigest()


def _run_fit_job(job: _FitJob) -> str:
    data = CountPanel(job.observed, job.expected, job.disease_names, job.area_ids, job.global_index)
    g = AreaGraph(len(job.area_ids), job.edges, job.area_ids, global_index=job.global_index)
    fit = fit_submodel(data, g, FitConfig.from_dict(job.fit))
    fit.diagnostics["job_key"] = job.key
    fit.save(job.blob)
    return job.blob


def _blob_is_current(path: Path, key: str) -> bool:
    if not path.exists():
        return False
    try:
        fit = SubmodelFit.load(path)
    except Exception:  # noqa: BLE001 - unreadable blobs are refitted
        return False
    return fit.diagnostics.get("job_key") == key


def _stage(name):
    def wrap(fn):
        def inner(*a, **kw):
            try:
                return fn(*a, **kw)
            except PipelineError:
                raise
            except Exception as exc:  # noqa: BLE001 - tagged and re-raised
                raise PipelineError(name, f"{type(exc).__name__}: {exc}", exc) from exc

        return inner

    return wrap


def run_pipeline(cfg: PipelineConfig, single: bool = False) -> RunReport:
    """Fit every subdomain, merge, and write the run directory.

    Existing blobs whose job key matches are reused, so an interrupted run
    resumes where it stopped and produces the same outputs.
    """
    t0 = time.perf_counter()
    workers = _stage("config")(resolve_workers)(cfg.workers)
    g, data, plan = _stage("ingest")(load_inputs)(cfg, single)
    out = Path(cfg.output)
    fits_dir = out / "fits"
    fits_dir.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.to_ini(), encoding="utf-8")

    jobs, blobs, reused = [], [], 0
    for d in range(plan.n_subdomains):
        members = plan.expanded[d]
        sub_g = subgraph(g, members)
        sub_data = data.subset(members)
        fcfg = cfg.fit.to_dict()
        fcfg["seed"] = derive_seed(cfg.seed, d)
        key = _job_key(fcfg, members, sub_data, sub_g)
        blob = fits_dir / f"sub_{d + 1:03d}.npz"
        blobs.append(blob)
        if _blob_is_current(blob, key):
            reused += 1
            continue
        jobs.append(
            _FitJob(d, str(blob), key, sub_data.observed, sub_data.expected, sub_data.disease_names,
                    sub_data.area_ids, sub_data.global_index, sub_g.edges, fcfg)
        )
    t_run = time.perf_counter()
    _stage("fit")(run_jobs)(_run_fit_job, jobs, workers)
    run_seconds = time.perf_counter() - t_run

    t_merge = time.perf_counter()
    fits = _stage("merge")(lambda: [SubmodelFit.load(b) for b in blobs])()
    merged = _stage("merge")(merge_fits)(fits, plan, cfg.strategy, cfg.seed)
    files = _stage("write")(write_outputs)(out, merged, fits, plan)
    merge_seconds = time.perf_counter() - t_merge
    total = time.perf_counter() - t0
    timing = {"run": run_seconds, "merge": merge_seconds, "total": total, "workers": workers,
              "n_subdomains": plan.n_subdomains, "reused_fits": reused}
    (out / "timing.json").write_text(json.dumps(timing, indent=2) + "\n", encoding="utf-8")
    files = files + ["timing.json", "manifest.json"]
    (out / "manifest.json").write_text(json.dumps({"files": files}, indent=2) + "\n", encoding="utf-8")
    return RunReport(run_seconds, merge_seconds, total, merged.criteria.as_dict(), files, out,
                     plan.n_subdomains, reused, merged.warnings)


def merge_run(run_dir: str | Path, strategy: str | None = None, seed: int | None = None) -> MergedResult:
    """Re-merge the persisted fits of a run, optionally with another strategy."""
    run_dir = Path(run_dir)
    cfg = PipelineConfig.from_file(run_dir / "config.ini")
    strategy = strategy or cfg.strategy
    if strategy not in STRATEGIES:
        raise ConfigError(f"strategy must be one of {STRATEGIES}")
    single = cfg.partition is None
    _, _, plan = load_inputs(cfg, single)
    blobs = [run_dir / "fits" / f"sub_{d + 1:03d}.npz" for d in range(plan.n_subdomains)]
    missing = [b.name for b in blobs if not b.exists()]
    if missing:
        raise PipelineError("merge", f"missing fit blobs {missing}; run fit-partition first")
    fits = [SubmodelFit.load(b) for b in blobs]
    merged = merge_fits(fits, plan, strategy, cfg.seed if seed is None else seed)
    write_outputs(run_dir, merged, fits, plan)
    return merged


# ------------------------------------------------------------------ #
# Output files
# ------------------------------------------------------------------ #


def _r(x) -> str:
    return repr(float(x))


def _write_csv(path: Path, header, rows):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    tmp.replace(path)


def write_outputs(out: Path, merged: MergedResult, fits: list[SubmodelFit], plan: PartitionPlan) -> list[str]:
    out = Path(out)
    rt = merged.risks
    s = rt.summary
    rows = []
    for j, dis in enumerate(rt.disease_names):
        for i, area in enumerate(rt.area_ids):
            rows.append([area, dis] + [_r(getattr(s, f)[i, j]) for f in RiskSummary.FIELDS]
                        + [int(rt.home[i]) + 1, int(rt.n_sources[i])])
    _write_csv(out / "risks.csv", CSV_HEADERS["risks.csv"], rows)

    names = list(merged.global_summary)
    _write_csv(out / "global_params.csv", CSV_HEADERS["global_params.csv"],
               [[n] + [_r(getattr(merged.global_summary[n], f)) for f in ("mean", "sd", "q025", "median", "q975")]
                for n in names])
    rows = []
    for d, loc in enumerate(merged.local_params):
        for n in names:
            p = loc[n]
            rows.append([d + 1, n, _r(p.mean), _r(p.sd), _r(p.q025), _r(p.median), _r(p.q975),
                         _r(merged.cmc_weights[n][d])])
    _write_csv(out / "local_params.csv", CSV_HEADERS["local_params.csv"], rows)
    _write_csv(out / "criteria.csv", CSV_HEADERS["criteria.csv"],
               [[k, _r(v)] for k, v in merged.criteria.as_dict().items()])
    _write_csv(out / "subdomains.csv", CSV_HEADERS["subdomains.csv"],
               [[d + 1, plan.subdomain_ids[d], int(plan.home_members(d).size), int(plan.expanded[d].size),
                 int(fits[d].n_components)] for d in range(plan.n_subdomains)])
    tmp = out / "global_draws.npz.tmp"
    with open(tmp, "wb") as fh:
        np.savez(fh, names=np.array(names), draws=np.stack([merged.global_params[n] for n in names]))
    tmp.replace(out / "global_draws.npz")
    if merged.warnings:
        (out / "warnings.txt").write_text("\n".join(merged.warnings) + "\n", encoding="utf-8")
    files = ["config.ini", "risks.csv", "global_params.csv", "local_params.csv", "criteria.csv",
             "subdomains.csv", "global_draws.npz"]
    files += [f"fits/sub_{d + 1:03d}.npz" for d in range(plan.n_subdomains)]
    if merged.warnings:
        files.append("warnings.txt")
    return files


# ------------------------------------------------------------------ #
# Reporting
# ------------------------------------------------------------------ #


def _read_csv(path: Path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def report(run_dir: str | Path, compare: list[str | Path] | None = None, out_dir: str | Path | None = None) -> str:
    """Write plot-ready CSVs under ``<run>/report`` and return a text summary.

    Tables: ``risk_map.csv`` (median risk and exceedance probability per area
    and disease), ``correlation_density.csv`` (kernel density of each
    consensus correlation), ``local_correlations.csv`` (each area with the
    correlations of its home subdomain) and, with ``compare``, a
    ``dispersion.csv`` pairing posterior medians of this run with each other
    run, one row per (area, disease, model pair).
    """
    run_dir = Path(run_dir)
    need = ["risks.csv", "global_params.csv", "local_params.csv", "criteria.csv", "global_draws.npz", "subdomains.csv"]
    missing = [n for n in need if not (run_dir / n).exists()]
    if missing:
        raise PipelineError("report", f"{run_dir} is not a completed run (missing {missing})")
    out = Path(out_dir) if out_dir is not None else run_dir / "report"
    out.mkdir(parents=True, exist_ok=True)
    risks = _read_csv(run_dir / "risks.csv")
    _write_csv(out / "risk_map.csv", ["area", "disease", "median", "q025", "q975", "exceed"],
               [[r["area"], r["disease"], r["median"], r["q025"], r["q975"], r["exceed"]] for r in risks])

    with np.load(run_dir / "global_draws.npz") as z:
        names = [str(n) for n in z["names"]]
        draws = z["draws"]
    rows = []
    for n, x in zip(names, draws):
        if not n.startswith("rho"):
            continue
        try:
            grid, dens = kde_density(x)
        except ValueError:
            continue
        rows.extend([n, _r(a), _r(b)] for a, b in zip(grid, dens))
    _write_csv(out / "correlation_density.csv", ["parameter", "x", "density"], rows)

    local = _read_csv(run_dir / "local_params.csv")
    by_sub = {}
    for r in local:
        if r["parameter"].startswith("rho"):
            by_sub.setdefault(r["subdomain"], []).append((r["parameter"], r["mean"]))
    seen_area = OrderedDict()
    for r in risks:
        seen_area.setdefault(r["area"], r["home"])
    _write_csv(out / "local_correlations.csv", ["area", "subdomain", "parameter", "mean"],
               [[a, sub, p, m] for a, sub in seen_area.items() for p, m in by_sub.get(sub, [])])

    files = ["risk_map.csv", "correlation_density.csv", "local_correlations.csv"]
    if compare:
        mine = {(r["area"], r["disease"]): r["median"] for r in risks}
        rows = []
        for other in compare:
            other = Path(other)
            theirs = _read_csv(other / "risks.csv")
            pair = f"{run_dir.name}|{other.name}"
            for r in theirs:
                key = (r["area"], r["disease"])
                if key not in mine:
                    raise PipelineError("report", f"{other} has area {key[0]!r} not present in {run_dir}")
                rows.append([r["area"], r["disease"], pair, mine[key], r["median"]])
        _write_csv(out / "dispersion.csv", ["area", "disease", "model_pair", "median_x", "median_y"], rows)
        files.append("dispersion.csv")

    crit = {r["criterion"]: float(r["value"]) for r in _read_csv(run_dir / "criteria.csv")}
    gp = _read_csv(run_dir / "global_params.csv")
    subs = _read_csv(run_dir / "subdomains.csv")
    lines = [f"run: {run_dir}", f"subdomains: {len(subs)}", "", "criteria:"]
    lines += [f"  {k:18s} {v:14.3f}" for k, v in crit.items()]
    lines += ["", "global parameters (mean, sd, 95% interval):"]
    lines += [f"  {r['parameter']:10s} {float(r['mean']):8.4f} {float(r['sd']):8.4f} "
              f"[{float(r['q025']):8.4f}, {float(r['q975']):8.4f}]" for r in gp]
    timing_path = run_dir / "timing.json"
    if timing_path.exists():
        t = json.loads(timing_path.read_text(encoding="utf-8"))
        lines += ["", f"timing (s): run {t['run']:.2f}  merge {t['merge']:.2f}  total {t['total']:.2f}"]
    exceed = np.array([float(r["exceed"]) for r in risks])
    lines += ["", f"cells with P(R > 1) > 0.9: {int(np.sum(exceed > 0.9))} of {exceed.size}"]
    text = "\n".join(lines) + "\n"
    (out / "summary.txt").write_text(text, encoding="utf-8")
    return text
