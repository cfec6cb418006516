"""Synthetic multivariate count data and accuracy scoring.

Latent fields are drawn from the intrinsic GMRF with precision
``inv(cov) (x) Q`` through a dense eigendecomposition of ``Q``: with
``Q = V diag(lam) V'`` and ``V+`` the eigenvectors of the non-zero
eigenvalues, ``Theta = V+ diag(lam+)^{-1/2} Z A'`` where ``A A' = cov``
and ``Z`` is standard normal.  The columns of ``V+`` are orthogonal to
every component indicator, so each (disease, component) sum is zero.
This path shares no code with the sparse inference engine.
"""

from __future__ import annotations

import configparser
import csv
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .graph import AreaGraph, StructureMatrix, block_partition, lattice_graph, structure_matrix, subgraph
from .mmodel import BetweenDiseaseCov, cov_from_correlations

__all__ = [
    "DENSE_SIM_LIMIT",
    "ScenarioSpec",
    "ReplicateEstimate",
    "ParamRecovery",
    "AccuracyReport",
    "IcarBasis",
    "sample_theta",
    "sample_counts",
    "scenario1_preset",
    "scenario2_preset",
    "scenario2_correlations",
    "simulate_replicate",
    "score",
    "load_scenario",
    "save_scenario",
]

DENSE_SIM_LIMIT = 5000
SCENARIO1_SIGMA2 = (0.25, 0.16, 0.09)
SCENARIO1_RHO = (0.7, 0.5, 0.1)
SCENARIO2_SIGMA2 = (0.5, 0.4, 0.3)
TRUE_ALPHA = (-0.2, -0.1, 0.1)


class IcarBasis:
    """``V+ diag(lam+)^{-1/2}`` for a structure matrix, computed once."""

    def __init__(self, Q: StructureMatrix | np.ndarray):
        n = Q.Q.shape[0] if isinstance(Q, StructureMatrix) else np.shape(Q)[0]
        if n > DENSE_SIM_LIMIT:
            raise ValueError(f"{n} areas exceeds the dense simulation limit of {DENSE_SIM_LIMIT}")
        M = Q.Q.toarray() if isinstance(Q, StructureMatrix) else np.asarray(Q, dtype=np.float64)
        self.n_areas = n
        if not np.any(M):
            self.basis = np.zeros((n, 0))
            return
        lam, V = np.linalg.eigh(M)
        keep = lam > 1e-9 * lam.max()
        self.basis = V[:, keep] / np.sqrt(lam[keep])

    @property
    def rank(self) -> int:
        return self.basis.shape[1]

    def draw(self, cov: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        A = np.linalg.cholesky(cov)
        Z = rng.standard_normal((self.rank, cov.shape[0]))
        return self.basis @ Z @ A.T


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def sample_theta(cov: BetweenDiseaseCov, Q: StructureMatrix | IcarBasis, seed=None) -> np.ndarray:
    """One draw of the ``I x J`` spatial field from the intrinsic M-model prior."""
    basis = Q if isinstance(Q, IcarBasis) else IcarBasis(Q)
    return basis.draw(cov.cov, _as_rng(seed))


def sample_counts(log_risk, expected: np.ndarray, seed=None) -> np.ndarray:
    """Independent Poisson counts with means ``E * exp(log_risk)``.

    ``log_risk`` is an ``I x J`` array or a :class:`~mdmap.inference.LatentState`.
    """
    log_risk = getattr(log_risk, "log_risk", log_risk)
    mu = np.asarray(expected, dtype=np.float64) * np.exp(np.asarray(log_risk, dtype=np.float64))
    return _as_rng(seed).poisson(mu).astype(np.int64)


def scenario2_correlations() -> list[tuple[str, tuple[float, float, float]]]:
    """Per-region true correlations ``(rho12, rho13, rho23)`` shipped with the package."""
    text = resources.files("mdmap").joinpath("data/scenario2_correlations.csv").read_text(encoding="utf-8")
    rows = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    reader = csv.DictReader(rows)
    return [(r["region"], (float(r["rho12"]), float(r["rho13"]), float(r["rho23"]))) for r in reader]


@dataclass(eq=False)
class ScenarioSpec:
    """Everything needed to generate replicate data sets.

    ``covs`` has one entry (a single global field) or one per subdomain, in
    which case ``home`` assigns areas to subdomains and the fields are drawn
    independently on each subdomain graph.
    """

    name: str
    graph: AreaGraph
    covs: tuple[BetweenDiseaseCov, ...]
    alpha: np.ndarray
    expected: np.ndarray
    n_replicates: int = 1
    seed: int = 0
    home: np.ndarray | None = None
    disease_names: tuple[str, ...] = ()
    recipe: dict = field(default_factory=dict)

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        self.expected = np.asarray(self.expected, dtype=np.float64)
        J = self.alpha.size
        if self.expected.shape != (self.graph.n_areas, J):
            raise ValueError("expected counts must be I x J")
        if np.any(self.expected <= 0):
            raise ValueError("expected counts must be positive")
        if self.n_replicates < 1:
            raise ValueError("need at least one replicate")
        for c in self.covs:
            if c.n_diseases != J:
                raise ValueError("covariance dimension does not match alpha")
            if np.linalg.eigvalsh(c.cov).min() <= 0:
                raise ValueError("covariance is not positive definite")
        if len(self.covs) > 1:
            if self.home is None:
                raise ValueError("per-subdomain covariances need a home assignment")
            self.home = np.asarray(self.home, dtype=np.int64)
            if self.home.max() + 1 != len(self.covs):
                raise ValueError("one covariance per subdomain required")
        if not self.disease_names:
            self.disease_names = tuple(f"d{j + 1}" for j in range(J))
        self._bases = None

    @property
    def n_diseases(self) -> int:
        return self.alpha.size

    def _basis_list(self):
        if self._bases is None:
            if len(self.covs) == 1:
                self._bases = [(np.arange(self.graph.n_areas), IcarBasis(structure_matrix(self.graph)))]
            else:
                self._bases = []
                for d in range(len(self.covs)):
                    members = np.flatnonzero(self.home == d)
                    sub = subgraph(self.graph, members)
                    self._bases.append((members, IcarBasis(structure_matrix(sub))))
        return self._bases

    def replicate_seed(self, r: int) -> np.random.SeedSequence:
        return np.random.SeedSequence(self.seed, spawn_key=(r,))

    def true_params(self) -> dict[str, float]:
        """Parameter truths under the single-covariance scenario (else intercepts only)."""
        J = self.n_diseases
        out = {}
        if len(self.covs) == 1:
            c = self.covs[0]
            for k in range(J):
                for l in range(k + 1, J):
                    out[f"rho{k + 1}{l + 1}"] = float(c.rho[k, l])
            for j in range(J):
                out[f"sigma2_{j + 1}"] = float(c.sigma2[j])
        for j in range(J):
            out[f"alpha_{j + 1}"] = float(self.alpha[j])
        return out


def simulate_replicate(spec: ScenarioSpec, r: int) -> tuple[np.ndarray, np.ndarray]:
    """Replicate ``r``: returns ``(observed, true relative risks)``.

    The field is drawn with its sum-to-zero constraints in place and the
    intercepts are added afterwards.
    """
    ss = spec.replicate_seed(r)
    field_seed, count_seed = ss.spawn(2)
    rng = np.random.default_rng(field_seed)
    theta = np.zeros((spec.graph.n_areas, spec.n_diseases))
    for (members, basis), cov in zip(spec._basis_list(), spec.covs):
        theta[members] = basis.draw(cov.cov, rng)
    log_r = spec.alpha[None, :] + theta
    O = sample_counts(log_r, spec.expected, np.random.default_rng(count_seed))
    return O, np.exp(log_r)


def _default_expected(I: int, J: int, scale: float, spread: float, seed: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2**31 - 1,)))
    area = np.exp(spread * rng.standard_normal(I) - 0.5 * spread**2)
    return scale * np.repeat(area[:, None], J, axis=1)


def scenario1_preset(
    graph: AreaGraph,
    expected: np.ndarray | None = None,
    n_replicates: int = 100,
    seed: int = 0,
    expected_scale: float = 50.0,
    expected_spread: float = 0.3,
) -> ScenarioSpec:
    """One between-disease covariance over the whole domain."""
    cov = cov_from_correlations(SCENARIO1_SIGMA2, SCENARIO1_RHO)
    if expected is None:
        expected = _default_expected(graph.n_areas, 3, expected_scale, expected_spread, seed)
    recipe = {"kind": 1, "expected_scale": expected_scale, "expected_spread": expected_spread}
    return ScenarioSpec("scenario1", graph, (cov,), np.array(TRUE_ALPHA), expected, n_replicates, seed, recipe=recipe)


def scenario2_preset(
    graph: AreaGraph,
    home: np.ndarray | None,
    expected: np.ndarray | None = None,
    n_replicates: int = 100,
    seed: int = 0,
    expected_scale: float = 50.0,
    expected_spread: float = 0.3,
) -> ScenarioSpec:
    """A different covariance in every subdomain; correlations reused cyclically."""
    if home is None:
        raise ValueError("scenario 2 needs a partition")
    home = np.asarray(home, dtype=np.int64)
    table = scenario2_correlations()
    D = int(home.max()) + 1
    covs = tuple(cov_from_correlations(SCENARIO2_SIGMA2, table[d % len(table)][1]) for d in range(D))
    if expected is None:
        expected = _default_expected(graph.n_areas, 3, expected_scale, expected_spread, seed)
    recipe = {"kind": 2, "expected_scale": expected_scale, "expected_spread": expected_spread}
    return ScenarioSpec("scenario2", graph, covs, np.array(TRUE_ALPHA), expected, n_replicates, seed, home=home, recipe=recipe)


# ------------------------------------------------------------------ #
# Scoring
# ------------------------------------------------------------------ #


@dataclass(frozen=True, eq=False)
class ReplicateEstimate:
    """What scoring needs from one fitted replicate."""

    median: np.ndarray
    q025: np.ndarray
    q975: np.ndarray
    params: dict = field(default_factory=dict)

    @classmethod
    def from_result(cls, result) -> "ReplicateEstimate":
        """From a :class:`~mdmap.merge.MergedResult` or a :class:`~mdmap.inference.SubmodelFit`."""
        if hasattr(result, "global_summary"):
            r = result.risks.summary
            params = {k: (v.mean, v.sd, v.q025, v.q975) for k, v in result.global_summary.items()}
        else:
            r = result.risks
            params = {}
            for k, x in result.param_samples().items():
                q = np.quantile(x, [0.025, 0.975])
                params[k] = (float(x.mean()), float(x.std(ddof=1)), float(q[0]), float(q[1]))
        return cls(r.median, r.q025, r.q975, params)


@dataclass(frozen=True)
class ParamRecovery:
    true: float
    mean: float
    sd: float
    sim_sd: float
    coverage: float


@dataclass(frozen=True, eq=False)
class AccuracyReport:
    """Risk accuracy over replicates plus parameter recovery."""

    marb: np.ndarray
    mrrmse: np.ndarray
    risk_coverage: np.ndarray
    params: dict[str, ParamRecovery]
    n_replicates: int

    @property
    def mean_marb(self) -> float:
        return float(np.mean(self.marb))

    @property
    def mean_mrrmse(self) -> float:
        return float(np.mean(self.mrrmse))

    @property
    def mean_coverage(self) -> float:
        return float(np.mean(self.risk_coverage))

    def write_csv(self, path: str | Path, label: str = "model") -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["model", "MARB", "MRRMSE", "EC"])
            w.writerow([label, repr(self.mean_marb), repr(self.mean_mrrmse), repr(self.mean_coverage)])

    def write_params_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["parameter", "true", "mean", "sd", "sim_sd", "coverage"])
            for k in sorted(self.params):
                p = self.params[k]
                w.writerow([k, repr(p.true), repr(p.mean), repr(p.sd), repr(p.sim_sd), repr(p.coverage)])


def _ordered_mean(x: np.ndarray, axis: int = 0) -> np.ndarray:
    # sorting first makes the floating-point sum independent of input order
    return np.sort(x, axis=axis).sum(axis=axis) / x.shape[axis]


def score(estimates: list[ReplicateEstimate], truths: list[np.ndarray], true_params: dict[str, float] | None = None) -> AccuracyReport:
    """MARB, MRRMSE and interval coverage over replicates.

    ``MARB_ij = |mean_r (Rhat - R) / R|`` and
    ``MRRMSE_ij = sqrt(mean_r ((Rhat - R) / R)^2)`` with ``Rhat`` the
    posterior median.  The result does not depend on replicate order.
    """
    if len(estimates) != len(truths) or not estimates:
        raise ValueError("need one truth per replicate estimate, at least one replicate")
    truth = np.stack([np.asarray(t, dtype=np.float64) for t in truths])
    med = np.stack([np.asarray(e.median, dtype=np.float64) for e in estimates])
    if med.shape != truth.shape:
        raise ValueError(f"estimate shape {med.shape[1:]} does not match truth {truth.shape[1:]}")
    lo = np.stack([e.q025 for e in estimates])
    hi = np.stack([e.q975 for e in estimates])
    rel = (med - truth) / truth
    marb = np.abs(_ordered_mean(rel))
    mrrmse = np.sqrt(_ordered_mean(rel**2))
    cover = _ordered_mean(((lo <= truth) & (truth <= hi)).astype(np.float64))
    params = {}
    for name, tv in (true_params or {}).items():
        rows = [e.params[name] for e in estimates if name in e.params]
        if len(rows) != len(estimates):
            continue
        arr = np.array(rows)
        means = arr[:, 0]
        params[name] = ParamRecovery(
            true=float(tv),
            mean=float(_ordered_mean(means)),
            sd=float(_ordered_mean(arr[:, 1])),
            sim_sd=float(np.sqrt(_ordered_mean((means - _ordered_mean(means)) ** 2) * len(means) / max(len(means) - 1, 1))),
            coverage=float(_ordered_mean(((arr[:, 2] <= tv) & (tv <= arr[:, 3])).astype(np.float64))),
        )
    return AccuracyReport(marb, mrrmse, cover, params, len(estimates))


# ------------------------------------------------------------------ #
# Config files
# ------------------------------------------------------------------ #


def save_scenario(spec: ScenarioSpec, path: str | Path) -> None:
    """Write the recipe of a lattice preset as an INI file."""
    rec = spec.recipe
    if "nrow" not in rec:
        raise ValueError("only lattice presets built by load_scenario can be saved")
    cp = configparser.ConfigParser()
    cp["scenario"] = {
        "kind": str(rec["kind"]),
        "nrow": str(rec["nrow"]),
        "ncol": str(rec["ncol"]),
        "block_rows": str(rec.get("block_rows", 1)),
        "block_cols": str(rec.get("block_cols", 1)),
        "replicates": str(spec.n_replicates),
        "seed": str(spec.seed),
        "expected_scale": repr(rec["expected_scale"]),
        "expected_spread": repr(rec["expected_spread"]),
    }
    with open(path, "w", encoding="utf-8") as fh:
        cp.write(fh)


def load_scenario(path: str | Path) -> ScenarioSpec:
    """Build a lattice scenario from an INI recipe (section ``[scenario]``)."""
    cp = configparser.ConfigParser()
    try:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read scenario file {path}: {exc}") from exc
    if "scenario" not in cp:
        raise ConfigError(f"{path}: missing [scenario] section")
    s = cp["scenario"]
    try:
        kind = s.getint("kind", 1)
        nrow, ncol = s.getint("nrow"), s.getint("ncol")
        brow, bcol = s.getint("block_rows", 1), s.getint("block_cols", 1)
        reps, seed = s.getint("replicates", 1), s.getint("seed", 0)
        scale = s.getfloat("expected_scale", 50.0)
        spread = s.getfloat("expected_spread", 0.3)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if nrow is None or ncol is None or kind not in (1, 2):
        raise ConfigError(f"{path}: need nrow, ncol and kind in (1, 2)")
    g = lattice_graph(nrow, ncol)
    home = block_partition(nrow, ncol, brow, bcol)
    if kind == 1:
        spec = scenario1_preset(g, n_replicates=reps, seed=seed, expected_scale=scale, expected_spread=spread)
        spec.home = home
    else:
        spec = scenario2_preset(g, home, n_replicates=reps, seed=seed, expected_scale=scale, expected_spread=spread)
    spec.recipe.update(nrow=nrow, ncol=ncol, block_rows=brow, block_cols=bcol)
    return spec
