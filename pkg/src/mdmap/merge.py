"""Combine subdomain fits into full-domain results.

Three pieces:

* relative risks, either from each area's home subdomain (``original``) or
  as a CPO-weighted mixture over every subdomain containing the area
  (``mixture``);
* between-disease parameters by consensus Monte Carlo, i.e. a
  precision-weighted average of paired subdomain draws;
* deviance criteria (DIC, WAIC) from draws of the Poisson means.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp
from scipy.stats import gaussian_kde

from .graph import PartitionPlan
from .inference import RiskSummary, SubmodelFit, poisson_logpmf, risk_summaries

__all__ = [
    "STRATEGIES",
    "RiskTable",
    "Criteria",
    "ParamSummary",
    "MergedResult",
    "merge_risks_original",
    "merge_risks_mixture",
    "mixture_weights",
    "cmc_weights",
    "cmc_combine",
    "deviance_criteria",
    "kde_density",
    "summarise_draws",
    "merge_fits",
]

STRATEGIES = ("original", "mixture")


@dataclass(frozen=True, eq=False)
class RiskTable:
    """Full-domain relative-risk summaries in global area order.

    ``log_risk_samples`` (``S x I x J``) are the merged joint draws;
    ``n_sources[i]`` is the number of subdomains that contributed to area ``i``.
    """

    area_ids: tuple[str, ...]
    disease_names: tuple[str, ...]
    summary: RiskSummary
    log_risk_samples: np.ndarray
    home: np.ndarray
    n_sources: np.ndarray
    strategy: str

    @property
    def n_areas(self) -> int:
        return len(self.area_ids)


@dataclass(frozen=True)
class Criteria:
    """Deviance-based criteria from draws of the Poisson means.

    ``mean_deviance`` and ``dic`` use the usual ``-2 log p`` deviance;
    ``mean_neg_loglik`` and ``dic_literal`` use ``-log p`` for the mean term
    while keeping ``-2 log p`` at the plug-in mean.
    """

    mean_deviance: float
    deviance_at_mean: float
    p_d: float
    dic: float
    lppd: float
    p_waic: float
    waic: float
    mean_neg_loglik: float
    dic_literal: float

    def as_dict(self) -> dict[str, float]:
        return {
            "mean_deviance": self.mean_deviance,
            "deviance_at_mean": self.deviance_at_mean,
            "p_d": self.p_d,
            "dic": self.dic,
            "lppd": self.lppd,
            "p_waic": self.p_waic,
            "waic": self.waic,
            "mean_neg_loglik": self.mean_neg_loglik,
            "dic_literal": self.dic_literal,
        }


@dataclass(frozen=True)
class ParamSummary:
    mean: float
    sd: float
    q025: float
    median: float
    q975: float

    FIELDS = ("mean", "sd", "q025", "median", "q975")


@dataclass(eq=False)
class MergedResult:
    """Full-domain output of a partitioned (or global) fit.

    ``global_params`` maps parameter names (``rho12``, ``sigma2_1``,
    ``alpha_1``, ...) to combined draws; ``local_params[d]`` holds the
    summaries of subdomain ``d``; ``cmc_weights[name]`` the D weights.
    """

    risks: RiskTable
    global_params: dict[str, np.ndarray]
    global_summary: dict[str, ParamSummary]
    local_params: list[dict[str, ParamSummary]]
    cmc_weights: dict[str, np.ndarray]
    criteria: Criteria
    subdomain_ids: tuple[str, ...]
    warnings: list[str] = field(default_factory=list)


# ------------------------------------------------------------------ #
# Risks
# ------------------------------------------------------------------ #


def _local_positions(fits: list[SubmodelFit], n_areas: int) -> list[np.ndarray]:
    """For each fit, an array mapping global index -> local row (or -1)."""
    out = []
    for f in fits:
        pos = np.full(n_areas, -1, dtype=np.int64)
        pos[f.global_index] = np.arange(f.n_areas)
        out.append(pos)
    return out


def _check(fits: list[SubmodelFit], plan: PartitionPlan):
    if len(fits) != plan.n_subdomains:
        raise ValueError(f"{len(fits)} fits for {plan.n_subdomains} subdomains")
    S = {f.n_samples for f in fits}
    if len(S) != 1:
        raise ValueError(f"fits carry different numbers of draws: {sorted(S)}")
    J = {f.n_diseases for f in fits}
    if len(J) != 1:
        raise ValueError("fits disagree on the number of diseases")
    return S.pop(), J.pop()


def _area_labels(fits, plan):
    labels = [None] * plan.n_areas
    for f in fits:
        for g, lab in zip(f.global_index, f.area_ids):
            labels[g] = lab
    if any(lab is None for lab in labels):
        missing = [i for i, lab in enumerate(labels) if lab is None][:5]
        raise ValueError(f"areas {missing} are not covered by any fit")
    return tuple(labels)


def merge_risks_original(fits: list[SubmodelFit], plan: PartitionPlan) -> RiskTable:
    """Each area keeps the posterior from its home subdomain."""
    S, J = _check(fits, plan)
    I = plan.n_areas
    pos = _local_positions(fits, I)
    draws = np.empty((S, I, J))
    summ = {f: np.empty((I, J)) for f in RiskSummary.FIELDS}
    for d, fit in enumerate(fits):
        members = plan.home_members(d)
        local = pos[d][members]
        if np.any(local < 0):
            miss = members[local < 0][:5].tolist()
            raise ValueError(f"areas {miss} missing from their home fit {d}")
        draws[:, members, :] = fit.log_risk_samples[:, local, :]
        for f in RiskSummary.FIELDS:
            summ[f][members] = getattr(fit.risks, f)[local]
    return RiskTable(
        area_ids=_area_labels(fits, plan),
        disease_names=fits[0].disease_names,
        summary=RiskSummary(**summ),
        log_risk_samples=draws,
        home=plan.home.copy(),
        n_sources=np.ones(I, dtype=np.int64),
        strategy="original",
    )


def mixture_weights(cpos) -> np.ndarray:
    """Normalise CPO values along axis 0 into mixture weights.

    >>> mixture_weights([0.2, 0.3]).round(12).tolist()
    [0.4, 0.6]
    """
    c = np.asarray(cpos, dtype=np.float64)
    tot = c.sum(axis=0)
    if np.any(tot <= 0):
        raise ValueError("all CPO values are zero for some area")
    return c / tot


def merge_risks_mixture(fits: list[SubmodelFit], plan: PartitionPlan, seed: int = 0) -> RiskTable:
    """CPO-weighted mixture over all subdomains that contain each area.

    For each draw index ``s`` and cell ``(i, j)``, a contributing subdomain
    ``k`` is chosen with probability ``CPO^k_ij / sum_k CPO^k_ij`` and its
    ``s``-th draw is taken.  Areas found in a single subdomain pass through
    unchanged.
    """
    S, J = _check(fits, plan)
    I = plan.n_areas
    pos = _local_positions(fits, I)
    base = merge_risks_original(fits, plan)
    draws = base.log_risk_samples.copy()
    summ = {f: getattr(base.summary, f).copy() for f in RiskSummary.FIELDS}
    n_sources = np.zeros(I, dtype=np.int64)
    for d in range(len(fits)):
        n_sources[plan.expanded[d]] += 1
    multi = np.flatnonzero(n_sources > 1)
    rng = np.random.default_rng(seed)
    if multi.size:
        u = rng.random((S, multi.size, J))
        for t, i in enumerate(multi):
            comps = [d for d in range(len(fits)) if pos[d][i] >= 0]
            cp = np.array([fits[d].cpo[pos[d][i]] for d in comps])  # m x J
            w = mixture_weights(cp)
            cum = np.cumsum(w, axis=0)
            cum[-1] = 1.0
            stack = np.stack([fits[d].log_risk_samples[:, pos[d][i], :] for d in comps])  # m x S x J
            choice = (u[:, t, :][None] >= cum[:, None, :]).sum(axis=0)  # S x J
            draws[:, i, :] = np.take_along_axis(stack, choice[None], axis=0)[0]
        sub = risk_summaries(np.exp(draws[:, multi, :]))
        for f in RiskSummary.FIELDS:
            summ[f][multi] = getattr(sub, f)
    return RiskTable(
        area_ids=base.area_ids,
        disease_names=base.disease_names,
        summary=RiskSummary(**summ),
        log_risk_samples=draws,
        home=plan.home.copy(),
        n_sources=n_sources,
        strategy="mixture",
    )


# ------------------------------------------------------------------ #
# Consensus Monte Carlo
# ------------------------------------------------------------------ #


def cmc_weights(variances) -> np.ndarray:
    """Inverse-variance weights.

    >>> cmc_weights([1.0, 3.0]).tolist()
    [0.75, 0.25]
    """
    v = np.asarray(variances, dtype=np.float64)
    if np.any(v <= 0) or not np.all(np.isfinite(v)):
        raise ValueError("variances must be positive and finite")
    p = 1.0 / v
    return p / p.sum()


def _thin_to(draws: np.ndarray, S: int) -> np.ndarray:
    n = draws.shape[0]
    if n == S:
        return draws
    idx = (np.arange(S) * n) // S
    return draws[idx]


def cmc_combine(param_draws, marginal_variances=None) -> tuple[np.ndarray, np.ndarray]:
    """Precision-weighted average of paired subdomain draws.

    ``param_draws`` is a ``D x S`` array (or a list of D draw vectors, which
    are thinned deterministically to the shortest length).  Variances
    default to the sample variances of each row.  Returns ``(draws,
    weights)``.  If some subdomain has zero variance its draws are returned
    unchanged with a warning.
    """
    if isinstance(param_draws, np.ndarray) and param_draws.ndim == 2:
        X = np.asarray(param_draws, dtype=np.float64)
    else:
        rows = [np.asarray(r, dtype=np.float64).ravel() for r in param_draws]
        S = min(r.size for r in rows)
        X = np.stack([_thin_to(r, S) for r in rows])
    D, S = X.shape
    if D == 0 or S == 0:
        raise ValueError("no draws to combine")
    if D == 1:
        return X[0].copy(), np.ones(1)
    if marginal_variances is None:
        v = X.var(axis=1, ddof=1) if S > 1 else np.zeros(D)
    else:
        v = np.asarray(marginal_variances, dtype=np.float64)
        if v.shape != (D,):
            raise ValueError("one variance per subdomain required")
    # a constant row can give a rounding-level positive sample variance
    zero = np.flatnonzero((v <= 0) | (np.ptp(X, axis=1) == 0))
    if zero.size:
        d = int(zero[0])
        warnings.warn(f"subdomain {d} has zero posterior variance; its draws are used verbatim", RuntimeWarning, stacklevel=2)
        w = np.zeros(D)
        w[d] = 1.0
        return X[d].copy(), w
    w = cmc_weights(v)
    return w @ X, w


def summarise_draws(x) -> ParamSummary:
    x = np.asarray(x, dtype=np.float64)
    q025, med, q975 = np.quantile(x, [0.025, 0.5, 0.975])
    sd = float(x.std(ddof=1)) if x.size > 1 else 0.0
    return ParamSummary(float(x.mean()), sd, float(q025), float(med), float(q975))


def kde_density(draws, grid=None, n_grid: int = 512) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian-kernel density estimate with Silverman's bandwidth.

    The default grid spans the draws plus five bandwidths on each side, so
    the density integrates to one up to truncation of order 1e-6.
    """
    x = np.asarray(draws, dtype=np.float64).ravel()
    if x.size < 2 or np.ptp(x) == 0:
        raise ValueError("need at least two distinct draws for a density estimate")
    kde = gaussian_kde(x, bw_method="silverman")
    bw = float(np.sqrt(kde.covariance[0, 0]))
    if grid is None:
        grid = np.linspace(x.min() - 5 * bw, x.max() + 5 * bw, n_grid)
    grid = np.asarray(grid, dtype=np.float64)
    return grid, kde(grid)


# ------------------------------------------------------------------ #
# Criteria
# ------------------------------------------------------------------ #


def deviance_criteria(mu_samples, observed) -> Criteria:
    """DIC and WAIC from draws of the Poisson means.

    ``mu_samples`` has the draws on axis 0 and the cells of ``observed``
    on the remaining axes.  ``D(C) = -2 log p(O | C)`` summed over cells;
    ``DIC = 2 mean_s D(C^s) - D(mean_s C^s)``.  The WAIC variance term uses
    ``ddof = 1`` and is undefined (nan) for a single draw.
    """
    mu = np.asarray(mu_samples, dtype=np.float64)
    O = np.asarray(observed)
    if mu.shape[1:] != O.shape:
        raise ValueError(f"draws of shape {mu.shape[1:]} do not match observed {O.shape}")
    if not np.all(mu > 0) or not np.all(np.isfinite(mu)):
        raise ValueError("Poisson means must be positive and finite in every draw")
    S = mu.shape[0]
    logp = poisson_logpmf(O[None], mu)  # S x cells
    ll_s = logp.reshape(S, -1).sum(axis=1)
    mean_dev = float(-2.0 * ll_s.mean())
    mean_neg = float(-ll_s.mean())
    dev_at_mean = float(-2.0 * poisson_logpmf(O, mu.mean(axis=0)).sum())
    p_d = mean_dev - dev_at_mean
    lp = logp.reshape(S, -1)
    lppd = float((logsumexp(lp, axis=0) - np.log(S)).sum())
    # centring on the first draw makes constant columns give exactly zero
    p_waic = float((lp - lp[0]).var(axis=0, ddof=1).sum()) if S > 1 else float("nan")
    return Criteria(
        mean_deviance=mean_dev,
        deviance_at_mean=dev_at_mean,
        p_d=p_d,
        dic=2.0 * mean_dev - dev_at_mean,
        lppd=lppd,
        p_waic=p_waic,
        waic=-2.0 * lppd + 2.0 * p_waic,
        mean_neg_loglik=mean_neg,
        dic_literal=2.0 * mean_neg - dev_at_mean,
    )


# ------------------------------------------------------------------ #
# Everything together
# ------------------------------------------------------------------ #


def merge_fits(fits: list[SubmodelFit], plan: PartitionPlan, strategy: str = "original", seed: int = 0) -> MergedResult:
    """Merge subdomain fits: risks, consensus parameters, criteria."""
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown merge strategy {strategy!r}; choose from {STRATEGIES}")
    notes: list[str] = []
    if strategy == "original":
        risks = merge_risks_original(fits, plan)
    else:
        risks = merge_risks_mixture(fits, plan, seed=seed)

    local = [f.param_samples() for f in fits]
    names = list(local[0])
    global_params, global_summary, weights = {}, {}, {}
    for name in names:
        X = np.stack([loc[name] for loc in local])
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            draws, w = cmc_combine(X)
        for c in caught:
            notes.append(f"{name}: {c.message}")
            warnings.warn(c.message, c.category, stacklevel=2)
        global_params[name] = draws
        global_summary[name] = summarise_draws(draws)
        weights[name] = w
    local_summary = [{n: summarise_draws(loc[n]) for n in names} for loc in local]

    expected = np.empty((plan.n_areas, risks.log_risk_samples.shape[2]))
    observed = np.empty_like(expected, dtype=np.int64)
    for f in fits:
        expected[f.global_index] = f.expected
        observed[f.global_index] = f.observed
    mu = expected[None] * np.exp(risks.log_risk_samples)
    crit = deviance_criteria(mu, observed)
    for d, f in enumerate(fits):
        if f.n_components > 1:
            notes.append(
                f"subdomain {plan.subdomain_ids[d]}: graph has {f.n_components} components, "
                "one sum-to-zero constraint per (disease, component)"
            )
    return MergedResult(
        risks=risks,
        global_params=global_params,
        global_summary=global_summary,
        local_params=local_summary,
        cmc_weights=weights,
        criteria=crit,
        subdomain_ids=plan.subdomain_ids,
        warnings=notes,
    )
