"""Laplace-approximation inference for one multivariate M-model.

Model, for areas ``i`` and diseases ``j``::

    O_ij ~ Poisson(E_ij R_ij),   log R_ij = alpha_j + theta_ij
    vec(Theta) ~ N(0, cov (x) Q^+),  sum-to-zero per (disease, component)
    alpha_j flat,  cov = A A'  (Bartlett hyperparameters)

Internally the latent field is the linear predictor ``eta = vec(log R)``.
Because ``Q 1 = 0`` on every component, a flat intercept plus a
sum-to-zero field is the same as an intrinsic GMRF prior on ``eta`` with
precision ``inv(cov) (x) Q``; the posterior precision
``inv(cov) (x) Q + diag(E exp(eta))`` is then sparse and positive definite.
On disconnected graphs the component means of ``eta`` must agree (one
shared intercept per disease), which is imposed by conditioning on linear
constraints.  Intercepts and fields are recovered as ``alpha_j =
mean_i eta_ij`` and ``theta = eta - alpha``.

Hyperparameters are handled by maximising the Laplace approximation of
their log posterior, taking a finite-difference Hessian at the mode and
drawing from the resulting Gaussian.  Each hyperparameter draw is followed
by a latent draw from the Gaussian approximation conditional on it.

CPO values are computed from leave-one-out predictive densities under the
conditional Gaussian approximation, evaluated at a subset of the
hyperparameter draws and combined by the harmonic-mean identity with
importance weights that correct the Gaussian hyperparameter proposal
towards the Laplace posterior.  The plain harmonic mean of ``p(O | mu^s)``
over joint draws (:func:`cpo`) has infinite variance when the latent
posterior is Gaussian on the log scale.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy import optimize
from scipy.special import gammaln, logsumexp

from ._linalg import SPDFactor
from .errors import ConvergenceError, NumericalError
from .graph import AreaGraph, StructureMatrix, structure_matrix
from .mmodel import (
    HyperState,
    JointPrecision,
    bartlett_cov,
    bartlett_factor,
    log_prior_hyper,
    n_hyper,
    offdiag_pairs,
)

logger = logging.getLogger(__name__)

__all__ = [
    "CountPanel",
    "LatentState",
    "FitConfig",
    "RiskSummary",
    "SubmodelFit",
    "LaplaceModel",
    "latent_mode",
    "log_posterior_hyper",
    "fit_submodel",
    "cpo",
    "cpo_from_loo",
    "risk_summaries",
    "poisson_logpmf",
]

FIT_FORMAT_VERSION = 1
_LOG_2PI = np.log(2.0 * np.pi)
_GH_NODES, _gh_w = np.polynomial.hermite_e.hermegauss(30)
_GH_LOGW = np.log(_gh_w) - 0.5 * _LOG_2PI


# ------------------------------------------------------------------ #
# Data containers
# ------------------------------------------------------------------ #


@dataclass(frozen=True, eq=False)
class CountPanel:
    """Observed and expected counts for ``I`` areas and ``J`` diseases.

    ``global_index`` maps rows to indices in the full study domain.
    """

    observed: np.ndarray
    expected: np.ndarray
    disease_names: tuple[str, ...]
    area_ids: tuple[str, ...]
    global_index: np.ndarray | None = None

    def __post_init__(self):
        O = np.asarray(self.observed)
        E = np.asarray(self.expected, dtype=np.float64)
        if O.ndim == 1:
            O = O[:, None]
        if E.ndim == 1:
            E = E[:, None]
        if O.shape != E.shape:
            raise ValueError(f"observed {O.shape} and expected {E.shape} differ in shape")
        if not np.all(np.isfinite(O)) or np.any(O < 0) or np.any(np.asarray(O) != np.round(O)):
            raise ValueError("observed counts must be non-negative integers")
        if not np.all(np.isfinite(E)) or np.any(E <= 0):
            raise ValueError("expected counts must be positive")
        I, J = O.shape
        if len(self.disease_names) != J:
            raise ValueError("one name per disease required")
        if len(self.area_ids) != I:
            raise ValueError("one id per area required")
        gi = np.arange(I) if self.global_index is None else np.asarray(self.global_index, dtype=np.int64)
        if gi.shape != (I,):
            raise ValueError("global_index must have one entry per area")
        O = O.astype(np.int64)
        for arr in (O, E, gi):
            arr.setflags(write=False)
        object.__setattr__(self, "observed", O)
        object.__setattr__(self, "expected", E)
        object.__setattr__(self, "global_index", gi)
        object.__setattr__(self, "disease_names", tuple(str(d) for d in self.disease_names))
        object.__setattr__(self, "area_ids", tuple(str(a) for a in self.area_ids))

    @property
    def n_areas(self) -> int:
        return self.observed.shape[0]

    @property
    def n_diseases(self) -> int:
        return self.observed.shape[1]

    def subset(self, members) -> "CountPanel":
        members = np.asarray(members, dtype=np.int64)
        return CountPanel(
            self.observed[members],
            self.expected[members],
            self.disease_names,
            tuple(self.area_ids[i] for i in members),
            self.global_index[members],
        )

    def permuted(self, order) -> "CountPanel":
        return self.subset(order)


@dataclass(frozen=True, eq=False)
class LatentState:
    """Disease intercepts and the spatial field (``I x J``)."""

    alpha: np.ndarray
    theta_field: np.ndarray

    @property
    def log_risk(self) -> np.ndarray:
        return self.alpha[None, :] + self.theta_field

    @property
    def vec(self) -> np.ndarray:
        return self.theta_field.ravel(order="F")

    @classmethod
    def from_log_risk(cls, eta: np.ndarray) -> "LatentState":
        alpha = eta.mean(axis=0)
        return cls(alpha, eta - alpha[None, :])


@dataclass
class FitConfig:
    """Settings for :func:`fit_submodel`; all fields are plain scalars."""

    n_samples: int = 1000
    max_newton_iter: int = 50
    newton_tol: float = 1e-8
    hyper_maxiter: int = 200
    hyper_gtol: float = 1e-4
    fd_step: float = 1e-4
    hessian_step: float = 1e-3
    seed: int = 0
    dof: float | None = None
    backend: str | None = None
    cpo_points: int = 20

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.max_newton_iter < 1:
            raise ValueError("max_newton_iter must be >= 1")
        if self.cpo_points < 1:
            raise ValueError("cpo_points must be >= 1")
        if self.newton_tol <= 0 or self.hyper_gtol <= 0:
            raise ValueError("tolerances must be positive")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "FitConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for k, v in d.items():
            if k not in known:
                raise ValueError(f"unknown fit setting {k!r}")
            kwargs[k] = v
        return cls(**kwargs)


@dataclass(frozen=True, eq=False)
class RiskSummary:
    """Posterior summaries of relative risks, each array ``I x J``."""

    mean: np.ndarray
    median: np.ndarray
    sd: np.ndarray
    q025: np.ndarray
    q975: np.ndarray
    exceed: np.ndarray

    FIELDS = ("mean", "median", "sd", "q025", "q975", "exceed")

    def take(self, rows) -> "RiskSummary":
        return RiskSummary(*(getattr(self, f)[rows] for f in self.FIELDS))


def poisson_logpmf(O, mu) -> np.ndarray:
    """Poisson log pmf, broadcasting ``O`` against ``mu``."""
    O = np.asarray(O, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return np.where(O > 0, O * np.log(mu), 0.0) - mu - gammaln(O + 1.0)


def risk_summaries(samples: np.ndarray) -> RiskSummary:
    """Summaries of relative-risk draws along axis 0.

    Quantiles use linear interpolation; the exceedance probability is the
    fraction of draws strictly above 1.
    """
    R = np.asarray(samples, dtype=np.float64)
    if R.shape[0] < 1:
        raise ValueError("need at least one draw")
    q025, median, q975 = np.quantile(R, [0.025, 0.5, 0.975], axis=0)
    sd = R.std(axis=0, ddof=1) if R.shape[0] > 1 else np.zeros(R.shape[1:])
    return RiskSummary(
        mean=R.mean(axis=0),
        median=median,
        sd=sd,
        q025=q025,
        q975=q975,
        exceed=(R > 1.0).mean(axis=0),
    )


def cpo(log_risk_samples: np.ndarray, data: CountPanel) -> np.ndarray:
    """Harmonic-mean CPO estimate from joint draws of ``log R`` (``S x I x J``).

    ``CPO_ij = [mean_s 1 / p(O_ij | mu_ij^s)]^{-1}``, clipped to ``(0, 1]``.
    """
    eta = np.asarray(log_risk_samples, dtype=np.float64)
    mu = data.expected[None] * np.exp(eta)
    logp = poisson_logpmf(data.observed[None], mu)
    log_cpo = -(logsumexp(-logp, axis=0) - np.log(eta.shape[0]))
    out = np.exp(np.minimum(log_cpo, 0.0))
    if np.any(out <= 0) or not np.all(np.isfinite(out)):
        bad = np.argwhere(~(out > 0))[:3].tolist()
        raise NumericalError(f"CPO underflow (zero predictive likelihood) at cells {bad}")
    return out


def cpo_from_loo(log_pred: np.ndarray, log_weights: np.ndarray | None, n_areas: int, n_diseases: int) -> np.ndarray:
    """Combine leave-one-out predictive densities over hyperparameter points.

    ``log_pred`` is ``K x (I J)`` in ``vec`` order; the result is
    ``[sum_k w_k / p_k]^{-1}`` with self-normalised weights ``w``, reshaped to
    ``I x J`` and clipped to ``(0, 1]``.
    """
    log_pred = np.atleast_2d(np.asarray(log_pred, dtype=np.float64))
    K = log_pred.shape[0]
    lw = np.zeros(K) if log_weights is None else np.asarray(log_weights, dtype=np.float64)
    lw = np.where(np.isfinite(lw), lw, -np.inf)
    if not np.any(np.isfinite(lw)):
        raise NumericalError("no hyperparameter point has a finite CPO weight")
    log_cpo = -(logsumexp(lw[:, None] - log_pred, axis=0) - logsumexp(lw))
    out = np.exp(np.minimum(log_cpo, 0.0)).reshape(n_diseases, n_areas).T
    if np.any(out <= 0) or not np.all(np.isfinite(out)):
        bad = np.argwhere(~(out > 0))[:3].tolist()
        raise NumericalError(f"CPO underflow (zero predictive likelihood) at cells {bad}")
    return np.ascontiguousarray(out)


# ------------------------------------------------------------------ #
# Laplace machinery
# ------------------------------------------------------------------ #


@dataclass
class ModeResult:
    eta: np.ndarray
    objective: float
    grad_norm: float
    iterations: int
    H: sp.csc_matrix
    factor: SPDFactor
    cons_V: np.ndarray | None = None
    cons_S: np.ndarray | None = None

    def logdet_constrained(self, CCt_logdet: float) -> float:
        val = self.factor.logdet()
        if self.cons_S is not None:
            val += np.linalg.slogdet(self.cons_S)[1] - CCt_logdet
        return val


class LaplaceModel:
    """Precomputed structures for repeated Laplace evaluations on one (data, graph).

    Not thread-safe: the symbolic factorisation and the warm-start vector are
    mutable state.  Create one instance per fit.
    """

    def __init__(self, data: CountPanel, graph: AreaGraph, backend: str | None = None, structure: StructureMatrix | None = None):
        if data.n_areas != graph.n_areas:
            raise ValueError("count panel and graph disagree on the number of areas")
        self.data = data
        self.graph = graph
        self.I, self.J = data.n_areas, data.n_diseases
        self.n = self.I * self.J
        self.O = data.observed.ravel(order="F").astype(np.float64)
        self.E = data.expected.ravel(order="F")
        self.logE = np.log(self.E)
        # O log E - log O!: the part of the log likelihood that does not depend on eta
        self.const_loglik = float(np.sum(self.O * self.logE) - gammaln(self.O + 1.0).sum())
        self.structure = structure if structure is not None else structure_matrix(graph)
        self.n_components = self.structure.n_components
        self.rank = self.I - self.n_components
        self.logdet_Q_plus = _logdet_laplacian_plus(self.structure, backend)
        self._build_pattern()
        self.C = self._constraints()
        self.CCt_logdet = float(np.linalg.slogdet(self.C @ self.C.T)[1]) if self.C is not None else 0.0
        self.factor = SPDFactor(self._H_template, backend=backend)
        tot_o = data.observed.sum(axis=0).astype(np.float64)
        tot_e = data.expected.sum(axis=0)
        # half a case keeps the start finite for diseases with no cases
        start = np.log(np.where(tot_o > 0, tot_o, 0.5) / tot_e)
        self.eta0 = np.repeat(start, self.I)
        self.last_eta = self.eta0.copy()

    # -- structure ------------------------------------------------------
    def _build_pattern(self):
        Q = self.structure.Q.tocoo()
        I, J = self.I, self.J
        nq = Q.nnz
        rows, cols, blk, qid = [], [], [], []
        for j in range(J):
            for l in range(J):
                rows.append(j * I + Q.row)
                cols.append(l * I + Q.col)
                blk.append(np.full(nq, j * J + l))
                qid.append(np.arange(nq))
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        blk = np.concatenate(blk)
        qid = np.concatenate(qid)
        ids = np.arange(1, rows.size + 1, dtype=np.float64)
        T = sp.csc_matrix((ids, (rows, cols)), shape=(self.n, self.n))
        T.sort_indices()
        perm = T.data.astype(np.int64) - 1
        self._blk = blk[perm]
        self._qval = Q.data[qid[perm]]
        self._indices = T.indices.copy()
        self._indptr = T.indptr.copy()
        col_of = np.repeat(np.arange(self.n), np.diff(T.indptr))
        diag = np.flatnonzero(T.indices == col_of)
        if diag.size != self.n:
            raise AssertionError("structure matrix pattern lacks diagonal entries")
        self._diag_pos = diag
        self._H_template = self._csc(np.ones(T.nnz) + 0.0 * self._qval)

    def _csc(self, data):
        return sp.csc_matrix((data, self._indices, self._indptr), shape=(self.n, self.n))

    def _constraints(self):
        comps = self.structure.components()
        if len(comps) == 1:
            return None
        rows = []
        first = comps[0]
        for j in range(self.J):
            for comp in comps[1:]:
                r = np.zeros(self.n)
                r[j * self.I + comp] = 1.0 / comp.size
                r[j * self.I + first] -= 1.0 / first.size
                rows.append(r)
        return np.array(rows)

    # -- hyperparameters --------------------------------------------------
    def omega(self, h: HyperState) -> np.ndarray:
        A = bartlett_factor(h)
        if not np.all(np.isfinite(A)) or np.any(np.diag(A) <= 0):
            raise NumericalError("Bartlett factor is not finite")
        Ainv = sla.solve_triangular(A, np.eye(self.J), lower=True)
        om = Ainv.T @ Ainv
        if not np.all(np.isfinite(om)):
            raise NumericalError("between-disease precision overflowed")
        return 0.5 * (om + om.T)

    def prior_data(self, omega: np.ndarray) -> np.ndarray:
        return omega.ravel()[self._blk] * self._qval

    def prior_precision(self, omega: np.ndarray) -> sp.csc_matrix:
        return self._csc(self.prior_data(omega))

    # -- negative log joint of vec(log R) ------------------------------------
    def objective(self, eta: np.ndarray, omega: np.ndarray) -> float:
        """``sum(mu - O eta) + eta' P eta / 2`` (no normalising constants)."""
        return self._objective(np.asarray(eta, dtype=np.float64), self.prior_precision(omega))[0]

    def gradient(self, eta: np.ndarray, omega: np.ndarray) -> np.ndarray:
        eta = np.asarray(eta, dtype=np.float64)
        return self.E * np.exp(eta) - self.O + self.prior_precision(omega) @ eta

    def hessian(self, eta: np.ndarray, omega: np.ndarray) -> sp.csc_matrix:
        hdata = self.prior_data(omega)
        hdata[self._diag_pos] += self.E * np.exp(np.asarray(eta, dtype=np.float64))
        return self._csc(hdata)

    # -- mode -------------------------------------------------------------
    def _objective(self, eta, P):
        with np.errstate(over="raise"):
            try:
                mu = self.E * np.exp(eta)
            except FloatingPointError:
                return np.inf, None
        Peta = P @ eta
        return float(np.sum(mu - self.O * eta) + 0.5 * eta @ Peta), (mu, Peta)

    def mode(self, omega: np.ndarray, start: np.ndarray | None = None, tol: float = 1e-8, maxiter: int = 50) -> ModeResult:
        """Newton iterations with step halving for the conditional latent mode."""
        pdata = self.prior_data(omega)
        P = self._csc(pdata)
        eta = (self.last_eta if start is None else np.asarray(start, dtype=np.float64)).copy()
        if self.C is not None:
            # project the start onto the constraint set
            eta = eta - self.C.T @ np.linalg.solve(self.C @ self.C.T, self.C @ eta)
        F, aux = self._objective(eta, P)
        if not np.isfinite(F):
            eta = self.eta0.copy()
            F, aux = self._objective(eta, P)
            if not np.isfinite(F):
                raise NumericalError("likelihood overflow at the starting point")
        hdata = pdata.copy()
        gnorm = np.inf
        it = 0
        V = S = None
        while True:
            mu, Peta = aux
            g = mu - self.O + Peta
            hdata[:] = pdata
            hdata[self._diag_pos] += mu
            H = self._csc(hdata)
            self.factor.factor(H)
            step = -self.factor.solve(g)
            if self.C is not None:
                V = self.factor.solve(self.C.T)
                S = self.C @ V
                lam = np.linalg.solve(S, V.T @ g)
                gproj = g - self.C.T @ lam
                step = step - V @ np.linalg.solve(S, self.C @ step)
            else:
                gproj = g
            gnorm = float(np.max(np.abs(gproj)))
            decrement = float(-step @ g)
            if gnorm < tol or decrement < 1e-2 * np.finfo(float).eps * (1.0 + abs(F)):
                break
            if it >= maxiter:
                raise ConvergenceError(
                    f"latent mode did not converge in {maxiter} Newton iterations "
                    f"(max |gradient| = {gnorm:.3e})",
                    grad_norm=gnorm,
                    iterations=it,
                )
            t = 1.0
            slope = float(g @ step)
            if decrement < 1e3 * np.finfo(float).eps * (1.0 + abs(F)):
                # decrease below the resolution of F: Armijo cannot judge it,
                # but the iterate is deep in the quadratic region
                eta = eta + step
                F, aux = self._objective(eta, P)
                it += 1
                continue
            while True:
                cand = eta + t * step
                Fc, auxc = self._objective(cand, P)
                if Fc <= F + 1e-4 * t * slope:
                    break
                t *= 0.5
                if t < 1e-12:
                    break
            if t < 1e-12:
                # no further decrease representable
                break
            eta, F, aux = cand, Fc, auxc
            it += 1
        self.last_eta = eta
        return ModeResult(eta, F, gnorm, it, H, self.factor, V, S)

    def log_marginal(self, h: HyperState, start=None, tol=1e-8, maxiter=50) -> tuple[float, ModeResult]:
        """Laplace approximation of ``log p(O | theta)`` (without the hyperprior)."""
        om = self.omega(h)
        m = self.mode(om, start=start, tol=tol, maxiter=maxiter)
        log_det_omega = -2.0 * float(np.sum(h.log_c))
        val = (
            -m.objective
            + self.const_loglik
            + 0.5 * self.rank * log_det_omega
            + 0.5 * self.J * self.logdet_Q_plus
            + 0.5 * self.J * _LOG_2PI
            - 0.5 * m.logdet_constrained(self.CCt_logdet)
        )
        return float(val), m

    def covariance_apply(self, m: ModeResult, B: np.ndarray) -> np.ndarray:
        """``Sigma B`` for the (constrained) Gaussian-approximation covariance."""
        X = m.factor.solve(B)
        if self.C is not None:
            X = X - m.cons_V @ np.linalg.solve(m.cons_S, m.cons_V.T @ B)
        return X

    def marginal_variances(self, m: ModeResult, chunk: int = 256) -> np.ndarray:
        """Diagonal of the Gaussian-approximation covariance, by blocked solves."""
        d = np.empty(self.n)
        for lo in range(0, self.n, chunk):
            hi = min(lo + chunk, self.n)
            B = np.zeros((self.n, hi - lo))
            B[np.arange(lo, hi), np.arange(hi - lo)] = 1.0
            d[lo:hi] = self.covariance_apply(m, B)[np.arange(lo, hi), np.arange(hi - lo)]
        return d

    def mean_shift(self, m: ModeResult) -> np.ndarray:
        """First-order correction from the mode to the posterior mean.

        The Poisson term has third derivative ``mu_k`` on the diagonal only,
        which gives ``E[eta] - mode ~= -1/2 Sigma (mu * diag(Sigma))``.
        """
        mu = self.E * np.exp(m.eta)
        return -0.5 * self.covariance_apply(m, mu * self.marginal_variances(m))

    def loo_log_predictive(self, m: ModeResult, variances: np.ndarray | None = None) -> np.ndarray:
        """``log p(O_k | O_-k, theta)`` for every cell under the Gaussian approximation.

        The likelihood of cell ``k`` enters the Gaussian approximation as a
        quadratic in ``eta_k`` only, so removing it from the marginal
        ``N(mode_k, v_k)`` gives the leave-one-out Gaussian exactly.  The
        Poisson probability is then integrated against it by Gauss-Hermite
        quadrature centred on the full marginal, where the integrand ratio is
        smooth.
        """
        v = self.marginal_variances(m) if variances is None else variances
        eta = m.eta
        mu = self.E * np.exp(eta)
        b = self.O - mu + mu * eta
        prec = np.maximum(1.0 / v - mu, 1e-12 / v)
        v_loo = 1.0 / prec
        m_loo = (eta / v - b) * v_loo
        x = eta[:, None] + np.sqrt(v)[:, None] * _GH_NODES[None, :]
        O, logE = self.O[:, None], self.logE[:, None]
        with np.errstate(over="ignore"):
            logp = O * (x + logE) - np.exp(x + logE) - gammaln(O + 1.0)
        log_ratio = (
            -0.5 * (x - m_loo[:, None]) ** 2 / v_loo[:, None]
            + 0.5 * (x - eta[:, None]) ** 2 / v[:, None]
            + 0.5 * np.log(v / v_loo)[:, None]
        )
        return logsumexp(logp + log_ratio + _GH_LOGW[None, :], axis=1)

    def sample(self, m: ModeResult, z: np.ndarray) -> np.ndarray:
        """Latent draw from ``N(mode, inv(H))`` conditioned on the constraints."""
        x = m.factor.sample(z)
        if self.C is not None:
            x = x - m.cons_V @ np.linalg.solve(m.cons_S, self.C @ x)
        return m.eta + x

    def unvec(self, eta: np.ndarray) -> np.ndarray:
        return eta.reshape(self.J, self.I).T


def _logdet_laplacian_plus(Qs: StructureMatrix, backend=None) -> float:
    """log of the product of non-zero eigenvalues of ``Q``.

    Per component of size ``m``: ``log m + log det`` of the Laplacian with one
    row and column removed (matrix-tree theorem).
    """
    total = 0.0
    Q = Qs.Q.tocsr()
    for comp in Qs.components():
        if comp.size == 1:
            continue
        red = Q[comp[1:]][:, comp[1:]]
        if red.shape[0] <= 200:
            sign, ld = np.linalg.slogdet(red.toarray())
        else:
            f = SPDFactor(red, backend=backend).factor(red)
            ld = f.logdet()
        total += np.log(comp.size) + ld
    return float(total)


# ------------------------------------------------------------------ #
# Public operations
# ------------------------------------------------------------------ #


def latent_mode(
    h: HyperState,
    data: CountPanel,
    prec: JointPrecision,
    tol: float = 1e-8,
    maxiter: int = 50,
) -> tuple[LatentState, sp.csc_matrix]:
    """Conditional latent mode for fixed hyperparameters.

    Returns the mode as intercepts plus sum-to-zero field, and the Gaussian
    approximation precision of ``vec(log R)`` at the mode (prior precision
    plus ``diag(E exp(eta))``).
    """
    if prec.n_areas != data.n_areas or prec.n_diseases != data.n_diseases or h.n_diseases != data.n_diseases:
        raise ValueError("dimension mismatch between hyperparameters, data and precision")
    graph = _graph_from_precision(prec, data)
    model = LaplaceModel(data, graph)
    m = model.mode(model.omega(h), tol=tol, maxiter=maxiter)
    return LatentState.from_log_risk(model.unvec(m.eta)), m.H


def _graph_from_precision(prec: JointPrecision, data: CountPanel) -> AreaGraph:
    I = prec.n_areas
    Qblock = prec.matrix[:I, :I].tocoo()
    mask = (Qblock.row < Qblock.col) & (Qblock.data != 0)
    edges = np.column_stack([Qblock.row[mask], Qblock.col[mask]])
    edges = edges[np.lexsort((edges[:, 1], edges[:, 0]))] if edges.size else np.zeros((0, 2), dtype=np.int64)
    return AreaGraph(I, edges, data.area_ids)


def log_posterior_hyper(h: HyperState, data: CountPanel, graph: AreaGraph, model: LaplaceModel | None = None) -> float:
    """Laplace approximation of ``log p(theta | O)`` up to an additive constant."""
    lp = log_prior_hyper(h)
    if not np.isfinite(lp):
        return -np.inf
    model = model if model is not None else LaplaceModel(data, graph)
    val, _ = model.log_marginal(h)
    return val + lp


# ------------------------------------------------------------------ #
# Full fit
# ------------------------------------------------------------------ #


@dataclass(eq=False)
class SubmodelFit:
    """Posterior summary of one (sub)domain fit.

    Arrays indexed by area follow ``area_ids`` / ``global_index``.
    ``log_risk_samples`` holds the ``S`` joint draws of ``log R`` (``S x I x J``);
    ``hyper_samples`` the matching Bartlett draws (``S x J(J+1)/2``).
    """

    area_ids: tuple[str, ...]
    global_index: np.ndarray
    disease_names: tuple[str, ...]
    observed: np.ndarray
    expected: np.ndarray
    hyper_mode: HyperState
    hyper_cov: np.ndarray
    latent_mode: LatentState
    latent_precision: sp.csc_matrix
    hyper_samples: np.ndarray
    log_risk_samples: np.ndarray
    cpo: np.ndarray
    risks: RiskSummary
    log_marginal: float
    n_components: int
    config: dict[str, Any] = field(default_factory=dict)
    diagnostics: dict[str, Any] = field(default_factory=dict)

    @property
    def n_areas(self) -> int:
        return len(self.area_ids)

    @property
    def n_diseases(self) -> int:
        return len(self.disease_names)

    @property
    def n_samples(self) -> int:
        return self.log_risk_samples.shape[0]

    @property
    def samples(self) -> np.ndarray:
        return self.log_risk_samples

    def risk_samples(self) -> np.ndarray:
        return np.exp(self.log_risk_samples)

    def mean_samples(self) -> np.ndarray:
        """Draws of the Poisson means ``mu = E R``."""
        return self.expected[None] * np.exp(self.log_risk_samples)

    def alpha_samples(self) -> np.ndarray:
        return self.log_risk_samples.mean(axis=1)

    def cov_samples(self) -> np.ndarray:
        J = self.n_diseases
        out = np.empty((self.n_samples, J, J))
        for s, th in enumerate(self.hyper_samples):
            A = bartlett_factor(HyperState(th, J, self.hyper_mode.dof))
            out[s] = A @ A.T
        return out

    def sigma2_samples(self) -> np.ndarray:
        c = self.cov_samples()
        return np.diagonal(c, axis1=1, axis2=2).copy()

    def rho_samples(self) -> np.ndarray:
        c = self.cov_samples()
        J = self.n_diseases
        s = np.sqrt(np.diagonal(c, axis1=1, axis2=2))
        cols = [c[:, k, l] / (s[:, k] * s[:, l]) for k in range(J) for l in range(k + 1, J)]
        return np.column_stack(cols) if cols else np.zeros((self.n_samples, 0))

    def param_samples(self) -> dict[str, np.ndarray]:
        """Draws of ``rho_kl``, ``sigma2_j`` and ``alpha_j`` keyed by name (1-based)."""
        J = self.n_diseases
        out = {}
        rho = self.rho_samples()
        names = [f"rho{k + 1}{l + 1}" for k in range(J) for l in range(k + 1, J)]
        for i, nm in enumerate(names):
            out[nm] = rho[:, i]
        sig = self.sigma2_samples()
        for j in range(J):
            out[f"sigma2_{j + 1}"] = sig[:, j]
        al = self.alpha_samples()
        for j in range(J):
            out[f"alpha_{j + 1}"] = al[:, j]
        return out

    def criteria(self):
        from .merge import deviance_criteria

        return deviance_criteria(self.mean_samples(), self.observed)

    # -- persistence --------------------------------------------------------
    def save(self, path: str | Path) -> None:
        """Write a versioned ``.npz`` blob (atomic rename)."""
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        H = self.latent_precision.tocsc()
        meta = {
            "version": FIT_FORMAT_VERSION,
            "area_ids": list(self.area_ids),
            "disease_names": list(self.disease_names),
            "dof": self.hyper_mode.dof,
            "log_marginal": self.log_marginal,
            "n_components": self.n_components,
            "config": self.config,
            "diagnostics": self.diagnostics,
        }
        with open(tmp, "wb") as fh:
            np.savez(
                fh,
                meta=np.array(json.dumps(meta, sort_keys=True)),
                global_index=self.global_index,
                observed=self.observed,
                expected=self.expected,
                hyper_theta=self.hyper_mode.theta,
                hyper_cov=self.hyper_cov,
                alpha=self.latent_mode.alpha,
                theta_field=self.latent_mode.theta_field,
                H_data=H.data,
                H_indices=H.indices,
                H_indptr=H.indptr,
                hyper_samples=self.hyper_samples,
                log_risk_samples=self.log_risk_samples,
                cpo=self.cpo,
                **{f"risk_{f}": getattr(self.risks, f) for f in RiskSummary.FIELDS},
            )
        tmp.replace(path)

    @classmethod
    def load(cls, path: str | Path) -> "SubmodelFit":
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            if meta.get("version") != FIT_FORMAT_VERSION:
                raise ValueError(f"{path}: unsupported fit format version {meta.get('version')}")
            J = len(meta["disease_names"])
            n = len(meta["area_ids"]) * J
            H = sp.csc_matrix((z["H_data"], z["H_indices"], z["H_indptr"]), shape=(n, n))
            return cls(
                area_ids=tuple(meta["area_ids"]),
                global_index=z["global_index"],
                disease_names=tuple(meta["disease_names"]),
                observed=z["observed"],
                expected=z["expected"],
                hyper_mode=HyperState(z["hyper_theta"], J, meta["dof"]),
                hyper_cov=z["hyper_cov"],
                latent_mode=LatentState(z["alpha"], z["theta_field"]),
                latent_precision=H,
                hyper_samples=z["hyper_samples"],
                log_risk_samples=z["log_risk_samples"],
                cpo=z["cpo"],
                risks=RiskSummary(*(z[f"risk_{f}"] for f in RiskSummary.FIELDS)),
                log_marginal=meta["log_marginal"],
                n_components=meta["n_components"],
                config=meta["config"],
                diagnostics=meta["diagnostics"],
            )


def _central_gradient(f, x, h):
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2.0 * h)
    return g


def fd_hessian(f, x, h):
    """Central finite-difference Hessian of a scalar function."""
    m = x.size
    H = np.empty((m, m))
    f0 = f(x)
    for i in range(m):
        ei = np.zeros(m)
        ei[i] = h
        H[i, i] = (f(x + ei) - 2.0 * f0 + f(x - ei)) / h**2
        for k in range(i):
            ek = np.zeros(m)
            ek[k] = h
            H[i, k] = H[k, i] = (f(x + ei + ek) - f(x + ei - ek) - f(x - ei + ek) + f(x - ei - ek)) / (4.0 * h * h)
    return H


def _sym_hessian(f, x, h):
    H = fd_hessian(f, x, h)
    return 0.5 * (H + H.T)


def _newton_decrement(H, g) -> float:
    """``sqrt(g' inv(H) g)``: distance to the mode in posterior-sd units."""
    try:
        evals, evecs = np.linalg.eigh(H)
    except np.linalg.LinAlgError:
        return np.inf
    if not np.all(np.isfinite(evals)) or evals.min() <= 0:
        return np.inf
    proj = evecs.T @ g
    return float(np.sqrt(np.sum(proj**2 / evals)))


def _canonical_order(data: CountPanel) -> np.ndarray:
    return np.argsort(np.array(data.area_ids, dtype=object), kind="stable")


def fit_submodel(data: CountPanel, g: AreaGraph, cfg: FitConfig | None = None) -> SubmodelFit:
    """Fit one multivariate M-model and draw from its approximate posterior.

    Steps: quasi-Newton search for the hyperparameter mode of the Laplace
    approximation (from ``theta = 0``), finite-difference Hessian at the mode,
    ``S`` joint draws (hyperparameters from the Gaussian approximation, then
    the latent field from its conditional Gaussian approximation), and CPO and
    risk summaries from the draws.  Latent draws are moved from the mode
    towards the posterior mean by a first-order skewness correction computed
    once at the hyperparameter mode.

    Areas are processed in label order internally, so a consistent
    relabelling of data and graph permutes the output exactly.
    """
    cfg = cfg or FitConfig()
    if data.n_areas != g.n_areas:
        raise ValueError("count panel and graph disagree on the number of areas")
    if tuple(data.area_ids) != tuple(g.area_ids):
        raise ValueError("count panel and graph list areas in different orders")
    order = _canonical_order(data)
    inv = np.empty_like(order)
    inv[order] = np.arange(order.size)
    sdata = data.subset(order)
    sgraph = g if np.array_equal(order, np.arange(order.size)) else _reorder_graph(g, order)
    fit = _fit_sorted(sdata, sgraph, cfg)
    if np.array_equal(order, np.arange(order.size)):
        return fit
    return _unpermute(fit, order, inv, data)


def _reorder_graph(g: AreaGraph, order: np.ndarray) -> AreaGraph:
    pos = np.empty_like(order)
    pos[order] = np.arange(order.size)
    e = pos[g.edges] if g.edges.size else np.zeros((0, 2), dtype=np.int64)
    e = np.sort(e, axis=1)
    e = e[np.lexsort((e[:, 1], e[:, 0]))] if e.size else e
    return AreaGraph(g.n_areas, e, tuple(g.area_ids[i] for i in order), global_index=g.global_index[order])


def _unpermute(fit: SubmodelFit, order, inv, data: CountPanel) -> SubmodelFit:
    I, J = fit.n_areas, fit.n_diseases
    vec_inv = (np.arange(J)[:, None] * I + inv[None, :]).ravel()
    H = fit.latent_precision.tocsr()[vec_inv][:, vec_inv].tocsc()
    lm = fit.latent_mode
    return SubmodelFit(
        area_ids=data.area_ids,
        global_index=data.global_index.copy(),
        disease_names=fit.disease_names,
        observed=fit.observed[inv],
        expected=fit.expected[inv],
        hyper_mode=fit.hyper_mode,
        hyper_cov=fit.hyper_cov,
        latent_mode=LatentState(lm.alpha, lm.theta_field[inv]),
        latent_precision=H,
        hyper_samples=fit.hyper_samples,
        log_risk_samples=np.ascontiguousarray(fit.log_risk_samples[:, inv, :]),
        cpo=fit.cpo[inv],
        risks=fit.risks.take(inv),
        log_marginal=fit.log_marginal,
        n_components=fit.n_components,
        config=fit.config,
        diagnostics=fit.diagnostics,
    )


def _fit_sorted(data: CountPanel, g: AreaGraph, cfg: FitConfig) -> SubmodelFit:
    J = data.n_diseases
    m = n_hyper(J)
    model = LaplaceModel(data, g, backend=cfg.backend)
    newton = dict(tol=cfg.newton_tol, maxiter=cfg.max_newton_iter)
    diagnostics: dict[str, Any] = {"n_components": model.n_components, "warnings": []}
    if model.n_components > 1:
        diagnostics["warnings"].append(
            f"graph has {model.n_components} connected components; "
            "one sum-to-zero constraint per (disease, component)"
        )

    cache: dict[bytes, float] = {}
    n_eval = [0]

    def neg_log_post(x):
        key = np.asarray(x, dtype=np.float64).tobytes()
        if key in cache:
            return cache[key]
        h = HyperState(x, J, cfg.dof)
        lp = log_prior_hyper(h)
        if not np.isfinite(lp):
            val = np.inf
        else:
            try:
                lm, _ = model.log_marginal(h, **newton)
                val = -(lm + lp)
            except NumericalError:
                val = np.inf
        n_eval[0] += 1
        cache[key] = val
        return val

    def grad(x):
        return _central_gradient(neg_log_post, np.asarray(x, dtype=np.float64), cfg.fd_step)

    x0 = np.zeros(m)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = optimize.minimize(
            neg_log_post, x0, jac=grad, method="BFGS",
            options={"gtol": cfg.hyper_gtol, "maxiter": cfg.hyper_maxiter},
        )
    if not np.isfinite(res.fun):
        raise ConvergenceError(
            f"hyperparameter optimisation failed: {res.message}", grad_norm=np.inf, iterations=int(res.nit)
        )
    # BFGS line searches stall once objective changes reach the noise floor
    # of the Laplace evaluations; finish with Newton steps on the
    # finite-difference Hessian and judge convergence by the Newton decrement.
    theta_hat = res.x
    fval = neg_log_post(theta_hat)
    gfin = grad(theta_hat)
    Hh = _sym_hessian(neg_log_post, theta_hat, cfg.hessian_step)
    polish = 0
    for _ in range(5):
        dec = _newton_decrement(Hh, gfin)
        if dec < 1e-3:
            break
        step = -np.linalg.solve(Hh, gfin) if np.linalg.eigvalsh(Hh).min() > 0 else -gfin / np.max(np.abs(np.diag(Hh)))
        t = 1.0
        while t > 1e-4 and not neg_log_post(theta_hat + t * step) < fval:
            t *= 0.5
        if t <= 1e-4:
            break
        theta_hat = theta_hat + t * step
        fval = neg_log_post(theta_hat)
        gfin = grad(theta_hat)
        Hh = _sym_hessian(neg_log_post, theta_hat, cfg.hessian_step)
        polish += 1
    dec = _newton_decrement(Hh, gfin)
    gmax = float(np.max(np.abs(gfin)))
    if not dec < 1e-2:
        raise ConvergenceError(
            f"hyperparameter optimisation failed: {res.message} "
            f"(max |gradient| = {gmax:.3e}, Newton decrement = {dec:.3e})",
            grad_norm=gmax,
            iterations=int(res.nit),
        )
    diagnostics.update(
        hyper_iterations=int(res.nit),
        hyper_polish_steps=polish,
        hyper_grad_norm=gmax,
        hyper_decrement=float(dec),
        hyper_message=str(res.message),
    )

    evals, evecs = np.linalg.eigh(Hh)
    if not np.all(np.isfinite(evals)) or evals.min() <= 0:
        floor = max(1e-6, 1e-6 * float(np.nanmax(np.abs(evals))))
        msg = f"hyperparameter Hessian not negative definite (min eigenvalue {evals.min():.3e}); regularised"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        diagnostics["warnings"].append(msg)
        evals = np.where(np.isfinite(evals), np.maximum(evals, floor), floor)
    hyper_cov = (evecs / evals) @ evecs.T
    Hh_reg = (evecs * evals) @ evecs.T
    hyper_cov = 0.5 * (hyper_cov + hyper_cov.T)

    h_hat = HyperState(theta_hat, J, cfg.dof)
    log_marg, mode_hat = model.log_marginal(h_hat, **newton)
    eta_hat = mode_hat.eta.copy()
    H_hat = mode_hat.H.copy()
    shift = model.mean_shift(mode_hat)

    rng = np.random.default_rng(cfg.seed)
    S = cfg.n_samples
    L = np.linalg.cholesky(hyper_cov)
    hyper_samples = theta_hat[None, :] + rng.standard_normal((S, m)) @ L.T
    eta_samples = np.empty((S, data.n_areas, J))
    K = min(S, cfg.cpo_points)
    loo = np.empty((K, model.n))
    log_w = np.empty(K)
    max_newton = 0
    for s in range(S):
        hs = HyperState(hyper_samples[s], J, cfg.dof)
        if s < K:
            lm, ms = model.log_marginal(hs, start=eta_hat, **newton)
            loo[s] = model.loo_log_predictive(ms)
            d = hyper_samples[s] - theta_hat
            # Laplace posterior over the Gaussian proposal, up to constants
            log_w[s] = lm + log_prior_hyper(hs) + 0.5 * d @ Hh_reg @ d
        else:
            ms = model.mode(model.omega(hs), start=eta_hat, **newton)
        max_newton = max(max_newton, ms.iterations)
        draw = model.sample(ms, rng.standard_normal(model.n)) + shift
        eta_samples[s] = model.unvec(draw)
    diagnostics.update(n_evaluations=n_eval[0], max_newton_per_draw=max_newton, cpo_points=K)

    c = cpo_from_loo(loo, log_w, data.n_areas, J)
    risks = risk_summaries(np.exp(eta_samples))
    return SubmodelFit(
        area_ids=data.area_ids,
        global_index=data.global_index.copy(),
        disease_names=data.disease_names,
        observed=np.asarray(data.observed).copy(),
        expected=np.asarray(data.expected).copy(),
        hyper_mode=h_hat,
        hyper_cov=hyper_cov,
        latent_mode=LatentState.from_log_risk(model.unvec(eta_hat)),
        latent_precision=H_hat,
        hyper_samples=hyper_samples,
        log_risk_samples=eta_samples,
        cpo=c,
        risks=risks,
        log_marginal=float(log_marg + log_prior_hyper(h_hat)),
        n_components=model.n_components,
        config=cfg.to_dict(),
        diagnostics=diagnostics,
    )
