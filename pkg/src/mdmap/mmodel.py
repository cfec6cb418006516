"""Between-disease covariance algebra for the M-model.

The J x J between-disease covariance is parameterised through its Bartlett
factor ``A`` (lower triangular, diagonal ``c_j > 0``), ``cov = A A'``.  The
unconstrained hyperparameter vector is

    theta = (log c_1, ..., log c_J, n_21, n_31, n_32, ..., n_J,J-1)

with the off-diagonal entries listed row by row of the lower triangle.
A Wishart(v, I) prior on ``cov`` gives independent ``c_j^2 ~ chi2(v-j+1)``
and ``n_jl ~ N(0, 1)``; :func:`log_prior_hyper` is that density expressed
in ``theta``.  The latent precision for ``vec(Theta)`` is the separable
Kronecker product ``inv(cov) (x) Q``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.special import gammaln

from .errors import NumericalError
from .graph import StructureMatrix

__all__ = [
    "HyperState",
    "BetweenDiseaseCov",
    "JointPrecision",
    "n_hyper",
    "offdiag_pairs",
    "bartlett_factor",
    "bartlett_cov",
    "bartlett_invert",
    "log_prior_hyper",
    "grad_log_prior_hyper",
    "cov_from_correlations",
    "assemble_precision",
]

_LOG2 = np.log(2.0)
_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


def n_hyper(J: int) -> int:
    return J * (J + 1) // 2


def offdiag_pairs(J: int) -> list[tuple[int, int]]:
    """Lower-triangle (row, col) pairs in the order used by ``theta``."""
    return [(j, l) for j in range(1, J) for l in range(j)]


@dataclass(frozen=True, eq=False)
class HyperState:
    """Bartlett hyperparameters for ``n_diseases`` diseases.

    ``dof`` is the Wishart degrees of freedom; ``None`` means ``J + 2``.
    """

    theta: np.ndarray
    n_diseases: int
    dof: float | None = None

    def __post_init__(self):
        J = int(self.n_diseases)
        theta = np.array(self.theta, dtype=np.float64).ravel()
        if J < 1:
            raise ValueError("need at least one disease")
        if theta.size != n_hyper(J):
            raise ValueError(f"theta has {theta.size} entries, expected {n_hyper(J)} for J={J}")
        dof = float(J + 2) if self.dof is None else float(self.dof)
        if dof <= J - 1:
            raise ValueError("Wishart degrees of freedom must exceed J - 1")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "n_diseases", J)
        object.__setattr__(self, "dof", dof)

    @classmethod
    def zeros(cls, J: int, dof: float | None = None) -> "HyperState":
        return cls(np.zeros(n_hyper(J)), J, dof)

    @property
    def log_c(self) -> np.ndarray:
        return self.theta[: self.n_diseases]

    @property
    def offdiag(self) -> np.ndarray:
        return self.theta[self.n_diseases :]

    def with_theta(self, theta) -> "HyperState":
        return HyperState(theta, self.n_diseases, self.dof)

    @property
    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.theta)))


@dataclass(frozen=True, eq=False)
class BetweenDiseaseCov:
    """Between-disease covariance with its variance/correlation split."""

    sigma2: np.ndarray
    rho: np.ndarray
    cov: np.ndarray

    @classmethod
    def from_cov(cls, cov) -> "BetweenDiseaseCov":
        cov = np.array(cov, dtype=np.float64)
        if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
            raise ValueError("covariance must be square")
        cov = 0.5 * (cov + cov.T)
        sigma2 = np.diag(cov).copy()
        if np.any(sigma2 <= 0) or not np.all(np.isfinite(cov)):
            raise NumericalError("covariance must have positive finite variances")
        s = np.sqrt(sigma2)
        rho = cov / np.outer(s, s)
        np.fill_diagonal(rho, 1.0)
        return cls(sigma2, rho, cov)

    @property
    def n_diseases(self) -> int:
        return len(self.sigma2)

    def correlations(self) -> np.ndarray:
        """Upper-triangle correlations ``rho_12, rho_13, ..., rho_J-1,J``."""
        J = self.n_diseases
        return np.array([self.rho[k, l] for k in range(J) for l in range(k + 1, J)])


@dataclass(frozen=True, eq=False)
class JointPrecision:
    """Sparse prior precision of ``vec(Theta)`` plus sum-to-zero rows.

    ``vec`` stacks disease columns, so entry ``j * I + i`` is area ``i`` of
    disease ``j``.  ``constraints`` has one row per (disease, component).
    """

    matrix: sp.csr_matrix
    constraints: sp.csr_matrix
    n_areas: int
    n_diseases: int


def bartlett_factor(h: HyperState) -> np.ndarray:
    J = h.n_diseases
    A = np.zeros((J, J))
    with np.errstate(over="ignore"):
        A[np.diag_indices(J)] = np.exp(h.log_c)
    for (j, l), v in zip(offdiag_pairs(J), h.offdiag):
        A[j, l] = v
    return A


def bartlett_cov(h: HyperState) -> BetweenDiseaseCov:
    """Between-disease covariance ``A A'`` from Bartlett hyperparameters.

    >>> import numpy as np
    >>> c = bartlett_cov(HyperState([np.log(2.0), 0.0, 1.0], 2))
    >>> c.cov.tolist()
    [[4.0, 2.0], [2.0, 2.0]]
    """
    A = bartlett_factor(h)
    if not np.all(np.isfinite(A)):
        raise NumericalError("Bartlett factor overflowed")
    cov = A @ A.T
    if not np.all(np.isfinite(cov)):
        raise NumericalError("covariance overflowed")
    return BetweenDiseaseCov.from_cov(cov)


def bartlett_invert(target: BetweenDiseaseCov | np.ndarray, dof: float | None = None) -> HyperState:
    """Recover Bartlett hyperparameters from an SPD covariance via Cholesky."""
    cov = target.cov if isinstance(target, BetweenDiseaseCov) else np.asarray(target, dtype=np.float64)
    J = cov.shape[0]
    try:
        A = np.linalg.cholesky(0.5 * (cov + cov.T))
    except np.linalg.LinAlgError:
        raise NumericalError("target covariance is not positive definite") from None
    theta = np.concatenate([np.log(np.diag(A)), [A[j, l] for j, l in offdiag_pairs(J)]])
    return HyperState(theta, J, dof)


def cov_from_correlations(sigma2, rho_upper) -> BetweenDiseaseCov:
    """Covariance ``diag(s) R diag(s)`` from variances and upper-triangle correlations."""
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    J = len(sigma2)
    R = np.eye(J)
    it = iter(np.asarray(rho_upper, dtype=np.float64).ravel())
    for k in range(J):
        for l in range(k + 1, J):
            R[k, l] = R[l, k] = next(it)
    s = np.sqrt(sigma2)
    cov = R * np.outer(s, s)
    if np.linalg.eigvalsh(cov).min() <= 0:
        raise NumericalError("correlation matrix is not positive definite")
    return BetweenDiseaseCov.from_cov(cov)


def _chi2_dofs(h: HyperState) -> np.ndarray:
    return h.dof - np.arange(h.n_diseases)


def log_prior_hyper(h: HyperState) -> float:
    """Log prior density of ``theta`` under the Wishart(v, I) Bartlett construction.

    ``J log 2 + 2 sum(theta_j) + sum log f_j(exp(2 theta_j)) + sum log phi(n)``
    where ``f_j`` is the chi-square density with ``v - j + 1`` degrees of
    freedom.  The chi-square log density is evaluated in ``theta`` directly,
    so extreme inputs give ``-inf`` rather than ``nan``.
    """
    lc = h.log_c
    if np.any(np.isnan(h.theta)) or np.any(np.isinf(h.offdiag)):
        return -np.inf
    if np.any(np.isinf(lc)):
        return -np.inf
    k = _chi2_dofs(h)
    with np.errstate(over="ignore", under="ignore"):
        x = np.exp(2.0 * lc)
    # log f_k(x) with log x = 2 theta
    log_chi2 = (0.5 * k - 1.0) * 2.0 * lc - 0.5 * x - 0.5 * k * _LOG2 - gammaln(0.5 * k)
    n = h.offdiag
    val = h.n_diseases * _LOG2 + 2.0 * lc.sum() + log_chi2.sum() - 0.5 * np.dot(n, n) - n.size * _LOG_SQRT_2PI
    return float(val) if np.isfinite(val) else -np.inf


def grad_log_prior_hyper(h: HyperState) -> np.ndarray:
    """Gradient of :func:`log_prior_hyper` with respect to ``theta``."""
    k = _chi2_dofs(h)
    g = np.empty_like(h.theta)
    J = h.n_diseases
    g[:J] = k - np.exp(2.0 * h.log_c)
    g[J:] = -h.offdiag
    return g


def assemble_precision(cov: BetweenDiseaseCov, Q: StructureMatrix, J: int | None = None) -> JointPrecision:
    """Sparse ``inv(cov) (x) Q`` with one sum-to-zero row per (disease, component)."""
    J = cov.n_diseases if J is None else int(J)
    if J != cov.n_diseases:
        raise ValueError("J does not match covariance dimension")
    try:
        cf = sla.cho_factor(cov.cov, lower=True)
    except np.linalg.LinAlgError:
        raise NumericalError("between-disease covariance is numerically singular") from None
    omega = sla.cho_solve(cf, np.eye(J))
    omega = 0.5 * (omega + omega.T)
    if not np.all(np.isfinite(omega)):
        raise NumericalError("between-disease covariance is numerically singular")
    P = sp.kron(sp.csr_matrix(omega), Q.Q, format="csr")
    I = Q.n_areas
    rows, cols = [], []
    r = 0
    for j in range(J):
        for comp in Q.components():
            rows.append(np.full(comp.size, r))
            cols.append(j * I + comp)
            r += 1
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    C = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(r, I * J))
    return JointPrecision(P, C, I, J)
