"""Sparse symmetric positive-definite factorisations.

CHOLMOD (via scikit-sparse) is used when available.  Otherwise SuperLU is
run in symmetric mode with no pivoting, which for an SPD matrix yields
``P A P' = L U`` with ``U = D L'``; that is enough for log-determinants,
solves and Gaussian sampling.  Small matrices may use a dense Cholesky.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import NumericalError

try:  # pragma: no cover - depends on the environment
    from sksparse.cholmod import CholmodNotPositiveDefiniteError
    from sksparse.cholmod import analyze as _cholmod_analyze

    HAVE_CHOLMOD = True
except ImportError:  # pragma: no cover
    HAVE_CHOLMOD = False

DENSE_LIMIT = 200


def default_backend(n: int) -> str:
    if HAVE_CHOLMOD:
        return "cholmod"
    return "superlu"


class SPDFactor:
    """Factorisation of a sparse SPD matrix with a reusable symbolic phase.

    Call :meth:`factor` with matrices that share the sparsity pattern of the
    first one; the fill-reducing ordering is computed once.
    """

    def __init__(self, pattern: sp.spmatrix, backend: str | None = None):
        self.n = pattern.shape[0]
        self.backend = backend or default_backend(self.n)
        if self.backend == "dense" and self.n > DENSE_LIMIT:
            raise ValueError(f"dense backend limited to {DENSE_LIMIT} dimensions")
        if self.backend == "cholmod" and not HAVE_CHOLMOD:
            raise ValueError("scikit-sparse is not installed")
        self._sym = None
        if self.backend == "cholmod":
            self._sym = _cholmod_analyze(sp.csc_matrix(pattern), ordering_method="amd", mode="simplicial")
        self._f = None

    def factor(self, A: sp.spmatrix) -> "SPDFactor":
        if self.backend == "cholmod":
            try:
                self._f = self._sym.cholesky(sp.csc_matrix(A))
            except CholmodNotPositiveDefiniteError:
                raise NumericalError("matrix is not positive definite") from None
        elif self.backend == "superlu":
            self._f = _SuperLUCholesky(sp.csc_matrix(A))
        else:
            M = A.toarray() if sp.issparse(A) else np.asarray(A)
            try:
                self._f = sla.cholesky(M, lower=True)
            except np.linalg.LinAlgError:
                raise NumericalError("matrix is not positive definite") from None
        return self

    def logdet(self) -> float:
        if self.backend == "cholmod":
            return float(self._f.logdet())
        if self.backend == "superlu":
            return self._f.logdet()
        return float(2.0 * np.log(np.diag(self._f)).sum())

    def solve(self, b: np.ndarray) -> np.ndarray:
        if self.backend == "cholmod":
            return self._f(b)
        if self.backend == "superlu":
            return self._f.solve(b)
        return sla.cho_solve((self._f, True), b)

    def sample(self, z: np.ndarray) -> np.ndarray:
        """Map standard normal ``z`` to a draw with covariance ``inv(A)``."""
        if self.backend == "cholmod":
            # A = P' L L' P  ->  x = P' L^{-T} z
            y = self._f.solve_Lt(z, use_LDLt_decomposition=False)
            return self._f.apply_Pt(y)
        if self.backend == "superlu":
            return self._f.sample(z)
        return sla.solve_triangular(self._f, z, lower=True, trans="T")


class _SuperLUCholesky:
    def __init__(self, A: sp.csc_matrix):
        self.lu = spla.splu(
            A,
            permc_spec="MMD_AT_PLUS_A",
            diag_pivot_thresh=0.0,
            options={"SymmetricMode": True},
        )
        if not np.array_equal(self.lu.perm_r, self.lu.perm_c):
            raise NumericalError("SuperLU applied an asymmetric permutation")
        d = self.lu.U.diagonal()
        if np.any(d <= 0) or not np.all(np.isfinite(d)):
            raise NumericalError("matrix is not positive definite")
        self.d = d
        self.U = sp.csr_matrix(self.lu.U)

    def logdet(self) -> float:
        return float(np.log(self.d).sum())

    def solve(self, b):
        return self.lu.solve(b)

    def sample(self, z):
        # P A P' = L D L'  with  U = D L'  ->  y = U^{-1} D^{1/2} z
        y = spla.spsolve_triangular(self.U, np.sqrt(self.d) * z, lower=False)
        x = np.empty_like(y)
        x[...] = y[self.lu.perm_c]
        return x
