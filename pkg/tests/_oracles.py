"""Independent reference implementations used only by the tests.

Nothing here calls the package's numerical code: the hyperprior is built
from scipy.stats densities, the latent field from a dense eigenbasis, and
the Laplace marginal from dense matrices in the (alpha, field) coordinates.
"""

from __future__ import annotations

import numpy as np
from scipy import stats
from scipy.special import gammaln


def dense_laplacian(n_areas, edges):
    Q = np.zeros((n_areas, n_areas))
    for i, j in edges:
        Q[i, j] -= 1.0
        Q[j, i] -= 1.0
        Q[i, i] += 1.0
        Q[j, j] += 1.0
    return Q


def icar_basis(Q):
    """``V+ diag(lam+)^{-1/2}``: columns span the non-null space of ``Q``."""
    lam, V = np.linalg.eigh(Q)
    keep = lam > 1e-9 * lam.max()
    return V[:, keep] / np.sqrt(lam[keep])


def lower_factor(theta, J):
    A = np.zeros((J, J))
    A[np.diag_indices(J)] = np.exp(theta[:J])
    A[np.tril_indices(J, -1)] = theta[J:]
    return A


def log_hyperprior(theta, J, dof=None):
    """Bartlett density of theta from chi-square and normal densities."""
    dof = J + 2 if dof is None else dof
    c2 = np.exp(2.0 * theta[:J])
    dofs = dof - np.arange(J)
    # change of variables c^2 = exp(2 theta): Jacobian 2 exp(2 theta)
    val = np.sum(stats.chi2.logpdf(c2, dofs) + np.log(2.0) + 2.0 * theta[:J])
    return val + np.sum(stats.norm.logpdf(theta[J:]))


def _fast_hyperprior(J, dof=None):
    """Same density as :func:`log_hyperprior`, written out for the sampler's hot loop."""
    dof = J + 2 if dof is None else dof
    k = dof - np.arange(J)
    const = float(np.sum(-0.5 * k * np.log(2.0) - gammaln(0.5 * k) + np.log(2.0)))
    const -= 0.5 * np.log(2 * np.pi) * (J * (J - 1) // 2)

    def f(theta):
        lc = theta[:J]
        n = theta[J:]
        return const + float(np.sum(k * lc - 0.5 * np.exp(2.0 * lc)) - 0.5 * n @ n)

    return f


def _adaptive_rwm(log_post, x0, n_steps, seed, burn, stat, thin=5):
    """Random-walk Metropolis with a proposal covariance learned during burn-in.

    Returns the average of ``stat(x)`` over every ``thin``-th post-burn-in state.
    """
    dim = x0.size
    rng = np.random.default_rng(seed)
    x = x0.copy()
    lp = log_post(x)
    scale = 2.38**2 / dim
    L = np.eye(dim) * 0.1
    n_burn = int(burn * n_steps)
    s1 = np.zeros(dim)
    s2 = np.zeros((dim, dim))
    cnt = 0
    total = None
    kept = 0
    block = 10_000
    for start in range(0, n_steps, block):
        Z = rng.standard_normal((block, dim))
        U = np.log(rng.random(block))
        for t in range(block):
            step = start + t
            y = x + L @ Z[t]
            lq = log_post(y)
            if U[t] < lq - lp:
                x, lp = y, lq
            if step < n_burn:
                s1 += x
                s2 += np.outer(x, x)
                cnt += 1
            elif step % thin == 0:
                v = stat(x)
                total = v if total is None else total + v
                kept += 1
        if start + block <= n_burn and cnt > 2 * dim:
            mean = s1 / cnt
            cov = s2 / cnt - np.outer(mean, mean)
            try:
                L = np.linalg.cholesky(scale * cov + 1e-8 * np.eye(dim))
            except np.linalg.LinAlgError:
                pass
    return total / kept


def mcmc_risk_means(O, E, Q, n_steps=500_000, seed=0, burn=0.3, dof=None):
    """Posterior means of ``R = exp(alpha + Theta)`` by adaptive random-walk Metropolis.

    Non-centred state ``(alpha, theta, W)`` with ``Theta = B W A'`` where
    ``B`` is the ICAR eigenbasis, ``W ~ N(0, I)`` and ``A`` the Bartlett factor.
    """
    O = np.asarray(O, dtype=np.float64)
    E = np.asarray(E, dtype=np.float64)
    I, J = O.shape
    B = icar_basis(Q)
    r = B.shape[1]
    m = J * (J + 1) // 2

    def unpack(x):
        return x[:J], x[J:J + m], x[J + m:].reshape(r, J)

    prior = _fast_hyperprior(J, dof)
    tril = np.tril_indices(J, -1)
    diag = np.diag_indices(J)

    def eta_of(x):
        alpha, th, W = unpack(x)
        A = np.zeros((J, J))
        A[diag] = np.exp(th[:J])
        A[tril] = th[J:]
        return alpha + B @ (W @ A.T)

    def log_post(x):
        alpha, th, W = unpack(x)
        if np.any(np.abs(th[:J]) > 20):
            return -np.inf
        eta = eta_of(x)
        return float(np.sum(O * eta - E * np.exp(eta)) + prior(th) - 0.5 * np.sum(W * W))

    x0 = np.zeros(J + m + r * J)
    x0[:J] = np.log(O.sum(axis=0) / E.sum(axis=0) + 1e-12)
    return _adaptive_rwm(log_post, x0, n_steps, seed, burn, lambda x: np.exp(eta_of(x)))


def mcmc_latent_means(O, E, Q, cov, n_steps=500_000, seed=0, burn=0.3):
    """Posterior mean of ``log R`` with the between-disease covariance held fixed."""
    O = np.asarray(O, dtype=np.float64)
    E = np.asarray(E, dtype=np.float64)
    I, J = O.shape
    B = icar_basis(Q)
    r = B.shape[1]
    A = np.linalg.cholesky(np.asarray(cov, dtype=np.float64))

    def eta_of(x):
        return x[:J] + B @ (x[J:].reshape(r, J) @ A.T)

    def log_post(x):
        eta = eta_of(x)
        return float(np.sum(O * eta - E * np.exp(eta)) - 0.5 * x[J:] @ x[J:])

    x0 = np.zeros(J + r * J)
    x0[:J] = np.log(O.sum(axis=0) / E.sum(axis=0))
    return _adaptive_rwm(log_post, x0, n_steps, seed, burn, eta_of)


def dense_laplace_j1(O, E, Q, log_c):
    """Laplace approximation of ``log p(O | sigma)`` for one disease, dense.

    Coordinates ``x = (alpha, z)`` with ``Theta = U z`` for an orthonormal
    basis ``U`` of the non-null space; ``z ~ N(0, sigma^2 (U'QU)^{-1})``,
    ``alpha`` flat.  Connected graphs only.
    """
    O = np.asarray(O, dtype=np.float64).ravel()
    E = np.asarray(E, dtype=np.float64).ravel()
    I = O.size
    lam, V = np.linalg.eigh(Q)
    U = V[:, lam > 1e-9 * lam.max()]
    K = (U.T @ Q @ U) / np.exp(2.0 * log_c)
    M = np.column_stack([np.ones(I), U])
    P = np.zeros((I, I))
    P[1:, 1:] = K
    x = np.zeros(I)
    x[0] = np.log(O.sum() / E.sum())
    for _ in range(100):
        eta = M @ x
        mu = E * np.exp(eta)
        g = M.T @ (O - mu) - P @ x
        H = M.T @ (mu[:, None] * M) + P
        dx = np.linalg.solve(H, g)
        x = x + dx
        if np.max(np.abs(g)) < 1e-12:
            break
    eta = M @ x
    mu = E * np.exp(eta)
    H = M.T @ (mu[:, None] * M) + P
    z = x[1:]
    loglik = np.sum(O * np.log(mu) - mu - gammaln(O + 1.0))
    log_prior_z = -0.5 * (I - 1) * np.log(2 * np.pi) + 0.5 * np.linalg.slogdet(K)[1] - 0.5 * z @ K @ z
    return loglik + log_prior_z + 0.5 * I * np.log(2 * np.pi) - 0.5 * np.linalg.slogdet(H)[1]


def quadrature_cpo_two_areas(O, E, n_grid=161, dof=3.0):
    """``p(O_1 | O_2)`` and ``p(O_2 | O_1)`` for a 2-area, 1-disease model by quadrature.

    Field ``(t, -t)`` with ``t ~ N(0, c^2 / 4)``, flat intercept, and
    ``c^2 ~ chi2(dof)``.  The field is integrated on a standardised grid
    ``t = sd * u`` so that small scales are resolved.
    """
    O = np.asarray(O, dtype=np.float64).ravel()
    E = np.asarray(E, dtype=np.float64).ravel()
    a0 = np.log(O.sum() / E.sum())
    alpha = np.linspace(a0 - 4.0, a0 + 4.0, n_grid)
    u = np.linspace(-8.0, 8.0, 2 * n_grid + 1)
    th = np.linspace(-7.0, 3.0, n_grid)
    dth = th[1] - th[0]
    log_wu = stats.norm.logpdf(u)
    log_wu -= _lse(log_wu)
    acc = {"both": [], "1": [], "2": []}
    for v in th:
        T = (np.exp(v) / 2.0) * u
        A, TT = np.meshgrid(alpha, T, indexing="ij")
        l1 = stats.poisson.logpmf(O[0], E[0] * np.exp(A + TT))
        l2 = stats.poisson.logpmf(O[1], E[1] * np.exp(A - TT))
        lp_h = stats.chi2.logpdf(np.exp(2 * v), dof) + np.log(2.0) + 2 * v
        acc["both"].append(_lse(l1 + l2 + log_wu) + lp_h)
        acc["1"].append(_lse(l1 + log_wu) + lp_h)
        acc["2"].append(_lse(l2 + log_wu) + lp_h)
    # the alpha and theta spacings cancel in the ratios
    z_both = _lse(np.array(acc["both"]))
    z_1 = _lse(np.array(acc["1"]))
    z_2 = _lse(np.array(acc["2"]))
    return np.exp(z_both - z_2), np.exp(z_both - z_1)


def _lse(x):
    x = np.asarray(x).ravel()
    m = np.max(x)
    return m + np.log(np.sum(np.exp(x - m)))
