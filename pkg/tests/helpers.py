"""Shared oracles for the test suite.

Every oracle here is deliberately independent of the library's own code
paths: quadrature instead of log-gamma identities, direct density formulas
instead of cached factorizations, dense grids instead of MCMC.
"""

import itertools

import numpy as np
from scipy import integrate, stats


def compositions(J, K):
    """All K-vectors of non-negative integers summing to J."""
    if K == 1:
        yield (J,)
        return
    for first in range(J + 1):
        for rest in compositions(J - first, K - 1):
            yield (first,) + rest


def bb_quadrature(y, J, z):
    """Beta-Binomial pmf by adaptive quadrature over the latent probability."""
    import math

    a, b = np.exp(z[0]), np.exp(z[1])
    choose = math.comb(J, y)

    def integrand(p):
        return choose * p**y * (1 - p) ** (J - y) * stats.beta.pdf(p, a, b)

    val, _ = integrate.quad(integrand, 0.0, 1.0, limit=200)
    return val


def gaussian_logpdf_direct(z, mu, sigma):
    """Multivariate normal log density via slogdet and a linear solve."""
    z = np.asarray(z, float)
    mu = np.asarray(mu, float)
    sigma = np.asarray(sigma, float)
    k = mu.size
    sign, logdet = np.linalg.slogdet(sigma)
    assert sign > 0
    d = z - mu
    return -0.5 * (k * np.log(2 * np.pi) + logdet + d @ np.linalg.solve(sigma, d))


def softmax(z):
    z = np.asarray(z, float)
    e = np.exp(z - z.max())
    return e / e.sum()


def tv_distance(p, q):
    return 0.5 * np.abs(np.asarray(p) - np.asarray(q)).sum()


def dm_log_pmf_direct(y, alpha):
    """Dirichlet-Multinomial log pmf straight from gamma-function ratios."""
    from scipy.special import gammaln

    y = np.asarray(y, float)
    alpha = np.asarray(alpha, float)
    J = y.sum()
    return float(
        gammaln(J + 1)
        - gammaln(y + 1).sum()
        + gammaln(alpha.sum())
        - gammaln(alpha.sum() + J)
        + gammaln(alpha + y).sum()
        - gammaln(alpha).sum()
    )


def grid_posterior_mean(counts, mu, sigma, lo=-10.0, hi=10.0, step=0.2):
    """Exact posterior mean of a 3-D embedding by dense grid quadrature."""
    from scipy.special import gammaln

    counts = np.asarray(counts, float)
    assert counts.size == 3, "grid oracle is written for K=3"
    g = np.arange(lo, hi + 1e-9, step)
    G = np.array(list(itertools.product(g, g, g)))
    a = np.exp(G)
    a0 = a.sum(axis=1)
    J = counts.sum()
    loglik = (
        gammaln(J + 1)
        - gammaln(counts + 1).sum()
        + gammaln(a + counts).sum(axis=1)
        - gammaln(a).sum(axis=1)
        + gammaln(a0)
        - gammaln(a0 + J)
    )
    d = G - np.asarray(mu, float)
    prec = np.linalg.inv(np.asarray(sigma, float))
    quad = np.einsum("ij,jk,ik->i", d, prec, d)
    w = loglik - 0.5 * quad
    w -= w.max()
    w = np.exp(w)
    w /= w.sum()
    return w @ G


def two_pass_correlation(X):
    """Textbook two-pass Pearson correlation, no shortcuts."""
    X = np.asarray(X, float)
    n, K = X.shape
    means = X.mean(axis=0)
    out = np.empty((K, K))
    for i in range(K):
        for j in range(K):
            xi = X[:, i] - means[i]
            xj = X[:, j] - means[j]
            out[i, j] = (xi * xj).sum() / np.sqrt((xi**2).sum() * (xj**2).sum())
    return out
