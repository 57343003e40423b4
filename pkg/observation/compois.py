"""
=============================================================================
observation/compois.py - Mean-Parameterised Conway-Maxwell-Poisson
=============================================================================

P(Y = y) = lambda^y / (y!)^nu / Z(lambda, nu)

The family is parameterised by its mean mu and a dispersion d with
nu = 1 / d: d = 1 is Poisson, d < 1 is under-dispersed and d > 1 is
over-dispersed. lambda is solved from mu numerically.
"""

import logging

import numpy as np
from scipy.optimize import brentq
from scipy.special import gammaln, logsumexp

from etc.exceptions import ObservationError

logger = logging.getLogger(__name__)

SERIES_RTOL = 1e-12
MAX_TERMS = 10_000
NEWTON_MAX_ITER = 50
NEWTON_TOL = 1e-10


def _log_terms(log_lam, nu, n_terms):
    k = np.arange(n_terms)
    return k, log_lam[:, None] * k[None, :] - nu * gammaln(k + 1.0)[None, :]


def _series_length(log_lam, nu):
    mode = np.exp(np.max(log_lam) / nu)
    return int(mode + 10.0 * np.sqrt(mode / nu + 1.0) + 30)


def series(log_lam, nu):
    """
    Log terms and log normaliser for each log(lambda). Terms are summed past
    the mode until the last one is below SERIES_RTOL of the running total.
    """
    log_lam = np.atleast_1d(np.asarray(log_lam, dtype=float))
    n_terms = min(_series_length(log_lam, nu), MAX_TERMS)
    while True:
        k, terms = _log_terms(log_lam, nu, n_terms)
        log_z = logsumexp(terms, axis=1)
        mode = np.exp(log_lam / nu)
        done = (terms[:, -1] - log_z < np.log(SERIES_RTOL)) & (n_terms - 1 > mode)
        if np.all(done):
            return k, terms, log_z
        if n_terms >= MAX_TERMS:
            raise ObservationError(
                f"Conway-Maxwell-Poisson series did not converge within {MAX_TERMS} terms."
            )
        n_terms = min(2 * n_terms, MAX_TERMS)


def moments(log_lam, nu):
    """Mean, variance and third central moment for each log(lambda)"""
    k, terms, log_z = series(log_lam, nu)
    p = np.exp(terms - log_z[:, None])
    mean = p @ k
    centred = k[None, :] - mean[:, None]
    var = (p * centred ** 2).sum(axis=1)
    third = (p * centred ** 3).sum(axis=1)
    return mean, var, third


def _bracket_solve(mu, nu):
    def gap(x):
        return moments(np.array([x]), nu)[0][0] - mu

    lo, hi = np.log(mu) * nu - 5.0, np.log(mu) * nu + 5.0
    while gap(lo) > 0:
        lo -= 5.0
    while gap(hi) < 0:
        hi += 5.0
    return brentq(gap, lo, hi, xtol=1e-14)


def solve_log_lambda(mu, dispersion):
    """log(lambda) whose distribution has mean mu"""
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    if np.any(mu <= 0) or not np.all(np.isfinite(mu)):
        raise ObservationError("Conway-Maxwell-Poisson means must be positive and finite.")
    nu = 1.0 / dispersion
    start = mu + (nu - 1.0) / (2.0 * nu)
    x = nu * np.log(np.maximum(start, 0.5 * mu))
    for _ in range(NEWTON_MAX_ITER):
        mean, var, _ = moments(x, nu)
        gap = mean - mu
        if np.all(np.abs(gap) < NEWTON_TOL * np.maximum(1.0, mu)):
            return x
        x = x - np.clip(gap / np.maximum(var, 1e-300), -5.0, 5.0)
    mean, _, _ = moments(x, nu)
    stuck = np.abs(mean - mu) >= NEWTON_TOL * np.maximum(1.0, mu)
    if stuck.any():
        logger.debug("Bracketing %d Conway-Maxwell-Poisson rate solves", int(stuck.sum()))
    for i in np.flatnonzero(stuck):
        x[i] = _bracket_solve(mu[i], nu)
    return x


def logpmf(y, mu, dispersion):
    y = np.asarray(y, dtype=float)
    mu = np.broadcast_to(np.asarray(mu, dtype=float), y.shape).reshape(-1)
    nu = 1.0 / dispersion
    x = solve_log_lambda(mu, dispersion)
    _, _, log_z = series(x, nu)
    out = y.reshape(-1) * x - nu * gammaln(y.reshape(-1) + 1.0) - log_z
    return out.reshape(y.shape)


def mean_derivatives(y, mu, dispersion):
    """First and second derivatives of the log pmf with respect to mu"""
    y = np.asarray(y, dtype=float)
    x = solve_log_lambda(mu, dispersion)
    _, var, third = moments(x, 1.0 / dispersion)
    r = y - np.asarray(mu, dtype=float)
    return r / var, -1.0 / var - r * third / var ** 3


def variance(mu, dispersion):
    x = solve_log_lambda(mu, dispersion)
    return moments(x, 1.0 / dispersion)[1]


def sample(mu, dispersion, rng):
    """Inverse-CDF draws on the truncated series"""
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    out = np.empty(mu.size, dtype=np.int64)
    values, inverse = np.unique(mu, return_inverse=True)
    x = solve_log_lambda(values, dispersion)
    k, terms, log_z = series(x, 1.0 / dispersion)
    cdf = np.cumsum(np.exp(terms - log_z[:, None]), axis=1)
    uniforms = rng.uniform(size=mu.size)
    for i, (row, u) in enumerate(zip(inverse.reshape(-1), uniforms)):
        out[i] = k[min(np.searchsorted(cdf[row], u * cdf[row, -1], side='right'), k.size - 1)]
    return out
