"""
=============================================================================
observation/families.py - Response Families & Data Likelihood
=============================================================================
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln
from scipy.stats import bernoulli, nbinom, norm, poisson

from etc.choices import FAMILY_LINKS
from etc.exceptions import ObservationError
from . import compois
from .links import ETA_CLIP, LinkFunction, inv_link, d1_inv_link, d2_inv_link

logger = logging.getLogger(__name__)

# Response parameters each family carries
FAMILY_PARAMETERS = {
    'gaussian': ('sd',),
    'poisson': (),
    'negative_binomial': ('overdispersion',),
    'compois': ('dispersion',),
    'bernoulli': (),
}
INTEGER_FAMILIES = ('poisson', 'negative_binomial', 'compois', 'bernoulli')


@dataclass(frozen=True)
class ResponseFamily:
    family: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in FAMILY_PARAMETERS:
            raise ObservationError(f"Unknown response family '{self.family}'.")
        expected = set(FAMILY_PARAMETERS[self.family])
        if set(self.params) != expected:
            raise ObservationError(
                f"Family '{self.family}' takes parameters {sorted(expected)}, got {sorted(self.params)}."
            )
        for name, value in self.params.items():
            if not (np.isfinite(value) and value > 0):
                raise ObservationError(f"Response parameter '{name}' must be positive.")

    def __hash__(self):
        return hash((self.family, tuple(sorted(self.params.items()))))

    @property
    def integer_valued(self):
        return self.family in INTEGER_FAMILIES

    def check_link(self, link):
        if link not in FAMILY_LINKS[self.family]:
            raise ObservationError(f"Link '{link}' is not available for the {self.family} family.")

    # ======================== Support ========================

    def check_support(self, y):
        y = np.asarray(y, dtype=float)
        bad = ~np.isfinite(y)
        if self.integer_valued:
            bad |= (y < 0) | (y != np.floor(y))
        if self.family == 'bernoulli':
            bad |= y > 1
        if bad.any():
            row = int(np.flatnonzero(bad)[0])
            raise ObservationError(
                f"Response {y[row]!r} at row {row} is outside the support of the {self.family} family."
            )

    def check_mean(self, mu):
        mu = np.asarray(mu, dtype=float)
        if self.family == 'gaussian':
            ok = np.isfinite(mu)
        elif self.family == 'bernoulli':
            ok = (mu > 0) & (mu < 1)
        else:
            ok = np.isfinite(mu) & (mu > 0)
        return ok

    # ======================== Densities ========================

    def log_density(self, y, mu):
        """Elementwise log pmf/pdf; -inf where mu is outside the mean domain"""
        shape = np.broadcast_shapes(np.shape(y), np.shape(mu))
        y = np.broadcast_to(np.asarray(y, dtype=float), shape).reshape(-1)
        mu = np.broadcast_to(np.asarray(mu, dtype=float), shape).reshape(-1)
        ok = self.check_mean(mu)
        out = np.full(y.shape, -np.inf)
        if not ok.any():
            return out.reshape(shape)
        ys, ms = y[ok], mu[ok]
        if self.family == 'gaussian':
            out[ok] = norm.logpdf(ys, loc=ms, scale=self.params['sd'])
        elif self.family == 'poisson':
            out[ok] = poisson.logpmf(ys, ms)
        elif self.family == 'negative_binomial':
            kappa = self.params['overdispersion']
            out[ok] = nbinom.logpmf(ys, 1.0 / kappa, 1.0 / (1.0 + kappa * ms))
        elif self.family == 'bernoulli':
            out[ok] = bernoulli.logpmf(ys, ms)
        else:
            out[ok] = compois.logpmf(ys, ms, self.params['dispersion'])
        return out.reshape(shape)

    def mean_derivatives(self, y, mu):
        """d/dmu and d2/dmu2 of the log density"""
        y = np.asarray(y, dtype=float)
        mu = np.asarray(mu, dtype=float)
        if self.family == 'gaussian':
            s2 = self.params['sd'] ** 2
            return (y - mu) / s2, np.full(mu.shape, -1.0 / s2)
        if self.family == 'poisson':
            return y / mu - 1.0, -y / mu ** 2
        if self.family == 'negative_binomial':
            kappa = self.params['overdispersion']
            denom = 1.0 + kappa * mu
            return y / mu - (y * kappa + 1.0) / denom, -y / mu ** 2 + (y * kappa + 1.0) * kappa / denom ** 2
        if self.family == 'bernoulli':
            return y / mu - (1.0 - y) / (1.0 - mu), -y / mu ** 2 - (1.0 - y) / (1.0 - mu) ** 2
        return compois.mean_derivatives(y, mu, self.params['dispersion'])

    # ======================== Moments & Simulation ========================

    def mean_variance(self, mu):
        mu = np.asarray(mu, dtype=float)
        if self.family == 'gaussian':
            return mu, np.full(mu.shape, self.params['sd'] ** 2)
        if self.family == 'poisson':
            return mu, mu
        if self.family == 'negative_binomial':
            return mu, mu + self.params['overdispersion'] * mu ** 2
        if self.family == 'bernoulli':
            return mu, mu * (1.0 - mu)
        return mu, compois.variance(mu, self.params['dispersion'])

    def simulate(self, mu, rng):
        mu = np.asarray(mu, dtype=float)
        if self.family == 'gaussian':
            return rng.normal(mu, self.params['sd'])
        if self.family == 'poisson':
            return rng.poisson(mu).astype(float)
        if self.family == 'negative_binomial':
            kappa = self.params['overdispersion']
            return rng.negative_binomial(1.0 / kappa, 1.0 / (1.0 + kappa * mu)).astype(float)
        if self.family == 'bernoulli':
            return rng.binomial(1, mu).astype(float)
        return compois.sample(mu, self.params['dispersion'], rng).reshape(mu.shape).astype(float)


# ======================== Module Operations ========================

def log_density(y, mu, family):
    return family.log_density(y, mu)


def simulate_response(mu, family, rng):
    return family.simulate(mu, rng)


def eta_terms(y, eta, family, link):
    """
    Log density and its first two derivatives in the linear predictor.
    Canonical pairs use their closed forms.
    """
    y = np.asarray(y, dtype=float)
    eta = np.asarray(eta, dtype=float)
    if family.family == 'poisson' and link == 'log':
        clipped = np.clip(eta, -ETA_CLIP, ETA_CLIP)
        mu = np.exp(clipped)
        ll = y * clipped - mu - gammaln(y + 1.0)
        return ll, y - mu, -mu
    if family.family == 'bernoulli' and link == 'logit':
        clipped = np.clip(eta, -ETA_CLIP, ETA_CLIP)
        mu = inv_link(clipped, 'logit')
        ll = y * clipped - np.logaddexp(0.0, clipped)
        return ll, y - mu, -mu * (1.0 - mu)

    mu = inv_link(eta, link)
    ll = family.log_density(y, mu)
    g1 = np.zeros_like(eta)
    g2 = np.zeros_like(eta)
    ok = np.isfinite(ll)
    if ok.any():
        m1, m2 = d1_inv_link(eta[ok], link), d2_inv_link(eta[ok], link)
        d1, d2 = family.mean_derivatives(y[ok], mu[ok])
        g1[ok] = d1 * m1
        g2[ok] = d2 * m1 ** 2 + d1 * m2
    return ll, g1, g2


def make_family(name, params=None, link=None):
    family = ResponseFamily(name, dict(params or {}))
    if link is not None:
        LinkFunction(link)
        family.check_link(link)
    return family
