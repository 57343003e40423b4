"""
=============================================================================
observation/links.py - Link Functions & Linear Predictor
=============================================================================
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logit

from etc.exceptions import ObservationError

# exp() overflows a double just past 709
ETA_CLIP = 700.0


@dataclass(frozen=True)
class LinkFunction:
    name: str

    def __post_init__(self):
        if self.name not in ('identity', 'log', 'logit'):
            raise ObservationError(f"Unknown link '{self.name}'.")

    def inverse(self, eta):
        return inv_link(eta, self.name)

    def d1(self, eta):
        return d1_inv_link(eta, self.name)

    def d2(self, eta):
        return d2_inv_link(eta, self.name)

    def forward(self, mu):
        """g(mu), used for starting values"""
        mu = np.asarray(mu, dtype=float)
        if self.name == 'identity':
            return mu
        if self.name == 'log':
            if np.any(mu <= 0):
                raise ObservationError("The log link needs a positive mean.")
            return np.log(mu)
        if np.any((mu <= 0) | (mu >= 1)):
            raise ObservationError("The logit link needs a mean in (0, 1).")
        return logit(mu)


def _clip(eta):
    return np.clip(np.asarray(eta, dtype=float), -ETA_CLIP, ETA_CLIP)


def inv_link(eta, link):
    if link == 'identity':
        return np.asarray(eta, dtype=float)
    if link == 'log':
        return np.exp(_clip(eta))
    if link == 'logit':
        return expit(_clip(eta))
    raise ObservationError(f"Unknown link '{link}'.")


def d1_inv_link(eta, link):
    if link == 'identity':
        return np.ones_like(np.asarray(eta, dtype=float))
    if link == 'log':
        return np.exp(_clip(eta))
    if link == 'logit':
        p = expit(_clip(eta))
        return p * (1.0 - p)
    raise ObservationError(f"Unknown link '{link}'.")


def d2_inv_link(eta, link):
    if link == 'identity':
        return np.zeros_like(np.asarray(eta, dtype=float))
    if link == 'log':
        return np.exp(_clip(eta))
    if link == 'logit':
        p = expit(_clip(eta))
        return p * (1.0 - p) * (1.0 - 2.0 * p)
    raise ObservationError(f"Unknown link '{link}'.")


def linear_predictor(X_row, beta, w):
    """eta = x'beta + w; X may be a single row or a matrix of rows"""
    X_row = np.asarray(X_row, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if X_row.shape[-1] != beta.size:
        raise ObservationError(
            f"Covariate row has {X_row.shape[-1]} columns but there are {beta.size} coefficients."
        )
    if beta.size == 0:
        return np.asarray(w, dtype=float) + np.zeros(X_row.shape[:-1])
    return X_row @ beta + w
