"""
=============================================================================
spatial/covariance.py - Reparameterised Matern Covariance & Calibration
=============================================================================

C(d) = (k_cal * tau)^2 * rho_tau * corr(d / (d_bar * rho_tau))

k_cal, rho_tau and d_bar come from the persistent graph; only tau is
estimated. corr is the unit-range Matern correlation (exponential at nu=0.5).
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.special import gamma, kv

from etc.exceptions import CovarianceError
from .graph import mean_edge_distance, pairwise_distances

logger = logging.getLogger(__name__)

JITTER = 1e-10
CLAMP_TOL = 1e-10
# Nodes whose correlation deficit is below this are treated as coincident
DEFICIT_FLOOR = 1e-10


# ======================== Types ========================

@dataclass(frozen=True)
class CovarianceSpec:
    family: str = 'exponential'
    nu: float = 0.5
    tau: float = 1.0

    def __post_init__(self):
        if self.family not in ('exponential', 'matern'):
            raise CovarianceError(f"Unknown covariance family '{self.family}'.")
        if self.family == 'exponential' and self.nu != 0.5:
            raise CovarianceError("The exponential covariance has smoothness nu = 0.5.")
        if not self.nu > 0:
            raise CovarianceError("Smoothness nu must be positive.")
        if not self.tau > 0:
            raise CovarianceError("tau must be positive.")

    def with_tau(self, tau):
        return CovarianceSpec(family=self.family, nu=self.nu, tau=float(tau))


@dataclass(frozen=True)
class CovarianceCalibration:
    k_cal: float
    rho_tau: float
    mean_edge_distance: float
    marginal_variance: float

    @property
    def range_scale(self):
        """Distance divisor d_bar * rho_tau"""
        return self.mean_edge_distance * self.rho_tau

    def with_tau(self, tau):
        return CovarianceCalibration(
            k_cal=self.k_cal,
            rho_tau=self.rho_tau,
            mean_edge_distance=self.mean_edge_distance,
            marginal_variance=(self.k_cal * tau) ** 2 * self.rho_tau,
        )


@dataclass(frozen=True, eq=False)
class KrigingSystem:
    weights: np.ndarray
    cond_var: float
    cross_cov: np.ndarray
    parent_cov: np.ndarray


# ======================== Correlation ========================

def correlation(d, nu=0.5, range_scale=1.0):
    """Matern correlation at distance d; nu = 0.5 is exp(-d / range_scale)"""
    d = np.asarray(d, dtype=float)
    if np.any(d < 0):
        raise CovarianceError("Distances must be non-negative.")
    h = d / range_scale
    if nu == 0.5:
        return np.exp(-h)
    x = np.sqrt(2.0 * nu) * h
    with np.errstate(invalid='ignore', over='ignore'):
        out = (2.0 ** (1.0 - nu) / gamma(nu)) * np.power(x, nu) * kv(nu, x)
    out = np.where(x == 0.0, 1.0, out)
    # kv underflows to zero far out; the product is then zero as well
    return np.where(np.isfinite(out), out, 0.0)


def covariance(d, spec, cal):
    """Covariance between two points a distance d apart"""
    return cal.marginal_variance * correlation(d, spec.nu, cal.range_scale)


def _spd_solve(matrix, rhs, scale):
    try:
        factor = linalg.cho_factor(matrix, lower=True, check_finite=False)
    except linalg.LinAlgError:
        jittered = matrix + JITTER * scale * np.eye(matrix.shape[0])
        try:
            factor = linalg.cho_factor(jittered, lower=True, check_finite=False)
        except linalg.LinAlgError:
            raise CovarianceError(
                "Parent covariance matrix is singular even with jitter; "
                "remove near-duplicate reference locations or lower n_parents."
            )
    return linalg.cho_solve(factor, rhs, check_finite=False)


def unit_conditional(child, parents, nu, range_scale, metric='euclidean'):
    """
    Kriging weights and correlation deficit 1 - r'R^-1 r of a node given
    its parents, at unit marginal variance.
    """
    child = np.atleast_2d(np.asarray(child, dtype=float))
    parents = np.atleast_2d(np.asarray(parents, dtype=float))
    if parents.shape[0] == 0:
        return np.zeros(0), 1.0
    r = correlation(pairwise_distances(child, parents, metric)[0], nu, range_scale)
    R = correlation(pairwise_distances(parents, parents, metric), nu, range_scale)
    weights = _spd_solve(R, r, 1.0)
    deficit = 1.0 - float(r @ weights)
    if deficit < 0.0:
        if deficit < -CLAMP_TOL:
            raise CovarianceError("Kriging variance is negative beyond round-off.")
        deficit = 0.0
    return weights, deficit


def kriging_system(child, parents, spec, cal, metric='euclidean'):
    """Kriging weights c'S^-1 and variance sigma_s^2 - c'S^-1 c"""
    parents = np.atleast_2d(np.asarray(parents, dtype=float))
    if parents.shape[0] == 0:
        raise CovarianceError("A kriging system needs at least one parent.")
    child = np.atleast_2d(np.asarray(child, dtype=float))
    c = covariance(pairwise_distances(child, parents, metric)[0], spec, cal)
    S = covariance(pairwise_distances(parents, parents, metric), spec, cal)
    weights = _spd_solve(S, c, cal.marginal_variance)
    cond_var = cal.marginal_variance - float(c @ weights)
    if cond_var < 0.0:
        if cond_var < -CLAMP_TOL * cal.marginal_variance:
            raise CovarianceError("Kriging variance is negative beyond round-off.")
        cond_var = 0.0
    return KrigingSystem(weights=weights, cond_var=cond_var, cross_cov=c, parent_cov=S)


# ======================== Calibration ========================

def calibrate(dag, refs, tau, spec, metric=None):
    """
    Choose k_cal so the average persistent kriging variance equals tau^2,
    then rho_tau so the marginal variance matches the kriging variance of
    the first node given the next n_parents nodes. Both steps at rho = 1.
    """
    metric = metric or dag.metric
    d_bar = mean_edge_distance(dag, refs).mean_edge_distance
    coords = refs.coords

    deficits = []
    for i, parents in enumerate(dag.persistent_parents):
        if len(parents) == 0:
            continue
        _, a = unit_conditional(coords[i], coords[parents], spec.nu, d_bar, metric)
        if a > DEFICIT_FLOOR:
            deficits.append(a)
    if not deficits:
        raise CovarianceError("No persistent node carries kriging variance.")
    k_cal = float(np.sqrt(1.0 / np.mean(deficits)))

    head = coords[1:1 + dag.n_parents]
    _, rho_tau = unit_conditional(coords[0], head, spec.nu, d_bar, metric)
    if not rho_tau > DEFICIT_FLOOR:
        raise CovarianceError("First reference node coincides with its neighbours.")

    cal = CovarianceCalibration(
        k_cal=k_cal,
        rho_tau=float(rho_tau),
        mean_edge_distance=d_bar,
        marginal_variance=(k_cal * tau) ** 2 * rho_tau,
    )
    logger.debug("Calibration: k_cal=%.6g rho_tau=%.6g d_bar=%.6g", k_cal, rho_tau, d_bar)
    return cal
