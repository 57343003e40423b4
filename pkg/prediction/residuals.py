"""
=============================================================================
prediction/residuals.py - Simulation-Based PIT Residuals
=============================================================================

For a correctly specified model the randomised PIT values are uniform on
[0, 1]. Over-dispersed data push them towards 0 and 1; under-dispersed data
pull them towards 0.5.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy import stats

from etc.conf import stnngp_setting
from etc.exceptions import ResidualError
from observation.families import INTEGER_FAMILIES
from .simulate import simulate

logger = logging.getLogger(__name__)

# mean |PIT - 0.5| for a uniform sample
UNIFORM_SPREAD = 0.25


@dataclass(frozen=True, eq=False)
class ResidualSet:
    values: np.ndarray
    n_sim: int
    observed: np.ndarray = None

    def __len__(self):
        return self.values.size


@dataclass(frozen=True)
class UniformityTest:
    statistic: float
    pvalue: float


def pit_residuals(observed, simulations, integer_valued, rng):
    """
    PIT_i = (#{sims < y_i} + U (#{sims = y_i} + 1)) / (n_sim + 1), U ~ U(0, 1)
    for integer responses and U = 1/2 otherwise.
    """
    observed = np.asarray(observed, dtype=float)
    simulations = np.asarray(simulations, dtype=float)
    if simulations.ndim != 2 or simulations.shape[1] != observed.size:
        raise ResidualError("Simulations must be an n_sim x n_observations matrix.")
    n_sim = simulations.shape[0]
    minimum = stnngp_setting('MIN_RESIDUAL_N_SIM')
    if n_sim < minimum:
        raise ResidualError(f"PIT residuals need at least {minimum} simulations, got {n_sim}.")

    below = (simulations < observed).sum(axis=0)
    ties = (simulations == observed).sum(axis=0)
    if integer_valued:
        jitter = rng.uniform(size=observed.size)
    else:
        jitter = np.full(observed.size, 0.5)
    values = (below + jitter * (ties + 1)) / (n_sim + 1)
    return ResidualSet(values=values, n_sim=n_sim, observed=observed)


def uniformity_test(residuals):
    """Kolmogorov-Smirnov test of the PIT values against U(0, 1)"""
    if len(residuals) == 0:
        raise ResidualError("No residuals to test.")
    result = stats.kstest(residuals.values, 'uniform')
    return UniformityTest(statistic=float(result.statistic), pvalue=float(result.pvalue))


def dispersion_direction(residuals, alpha=0.01):
    """'over', 'under' or 'none' from the spread of the PIT values around 0.5"""
    test = uniformity_test(residuals)
    if test.pvalue >= alpha:
        return 'none'
    spread = float(np.mean(np.abs(residuals.values - 0.5)))
    return 'over' if spread > UNIFORM_SPREAD else 'under'


def fit_residuals(fit, n_sim=None, seed=0, *, family=None, family_params=None, progress=False):
    """Conditional simulations from fit and the PIT residuals of its data"""
    n_sim = stnngp_setting('RESIDUAL_N_SIM') if n_sim is None else int(n_sim)
    minimum = stnngp_setting('MIN_RESIDUAL_N_SIM')
    if n_sim < minimum:
        raise ResidualError(f"PIT residuals need at least {minimum} simulations, got {n_sim}.")
    sims = simulate(fit, n_sim, conditional=True, seed=seed, family=family,
                    family_params=family_params, progress=progress)
    integer_valued = (family or fit.model.family) in INTEGER_FAMILIES
    rng = np.random.default_rng([int(seed), n_sim])
    residuals = pit_residuals(fit.model.y, sims.y, integer_valued, rng)
    logger.info("PIT residuals from %d simulations", n_sim)
    return residuals
