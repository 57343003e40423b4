"""
=============================================================================
prediction/simulate.py - Conditional & Unconditional Simulation
=============================================================================

Replicate i draws from its own generator seeded with (seed, i), so any
subset of replicates can be reproduced alone.
"""

import logging
from dataclasses import dataclass

import numpy as np
import progressbar

from engine.laplace import LaplaceObjective
from etc.exceptions import PredictionError
from observation.families import ResponseFamily, simulate_response
from observation.links import inv_link

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class SimulationResult:
    y: np.ndarray   # n_sim x n_obs
    u: np.ndarray   # n_sim x n_effects
    conditional: bool
    seed: int

    @property
    def n_sim(self):
        return self.y.shape[0]


def replicate_rng(seed, index):
    return np.random.default_rng([int(seed), int(index)])


def response_family(model, params, family=None, family_params=None):
    """The model's family at params, or a replacement with its own parameters"""
    if family is None:
        return ResponseFamily(model.family, params.response_params(model.family))
    replacement = ResponseFamily(family, dict(family_params or {}))
    replacement.check_link(model.link)
    return replacement


def simulate(fit, n_sim=1, *, conditional=True, seed=0, params=None, family=None,
             family_params=None, progress=False):
    """
    Draw n_sim response vectors at the fitted observation rows. conditional
    holds the random effects at the fitted modes; otherwise they are drawn
    from the process first. params replaces the fitted parameters.
    """
    if n_sim < 1:
        raise PredictionError("n_sim must be at least 1.")
    if seed < 0:
        raise PredictionError("The seed must be non-negative.")
    model = fit.model
    params = fit.params if params is None else params
    objective = LaplaceObjective(model)
    form = objective.form(params)
    resp = response_family(model, params, family, family_params)
    fixed = model.X @ params.beta if params.beta.size else np.zeros(model.n_obs)

    ys = np.empty((n_sim, model.n_obs))
    us = np.empty((n_sim, model.n_effects))
    replicates = range(n_sim)
    if progress:
        replicates = progressbar.progressbar(replicates, max_value=n_sim)
    for i in replicates:
        rng = replicate_rng(seed, i)
        u = fit.u if conditional else form.sample(rng)
        mu = inv_link(fixed + u[model.obs_effect], model.link)
        ys[i] = simulate_response(mu, resp, rng)
        us[i] = u
    logger.info("Simulated %d %s replicates", n_sim, 'conditional' if conditional else 'unconditional')
    return SimulationResult(y=ys, u=us, conditional=conditional, seed=int(seed))
