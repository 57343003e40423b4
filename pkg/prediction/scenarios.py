"""
=============================================================================
prediction/scenarios.py - Simulation Studies on the Unit Square
=============================================================================

The study designs used to check the model end to end: a 221-point grid
over the unit square, a north-south transect at x = 0.387, a single-year
tau-scaling study, spatio-temporal recovery with two forecast years, and
PIT-based dispersion detection.
"""

import logging
from dataclasses import dataclass

import numpy as np
import progressbar

from engine.laplace import LaplaceObjective
from engine.model import assemble
from engine.optimizer import FitResult, fit
from engine.parameters import Parameter, ParameterSet, default_parameters
from observation.families import ResponseFamily
from observation.links import inv_link
from .predict import predict, predict_w
from .residuals import dispersion_direction, fit_residuals, uniformity_test

logger = logging.getLogger(__name__)

TRANSECT_X = 0.387
Z95 = 1.959963984540054

GAUSSIAN_SCENARIOS = {
    'tau1_sigma5': dict(tau=1.0, sigma=5.0),
    'tau1_sigma15': dict(tau=1.0, sigma=15.0),
    'tau3_sigma5': dict(tau=3.0, sigma=5.0),
    'tau3_sigma15': dict(tau=3.0, sigma=15.0),
}
POISSON_SCENARIOS = {
    'tau0.05_mu8': dict(tau=0.05, mu=np.log(8.0)),
    'tau0.05_mu15': dict(tau=0.05, mu=np.log(15.0)),
    'tau0.2_mu8': dict(tau=0.2, mu=np.log(8.0)),
    'tau0.2_mu15': dict(tau=0.2, mu=np.log(15.0)),
}
# generating family -> (family parameters, expected PIT pattern against a Poisson fit)
DISPERSION_CASES = {
    'poisson': ({}, 'none'),
    'negative_binomial': ({'overdispersion': 0.5}, 'over'),
    'compois': ({'dispersion': 0.7}, 'under'),
}


# ======================== Designs ========================

def unit_square_grid():
    """(0.1x, 0.1y) for x, y in 0..10 and the 100 cell centres between them"""
    lattice = np.array([(0.1 * x, 0.1 * y) for x in range(11) for y in range(11)])
    centres = np.array([(0.1 * x + 0.05, 0.1 * y + 0.05) for x in range(10) for y in range(10)])
    return np.vstack([lattice, centres])


def transect(x=TRANSECT_X, n=101):
    return np.column_stack([np.full(n, x), 0.01 * np.arange(n)])


def gaussian_truth(tau, sigma, mu=0.0, phi=0.5, sd=2.0):
    return ParameterSet([
        Parameter('tau', tau), Parameter('nu', 0.5, fixed=True), Parameter('mu', mu),
        Parameter('phi', phi), Parameter('sigma', sigma), Parameter('sd', sd),
    ])


def poisson_truth(tau, mu, phi=0.5, sigma=0.5):
    return ParameterSet([
        Parameter('tau', tau), Parameter('nu', 0.5, fixed=True), Parameter('mu', mu),
        Parameter('phi', phi), Parameter('sigma', sigma),
    ])


def empty_model(refs, n_times, family, link, n_parents=15):
    """Reference nodes and times with no observations"""
    dim = refs.shape[1]
    return assemble(np.zeros((0, dim)), np.zeros(0, dtype=np.int64), np.zeros(0), family=family,
                    link=link, n_parents=n_parents, reference_coords=refs, n_times=n_times)


# ======================== Tau Scaling ========================

@dataclass(frozen=True, eq=False)
class TauScalingResult:
    taus: tuple
    means: np.ndarray   # len(taus) x n_points
    ses: np.ndarray

    def max_mean_difference(self):
        """Largest spread of the means across tau, relative to the largest mean"""
        scale = max(float(np.abs(self.means).max()), 1e-300)
        return float((self.means.max(axis=0) - self.means.min(axis=0)).max() / scale)

    def se_ratios(self):
        """SEs relative to those under the first tau"""
        return self.ses / self.ses[0]


def tau_scaling_study(taus=(0.5, 1.0, 2.0), simulation_tau=1.0, seed=0, n_parents=15):
    """
    Simulate one year of random effects on the grid at simulation_tau, then
    predict the transect under each tau with every grid effect held at its
    simulated value.
    """
    grid = unit_square_grid()
    model = empty_model(grid, 1, 'gaussian', 'identity', n_parents)
    truth = gaussian_truth(simulation_tau, sigma=1.0, sd=1.0)
    u = LaplaceObjective(model).form(truth).sample(np.random.default_rng(seed))

    points = transect()
    means, ses = [], []
    for tau in taus:
        pinned = FitResult.pinned(model, truth.with_values(tau=tau), u)
        effects = predict_w(pinned, points, np.zeros(points.shape[0], dtype=np.int64), hold_state=True)
        means.append(effects.w)
        ses.append(effects.w_se)
    return TauScalingResult(taus=tuple(taus), means=np.array(means), ses=np.array(ses))


# ======================== Recovery ========================

@dataclass(frozen=True, eq=False)
class ReplicateOutcome:
    replicate: int
    message: str
    estimates: dict
    se: dict
    covered: dict
    fitted_coverage: float
    forecast_coverage: float
    positive_response: bool


def simulate_panel(truth, family, link, n_years, n_fit_years, rng, n_parents=15):
    """
    Effects on the grid and the transect for n_years; responses on the grid
    for the first n_fit_years. Returns (coords, times, y, transect effects).
    """
    grid = unit_square_grid()
    model = empty_model(grid, n_years, family, link, n_parents)
    line = transect()
    line_times = np.repeat(np.arange(n_years), line.shape[0])
    model, line_effects = model.locate(np.tile(line, (n_years, 1)), line_times)
    u = LaplaceObjective(model).form(truth).sample(rng)

    refs = model.refs.coords
    M = refs.shape[0]
    coords = np.tile(refs, (n_fit_years, 1))
    times = np.repeat(np.arange(n_fit_years), M)
    effects = np.array([model.layout.ref_index(int(t), i % M) for i, t in enumerate(times)])
    mu = inv_link(u[effects], link)
    family_obj = ResponseFamily(family, truth.response_params(family))
    y = family_obj.simulate(mu, rng)
    truth_line = u[line_effects].reshape(n_years, line.shape[0])
    return coords, times, y, truth_line


def recovery_replicate(truth, family, link, replicate, seed=0, n_years=10, n_fit_years=8,
                       n_parents=15, threads=None):
    rng = np.random.default_rng([int(seed), int(replicate)])
    coords, times, y, truth_line = simulate_panel(truth, family, link, n_years, n_fit_years, rng, n_parents)
    model = assemble(coords, times, y, family=family, link=link, n_parents=n_parents)
    result = fit(model, default_parameters(family, link, y), threads=threads)

    covered = {}
    for name in result.free_names:
        se = result.se[name]
        covered[name] = bool(np.isfinite(se) and abs(result.params[name] - truth[name]) <= Z95 * se)

    line = transect()
    horizon = n_years - n_fit_years
    line_times = np.repeat(np.arange(n_years), line.shape[0])
    table = predict(result, np.tile(line, (n_years, 1)), line_times, forecast_horizon=horizon)
    hit = np.abs(table.w - truth_line.reshape(-1)) <= Z95 * table.w_se
    fitted = line_times < n_fit_years
    return ReplicateOutcome(
        replicate=int(replicate),
        message=result.message,
        estimates={name: result.params[name] for name in result.params.names},
        se=dict(result.se),
        covered=covered,
        fitted_coverage=float(hit[fitted].mean()),
        forecast_coverage=float(hit[~fitted].mean()) if (~fitted).any() else np.nan,
        positive_response=bool(np.all(table.response > 0)),
    )


def recovery_study(truth, family, link, replicates=20, seed=0, progress=False, **kwargs):
    outcomes = []
    indices = range(replicates)
    if progress:
        indices = progressbar.progressbar(indices, max_value=replicates)
    for r in indices:
        outcome = recovery_replicate(truth, family, link, r, seed=seed, **kwargs)
        logger.info("Replicate %d: %s, forecast coverage %.3f", r, outcome.message, outcome.forecast_coverage)
        outcomes.append(outcome)
    return outcomes


def coverage_summary(outcomes):
    """Per-parameter Wald coverage counts and mean prediction coverage"""
    names = sorted({name for o in outcomes for name in o.covered})
    return {
        'replicates': len(outcomes),
        'converged': sum(o.message == 'relative convergence' for o in outcomes),
        'wald': {name: sum(o.covered.get(name, False) for o in outcomes) for name in names},
        'fitted_coverage': float(np.mean([o.fitted_coverage for o in outcomes])),
        'forecast_coverage': float(np.nanmean([o.forecast_coverage for o in outcomes])),
        'positive_response': all(o.positive_response for o in outcomes),
    }


# ======================== Dispersion Detection ========================

@dataclass(frozen=True)
class DispersionOutcome:
    seed: int
    generating_family: str
    statistic: float
    pvalue: float
    direction: str
    expected: str


def dispersion_replicate(seed, generating_family, truth=None, n_years=2, replicates_per_site=3,
                         n_sim=100, n_parents=15, threads=None):
    """
    Simulate counts from generating_family around a Poisson-style latent
    field (replicate counts share a site-year effect), fit a Poisson model
    and read the PIT residuals.
    """
    truth = truth or poisson_truth(tau=0.2, mu=np.log(8.0))
    family_params, expected = DISPERSION_CASES[generating_family]
    rng = np.random.default_rng([int(seed), 0])
    grid = unit_square_grid()
    model = empty_model(grid, n_years, 'poisson', 'log', n_parents)
    u = LaplaceObjective(model).form(truth).sample(rng)

    M = len(model.refs)
    refs = model.refs.coords
    coords = np.tile(np.repeat(refs, replicates_per_site, axis=0), (n_years, 1))
    times = np.repeat(np.arange(n_years), M * replicates_per_site)
    nodes = np.tile(np.repeat(np.arange(M), replicates_per_site), n_years)
    effects = np.array([model.layout.ref_index(int(t), int(i)) for t, i in zip(times, nodes)])
    mu = np.exp(u[effects])
    y = ResponseFamily(generating_family, family_params).simulate(mu, rng)

    fitted = fit(assemble(coords, times, y, family='poisson', link='log', n_parents=n_parents),
                 default_parameters('poisson', 'log', y), threads=threads)
    residuals = fit_residuals(fitted, n_sim=n_sim, seed=seed)
    test = uniformity_test(residuals)
    return DispersionOutcome(
        seed=int(seed),
        generating_family=generating_family,
        statistic=test.statistic,
        pvalue=test.pvalue,
        direction=dispersion_direction(residuals),
        expected=expected,
    )


def dispersion_study(seeds=range(20), families=tuple(DISPERSION_CASES), progress=False, **kwargs):
    cases = [(seed, family) for family in families for seed in seeds]
    if progress:
        cases = progressbar.progressbar(cases, max_value=len(cases))
    return [dispersion_replicate(seed, family, **kwargs) for seed, family in cases]
