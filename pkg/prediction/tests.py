import os
import tempfile

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal
from django.test import SimpleTestCase

from engine.laplace import LaplaceObjective
from engine.model import assemble
from engine.optimizer import FitResult, fit
from engine.parameters import Parameter, ParameterSet
from engine.tests import gaussian_model, gaussian_params, poisson_model, poisson_params
from etc.exceptions import DataError, ObservationError, PredictionError, ResidualError
from spatial.covariance import correlation
from spatial.graph import pairwise_distances
from .grids import NODATA, PredictionGrid, predict_grid, read_ascii_grid, write_ascii_grid, write_grid_layers
from .predict import LAYERS, predict, predict_linear, predict_response, predict_w
from .residuals import ResidualSet, dispersion_direction, fit_residuals, pit_residuals, uniformity_test
from .scenarios import tau_scaling_study, transect, unit_square_grid
from .simulate import replicate_rng, simulate


def evaluated_fit(model, params):
    """Fit with every parameter fixed: modes and SEs at params"""
    return fit(model, params.with_fixed(params.names), threads=1)


def refs_only_model(n_refs=6, n_times=1, seed=0, family='gaussian', link='identity'):
    refs = np.random.default_rng(seed).uniform(size=(n_refs, 2))
    return assemble(np.zeros((0, 2)), np.zeros(0, dtype=np.int64), np.zeros(0), family=family, link=link,
                    n_parents=10, reference_coords=refs, n_times=n_times)


# ======================== Random Effects ========================

class PredictWTests(SimpleTestCase):

    def test_fitted_points_alias_stored_values(self):
        model = poisson_model()
        result = evaluated_fit(model, poisson_params())
        rows = np.arange(0, model.n_obs, 3)
        times = np.array([model.layout.keys()[e][1] for e in model.obs_effect[rows]])
        lookup = {i: c for i, c in enumerate(model.refs.coords)}
        coords = np.array([lookup[model.layout.keys()[e][2]] for e in model.obs_effect[rows]])
        effects = predict_w(result, coords, times)
        assert_array_equal(effects.w, result.u[model.obs_effect[rows]])
        assert_array_equal(effects.w_se, result.u_se[model.obs_effect[rows]])

    def test_aliasing_survives_new_points_in_the_same_request(self):
        model = poisson_model()
        result = evaluated_fit(model, poisson_params())
        coords = np.vstack([model.refs.coords[:2], [[0.45, 0.55]]])
        effects = predict_w(result, coords, [1, 2, 1])
        assert_array_equal(effects.w[:2], result.u[[model.layout.ref_index(1, 0), model.layout.ref_index(2, 1)]])
        self.assertTrue(np.isfinite(effects.w[2]))
        self.assertGreater(effects.w_se[2], 0.0)

    def test_matches_dense_kriging(self):
        model = refs_only_model()
        params = gaussian_params(beta=False)
        u = LaplaceObjective(model).form(params).sample(np.random.default_rng(2))
        pinned = FitResult.pinned(model, params, u)
        points = np.array([[0.3, 0.2], [0.8, 0.9], [0.5, 0.5]])
        effects = predict_w(pinned, points, np.zeros(3, dtype=np.int64), hold_state=True)

        structure = model.structure.with_tau(params['tau'])
        scale = structure.calibration.range_scale
        refs = model.refs.coords
        sill = structure.marginal_variance
        S = sill * correlation(pairwise_distances(refs, refs), 0.5, scale)
        C = sill * correlation(pairwise_distances(points, refs), 0.5, scale)
        eps = u[0]
        w = u[model.layout.ref_index(0, 0):model.layout.ref_index(0, 0) + len(model.refs)]
        mean = eps + C @ np.linalg.solve(S, w - eps)
        var = sill - np.einsum('ij,ji->i', C, np.linalg.solve(S, C.T))
        assert_allclose(effects.w, mean, rtol=0, atol=1e-6)
        assert_allclose(effects.w_se, np.sqrt(var), rtol=1e-6)

    def test_tau_scales_only_the_standard_errors(self):
        study = tau_scaling_study()
        self.assertLess(study.max_mean_difference(), 1e-10)
        assert_allclose(study.se_ratios(), np.outer([1.0, 2.0, 4.0], np.ones(transect().shape[0])), rtol=1e-8)

    def test_forecast_follows_autoregression(self):
        model = gaussian_model()
        params = gaussian_params()
        objective = LaplaceObjective(model)
        mode = objective.inner_optimize(params, objective.initial_effects(params)).u
        pinned = FitResult.pinned(model, params, mode)
        T = model.layout.n_times
        point = model.refs.coords[:1]
        effects = predict_w(pinned, np.vstack([point, point]), [T, T + 1], forecast_horizon=2, hold_state=True)
        eps, _ = effects.eps()
        mu, phi = params['mu'], params['phi']
        assert_allclose(eps[T], mu + phi * (mode[T - 1] - mu), rtol=0, atol=1e-8)
        assert_allclose(eps[T + 1], mu + phi * (eps[T] - mu), rtol=0, atol=1e-8)

        free = predict_w(evaluated_fit(model, params), point, [T], forecast_horizon=1)
        eps, _ = free.eps()
        assert_allclose(eps[T], mu + phi * (eps[T - 1] - mu), rtol=0, atol=1e-6)

    def test_horizon_is_enforced(self):
        result = evaluated_fit(poisson_model(), poisson_params())
        T = result.model.layout.n_times
        with self.assertRaises(PredictionError):
            predict_w(result, [[0.5, 0.5]], [T])
        with self.assertRaises(PredictionError):
            predict_w(result, [[0.5, 0.5]], [T + 2], forecast_horizon=1)
        with self.assertRaises(PredictionError):
            predict_w(result, [[0.5, 0.5]], [-1])


# ======================== Linear Predictor & Response ========================

class PredictLinearTests(SimpleTestCase):

    def setUp(self):
        self.result = evaluated_fit(gaussian_model(), gaussian_params())

    def test_no_covariates_pass_through(self):
        result = evaluated_fit(poisson_model(), poisson_params())
        w, w_se = np.array([0.3, 1.2]), np.array([0.1, 0.4])
        linear, linear_se = predict_linear(result, None, w, w_se)
        assert_array_equal(linear, w)
        assert_array_equal(linear_se, w_se)

    def test_fixed_beta_gives_w_se(self):
        w, w_se = np.array([0.3, 1.2]), np.array([0.1, 0.4])
        linear, linear_se = predict_linear(self.result, [[2.0], [-1.0]], w, w_se)
        assert_allclose(linear, w + np.array([2.0, -1.0]) * self.result.params['beta.elev'])
        assert_array_equal(linear_se, w_se)

    def test_beta_variance_is_added(self):
        model = gaussian_model()
        params = gaussian_params()
        result = fit(model, params.with_fixed([n for n in params.names if n != 'beta.elev']), threads=1)
        var_beta = result.beta_covariance()[0, 0]
        linear, linear_se = predict_linear(result, [[2.0], [0.0]], np.zeros(2), np.array([0.5, 0.5]))
        assert_allclose(linear_se, np.sqrt([4.0 * var_beta + 0.25, 0.25]))

    def test_dimension_mismatch(self):
        with self.assertRaises(PredictionError):
            predict_linear(self.result, [[1.0, 2.0]], np.zeros(1), np.zeros(1))


class PredictResponseTests(SimpleTestCase):

    def test_identity_link_passes_through(self):
        linear, se = np.array([0.1, -3.0]), np.array([0.2, 0.7])
        response, response_se = predict_response(linear, se, 'identity')
        assert_array_equal(response, linear)
        assert_array_equal(response_se, se)

    def test_log_link_at_zero(self):
        response, response_se = predict_response(0.0, 0.2, 'log')
        assert_allclose(response, 1.02, rtol=1e-14)
        assert_allclose(response_se ** 2, 0.04 + 0.0008, rtol=1e-12)

    def test_log_link_against_monte_carlo(self):
        rng = np.random.default_rng(7)
        for linear, var in ((0.5, 0.04), (1.0, 0.25), (-1.0, 0.1)):
            draws = np.exp(rng.normal(linear, np.sqrt(var), size=400_000))
            mean, _ = predict_response(linear, np.sqrt(var), 'log')
            assert_allclose(mean, draws.mean(), rtol=0.01)

    def test_predict_table_columns(self):
        result = evaluated_fit(gaussian_model(), gaussian_params())
        table = predict(result, [[0.4, 0.4]], [0], X_new=[[1.0]])
        assert_array_equal(table.response, table.linear)
        assert_array_equal(table.response_se, table.linear_se)
        record = next(table.records())
        self.assertEqual(record.t, 0)
        self.assertEqual(record.coords, (0.4, 0.4))
        with self.assertRaises(PredictionError):
            table.layer('mean')


# ======================== Simulation ========================

class SimulationTests(SimpleTestCase):

    def test_conditional_with_tiny_noise_returns_fitted_means(self):
        model = gaussian_model()
        result = evaluated_fit(model, gaussian_params())
        sims = simulate(result, 2, conditional=True, seed=3, params=result.params.with_values(sd=1e-9))
        expected = model.X @ result.params.beta + result.u[model.obs_effect]
        assert_allclose(sims.y, np.vstack([expected, expected]), atol=1e-6)
        assert_array_equal(sims.u[1], result.u)

    def test_unconditional_white_noise_limit(self):
        model = refs_only_model(n_times=4)
        params = gaussian_params(beta=False, phi=0.0, sigma=1e-9, mu=2.5)
        sims = simulate(FitResult.pinned(model, params, np.zeros(model.n_effects)), 3, conditional=False)
        assert_allclose(sims.u[:, :model.layout.n_times], 2.5, atol=1e-6)

    def test_replicates_are_reproducible_alone(self):
        result = evaluated_fit(poisson_model(), poisson_params())
        many = simulate(result, 5, conditional=False, seed=11)
        again = simulate(result, 5, conditional=False, seed=11)
        assert_array_equal(many.y, again.y)
        assert_array_equal(many.u, again.u)
        one = replicate_rng(11, 3)
        u = LaplaceObjective(result.model).form(result.params).sample(one)
        assert_array_equal(many.u[3], u)

    def test_family_override(self):
        result = evaluated_fit(poisson_model(), poisson_params())
        sims = simulate(result, 200, seed=1, family='negative_binomial', family_params={'overdispersion': 2.0})
        base = simulate(result, 200, seed=1)
        self.assertGreater(sims.y.var(axis=0).mean(), base.y.var(axis=0).mean())
        assert_array_equal(sims.u[0], result.u)
        with self.assertRaises(ObservationError):
            simulate(result, 1, family='bernoulli')

    def test_invalid_requests(self):
        result = evaluated_fit(poisson_model(), poisson_params())
        with self.assertRaises(PredictionError):
            simulate(result, 0)
        with self.assertRaises(PredictionError):
            simulate(result, 1, seed=-1)


# ======================== Residuals ========================

class ResidualTests(SimpleTestCase):

    def test_observed_below_every_simulation(self):
        sims = np.tile(np.arange(1.0, 101.0)[:, None], (1, 3))
        residuals = pit_residuals(np.zeros(3), sims, True, np.random.default_rng(0))
        self.assertTrue(np.all(residuals.values < 1.0 / 101))
        self.assertEqual(residuals.n_sim, 100)

    def test_continuous_median(self):
        sims = np.arange(101.0)[:, None]
        residuals = pit_residuals([50.0], sims, False, np.random.default_rng(0))
        assert_allclose(residuals.values, 0.5)

    def test_ties_are_randomised_within_bounds(self):
        sims = np.zeros((60, 500))
        values = pit_residuals(np.zeros(500), sims, True, np.random.default_rng(1)).values
        self.assertTrue(np.all((values >= 0) & (values <= 1)))
        self.assertGreater(values.std(), 0.2)

    def test_too_few_simulations(self):
        with self.assertRaises(ResidualError):
            pit_residuals([1.0], np.zeros((49, 1)), True, np.random.default_rng(0))
        with self.assertRaises(ResidualError):
            pit_residuals([1.0, 2.0], np.zeros((60, 1)), True, np.random.default_rng(0))

    def test_well_specified_simulations_look_uniform(self):
        rng = np.random.default_rng(5)
        mu = rng.uniform(2.0, 10.0, size=2000)
        sims = rng.poisson(mu, size=(100, mu.size)).astype(float)
        observed = rng.poisson(mu).astype(float)
        residuals = pit_residuals(observed, sims, True, rng)
        self.assertGreater(uniformity_test(residuals).pvalue, 0.01)

    def test_dispersion_direction(self):
        rng = np.random.default_rng(6)
        self.assertEqual(dispersion_direction(ResidualSet(rng.beta(0.5, 0.5, 3000), 100)), 'over')
        self.assertEqual(dispersion_direction(ResidualSet(rng.beta(3.0, 3.0, 3000), 100)), 'under')
        self.assertEqual(dispersion_direction(ResidualSet(rng.uniform(size=3000), 100)), 'none')

    def test_fit_residuals_are_reproducible(self):
        result = evaluated_fit(poisson_model(), poisson_params())
        first = fit_residuals(result, n_sim=60, seed=2)
        second = fit_residuals(result, n_sim=60, seed=2)
        assert_array_equal(first.values, second.values)
        self.assertEqual(len(first), result.model.n_obs)
        with self.assertRaises(ResidualError):
            fit_residuals(result, n_sim=10)


# ======================== Grids ========================

class GridTests(SimpleTestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)

    def path(self, name):
        return os.path.join(self.tmp.name, name)

    def test_centroids_north_row_first(self):
        grid = PredictionGrid(0.0, 0.0, 1.0, 2.0, 2, 3)
        centres = grid.centroids()
        assert_allclose(centres[0], [0.5, 3.0])
        assert_allclose(centres[-1], [2.5, 1.0])
        self.assertEqual(grid.n_active, 6)

    def test_raster_round_trip(self):
        mask = np.array([[True, False], [True, True]])
        grid = PredictionGrid(10.0, 20.0, 0.5, 0.5, 2, 2, mask=mask)
        raster = grid.to_raster([0.1, 1.0 / 3.0, -2.5])
        write_ascii_grid(self.path('w_0.asc'), grid, raster)
        header, values = read_ascii_grid(self.path('w_0.asc'))
        self.assertEqual(header['ncols'], 2)
        self.assertEqual(header['nodata_value'], NODATA)
        assert_array_equal(values, raster)
        template = PredictionGrid.from_template(self.path('w_0.asc'))
        assert_array_equal(template.mask, mask)

    def test_rectangular_cells_use_dx_dy(self):
        grid = PredictionGrid(0.0, 0.0, 1.0, 2.0, 1, 1)
        write_ascii_grid(self.path('r.asc'), grid, grid.to_raster([1.0]))
        header, _ = read_ascii_grid(self.path('r.asc'))
        self.assertEqual((header['dx'], header['dy']), (1.0, 2.0))

    def test_centre_registered_header(self):
        with open(self.path('c.asc'), 'w') as handle:
            handle.write("ncols 1\nnrows 1\nxllcenter 0.5\nyllcenter 0.5\ncellsize 1\n7\n")
        header, values = read_ascii_grid(self.path('c.asc'))
        self.assertEqual((header['xllcorner'], header['yllcorner']), (0.0, 0.0))
        self.assertEqual(values[0, 0], 7.0)

    def test_malformed_grid(self):
        with open(self.path('bad.asc'), 'w') as handle:
            handle.write("ncols 2\nnrows 1\nxllcorner 0\nyllcorner 0\ncellsize 1\n1 x\n")
        with self.assertRaises(DataError):
            read_ascii_grid(self.path('bad.asc'))
        with self.assertRaises(PredictionError):
            PredictionGrid(0.0, 0.0, 0.0, 1.0, 1, 1)

    def test_grid_prediction_writes_every_layer(self):
        result = evaluated_fit(poisson_model(), poisson_params())
        grid = PredictionGrid.from_bounds(0.0, 0.0, 1.0, 1.0, 0.25, times=(0, 1))
        rasters = predict_grid(result, grid)
        self.assertEqual(len(rasters), 2 * len(LAYERS))
        self.assertTrue(np.all(rasters[(1, 'response')] > 0))
        written = write_grid_layers(self.tmp.name, grid, rasters, time_labels={0: 1994, 1: 1995})
        self.assertIn(os.path.join(self.tmp.name, 'w_se_1995.asc'), written)

    def test_grid_needs_covariate_free_model(self):
        result = evaluated_fit(gaussian_model(), gaussian_params())
        with self.assertRaises(PredictionError):
            predict_grid(result, PredictionGrid(0.0, 0.0, 1.0, 1.0, 1, 1, times=(0,)))


class DesignTests(SimpleTestCase):

    def test_unit_square_grid(self):
        grid = unit_square_grid()
        self.assertEqual(grid.shape, (221, 2))
        self.assertEqual(len({tuple(p) for p in np.round(grid, 12)}), 221)

    def test_transect(self):
        line = transect()
        self.assertEqual(line.shape, (101, 2))
        assert_allclose(line[[0, -1]], [[0.387, 0.0], [0.387, 1.0]])
