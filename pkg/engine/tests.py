import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from types import SimpleNamespace
from unittest import mock

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal
from scipy import optimize, sparse
from scipy.sparse.linalg import spsolve_triangular
from scipy.stats import multivariate_normal, poisson
from django.test import SimpleTestCase

from etc.exceptions import ConfigError, DataError, InnerIterationError, SaddlePointError
from process.state import TemporalParams
from process.tests import dense_covariance
from .laplace import LaplaceObjective
from .model import assemble, remap_values
from .optimizer import OuterOptimizer, fit, invert_parameter_hessian
from .parameters import Parameter, ParameterSet, default_parameters, from_free, to_free


def panel(n_locs=8, T=3, seed=0, drop_every=5):
    """Locations observed every time, with every drop_every-th row removed"""
    rng = np.random.default_rng(seed)
    locs = rng.uniform(size=(n_locs, 2))
    coords = np.tile(locs, (T, 1))
    times = np.repeat(np.arange(T), n_locs)
    keep = np.arange(coords.shape[0]) % drop_every != drop_every - 1
    return locs, coords[keep], times[keep], rng


def gaussian_params(beta=True, **overrides):
    values = dict(tau=0.8, mu=0.3, phi=0.6, sigma=0.7, sd=0.5)
    values.update(overrides)
    params = [
        Parameter('tau', values['tau']),
        Parameter('nu', 0.5, fixed=True),
        Parameter('mu', values['mu']),
        Parameter('phi', values['phi']),
        Parameter('sigma', values['sigma']),
        Parameter('sd', values['sd']),
    ]
    if beta:
        params.append(Parameter('beta.elev', 0.4))
    return ParameterSet(params)


def gaussian_model(reference_coords=None, seed=0):
    _, coords, times, rng = panel(seed=seed)
    X = rng.normal(size=(coords.shape[0], 1))
    y = rng.normal(size=coords.shape[0]) + 0.5 * X[:, 0]
    return assemble(coords, times, y, X, family='gaussian', link='identity', n_parents=10,
                    covariate_names=('elev',), reference_coords=reference_coords)


def poisson_model(seed=1):
    _, coords, times, rng = panel(seed=seed)
    y = rng.poisson(3.0, size=coords.shape[0]).astype(float)
    return assemble(coords, times, y, family='poisson', link='log', n_parents=4)


def poisson_params(**overrides):
    values = dict(tau=0.6, mu=1.0, phi=0.5, sigma=0.4)
    values.update(overrides)
    return ParameterSet([
        Parameter('tau', values['tau']),
        Parameter('nu', 0.5, fixed=True),
        Parameter('mu', values['mu']),
        Parameter('phi', values['phi']),
        Parameter('sigma', values['sigma']),
    ])


def incidence(model):
    Z = np.zeros((model.n_obs, model.n_effects))
    Z[np.arange(model.n_obs), model.obs_effect] = 1.0
    return Z


def marginal_covariance(model, params, cov):
    Z = incidence(model)
    return Z @ cov @ Z.T + params['sd'] ** 2 * np.eye(model.n_obs)


def dense_marginal_nll(model, params, mean, cov):
    V = marginal_covariance(model, params, cov)
    return -multivariate_normal.logpdf(model.y, model.X @ params.beta + incidence(model) @ mean, V)


def dense_prior(model, params):
    p = TemporalParams(params['mu'], params['phi'], params['sigma'])
    cov = dense_covariance(model.structure.with_tau(params['tau']), p, model.layout.n_times)
    return np.full(model.n_effects, params['mu']), cov


# ======================== Laplace Marginal ========================

class LaplaceExactnessTests(SimpleTestCase):

    def test_gaussian_marginal_matches_dense_field(self):
        model = gaussian_model()
        self.assertEqual(model.layout.n_transient, 0)
        for tau, phi in ((0.8, 0.6), (2.0, -0.3), (0.3, 0.9)):
            params = gaussian_params(tau=tau, phi=phi)
            mean, cov = dense_prior(model, params)
            result = LaplaceObjective(model).laplace_nll(params)
            assert_allclose(result.nll, dense_marginal_nll(model, params, mean, cov), rtol=0, atol=1e-8)

    def test_random_instances(self):
        for seed in range(3):
            model = gaussian_model(seed=10 + seed)
            rng = np.random.default_rng(seed)
            params = gaussian_params(
                tau=rng.uniform(0.3, 2.0), mu=rng.normal(), phi=rng.uniform(-0.8, 0.8),
                sigma=rng.uniform(0.3, 1.5), sd=rng.uniform(0.3, 1.0),
            )
            mean, cov = dense_prior(model, params)
            result = LaplaceObjective(model).laplace_nll(params)
            assert_allclose(result.nll, dense_marginal_nll(model, params, mean, cov), rtol=0, atol=1e-8)

    def test_gaussian_marginal_with_transient_effects(self):
        locs, *_ = panel()
        model = gaussian_model(reference_coords=locs[:5])
        self.assertGreater(model.layout.n_transient, 0)
        params = gaussian_params()
        objective = LaplaceObjective(model)
        form = objective.form(params)
        cov = np.linalg.inv(form.precision().toarray())
        mean = spsolve_triangular(form.A, form.c, lower=True, unit_diagonal=True)
        assert_allclose(objective.laplace_nll(params).nll, dense_marginal_nll(model, params, mean, cov),
                        rtol=0, atol=1e-8)

    def test_shift_in_response_leaves_log_determinant(self):
        model = gaussian_model()
        params = gaussian_params()
        base = LaplaceObjective(model).laplace_nll(params)
        moved = replace(model, y=model.y + 5.0)
        after = LaplaceObjective(moved).laplace_nll(params.with_values(mu=params['mu'] + 5.0))
        assert_allclose(after.logdet, base.logdet, rtol=1e-12)
        assert_allclose(after.nll, base.nll, rtol=1e-10)

    def test_without_random_effects_is_data_likelihood(self):
        model = poisson_model()
        result = LaplaceObjective(model, random_effects=False).laplace_nll(poisson_params())
        assert_allclose(result.nll, -poisson.logpmf(model.y, 1.0).sum(), rtol=1e-12)

    def test_independent_of_inner_start(self):
        model = poisson_model()
        params = poisson_params()
        objective = LaplaceObjective(model)
        rng = np.random.default_rng(3)
        first = objective.laplace_nll(params)
        second = objective.laplace_nll(params, u0=rng.normal(1.0, 0.5, size=model.n_effects))
        assert_allclose(first.nll, second.nll, rtol=0, atol=1e-8)

    def test_non_positive_definite_hessian_is_a_saddle(self):
        with self.assertRaisesMessage(SaddlePointError, 'saddle at inner mode'):
            LaplaceObjective.logdet(sparse.diags([2.0, -1.0, 3.0]).tocsc())


# ======================== Joint Likelihood & Inner Newton ========================

class JointLikelihoodTests(SimpleTestCase):

    def test_no_data_leaves_process_density(self):
        locs, *_ = panel()
        model = assemble(np.zeros((0, 2)), np.zeros(0, dtype=int), np.zeros(0), family='poisson',
                         link='log', reference_coords=locs, n_times=2)
        params = poisson_params()
        objective = LaplaceObjective(model)
        u = np.random.default_rng(0).normal(size=model.n_effects)
        assert_allclose(objective.joint_nll(params, u), -objective.form(params).loglik(u), rtol=1e-14)

    def test_gradient_matches_finite_differences(self):
        model = poisson_model()
        params = poisson_params()
        objective = LaplaceObjective(model)
        rng = np.random.default_rng(4)
        for _ in range(3):
            u = rng.normal(1.0, 0.3, size=model.n_effects)
            h = 1e-6
            fd = np.array([
                (objective.joint_nll(params, u + h * e) - objective.joint_nll(params, u - h * e)) / (2 * h)
                for e in np.eye(model.n_effects)
            ])
            assert_allclose(objective.gradient(params, u), fd, rtol=1e-5, atol=1e-6)

    def test_hessian_matches_finite_differences(self):
        model = poisson_model()
        params = poisson_params()
        objective = LaplaceObjective(model)
        u = np.random.default_rng(5).normal(1.0, 0.3, size=model.n_effects)
        h = 1e-5
        fd = np.column_stack([
            (objective.gradient(params, u + h * e) - objective.gradient(params, u - h * e)) / (2 * h)
            for e in np.eye(model.n_effects)
        ])
        assert_allclose(objective.hessian(params, u).toarray(), fd, rtol=1e-5, atol=1e-6)

    def test_gaussian_needs_one_newton_step(self):
        model = gaussian_model()
        objective = LaplaceObjective(model)
        inner = objective.inner_optimize(gaussian_params(), np.zeros(model.n_effects))
        self.assertEqual(inner.iterations, 1)

    def test_gaussian_mode_solves_linear_system(self):
        model = gaussian_model()
        params = gaussian_params()
        objective = LaplaceObjective(model)
        u = np.zeros(model.n_effects)
        inner = objective.inner_optimize(params, u)
        H = objective.hessian(params, u).toarray()
        expected = u - np.linalg.solve(H, objective.gradient(params, u))
        assert_allclose(inner.u, expected, rtol=1e-10, atol=1e-10)

    def test_poisson_mode_matches_generic_optimizer(self):
        model = poisson_model()
        params = poisson_params()
        objective = LaplaceObjective(model)
        inner = objective.inner_optimize(params, objective.initial_effects(params))
        reference = optimize.minimize(
            lambda u: objective.joint_nll(params, u),
            objective.initial_effects(params),
            jac=lambda u: objective.gradient(params, u),
            hess=lambda u: objective.hessian(params, u).toarray(),
            method='trust-exact',
            options={'gtol': 1e-12},
        )
        assert_allclose(inner.u, reference.x, rtol=0, atol=1e-6)

    def test_start_at_mode_takes_no_steps(self):
        model = poisson_model()
        params = poisson_params()
        objective = LaplaceObjective(model)
        mode = objective.inner_optimize(params, objective.initial_effects(params)).u
        again = objective.inner_optimize(params, mode)
        self.assertEqual(again.iterations, 0)
        assert_array_equal(again.u, mode)

    def test_iteration_cap_raises_inner_divergence(self):
        model = poisson_model()
        objective = LaplaceObjective(model, inner_max_iter=1)
        params = poisson_params()
        with self.assertRaisesMessage(InnerIterationError, 'inner divergence'):
            objective.inner_optimize(params, np.full(model.n_effects, 5.0))

    def test_held_effects_stay_put(self):
        model = poisson_model()
        params = poisson_params()
        objective = LaplaceObjective(model)
        u0 = objective.initial_effects(params)
        free = np.zeros(model.n_effects, dtype=bool)
        free[model.layout.n_times:] = True
        inner = objective.inner_optimize(params, u0, free=free)
        assert_array_equal(inner.u[~free], u0[~free])
        self.assertLess(np.abs(objective.gradient(params, inner.u)[free]).max(), 1e-8)


# ======================== Outer Optimisation & SEs ========================

class OuterOptimizationTests(SimpleTestCase):

    def test_all_fixed_evaluates_only(self):
        model = gaussian_model()
        params = gaussian_params()
        params = params.with_fixed(params.names)
        result = fit(model, params, threads=1)
        self.assertEqual(result.iterations, 0)
        self.assertEqual(result.message, 'relative convergence')
        self.assertTrue(result.converged)
        self.assertTrue(all(se == 0.0 for se in result.se.values()))
        assert_allclose(result.nll, LaplaceObjective(model).laplace_nll(params).nll, rtol=1e-12)
        self.assertEqual(result.u_se.shape, (model.n_effects,))
        self.assertTrue(np.all(result.u_se > 0))

    def test_beta_matches_generalised_least_squares(self):
        model = gaussian_model()
        params = gaussian_params()
        params = params.with_fixed([n for n in params.names if n != 'beta.elev'])
        result = fit(model, params, outer_gtol=1e-7, threads=1)

        mean, cov = dense_prior(model, params)
        V = marginal_covariance(model, params, cov)
        X = model.X
        information = X.T @ np.linalg.solve(V, X)
        beta = np.linalg.solve(information, X.T @ np.linalg.solve(V, model.y - incidence(model) @ mean))
        assert_allclose(result.params['beta.elev'], beta[0], rtol=1e-3)
        assert_allclose(result.se['beta.elev'], np.sqrt(1.0 / information[0, 0]), rtol=1e-4)
        assert_allclose(result.beta_covariance(), 1.0 / information, rtol=1e-4)

    def test_accepted_nll_never_increases(self):
        model = gaussian_model()
        result = fit(model, gaussian_params(), threads=2)
        history = np.array(result.nll_history)
        self.assertTrue(np.all(np.diff(history) <= 1e-10))
        self.assertIn(result.message, ('relative convergence', 'iteration limit', 'false convergence'))
        self.assertLessEqual(result.nll, history[0])

    def test_fixed_parameters_report_zero_se(self):
        model = poisson_model()
        params = poisson_params().with_fixed(['tau', 'phi'])
        result = fit(model, params, threads=1)
        table = {(group, name): (se, fixed) for group, name, _, se, fixed in result.parameter_table()}
        self.assertEqual(table[('spatial', 'nu')], (0.0, True))
        self.assertEqual(table[('spatial', 'sd')], (0.0, True))
        self.assertEqual(table[('time', 'ar1')], (0.0, True))
        self.assertTrue(np.isnan(table[('time', 'mu')][0]) or table[('time', 'mu')][0] > 0)

    def test_non_positive_definite_hessian_gives_nan(self):
        with self.assertWarns(RuntimeWarning):
            cov = invert_parameter_hessian(np.array([[1.0, 0.0], [0.0, -2.0]]))
        self.assertTrue(np.all(np.isnan(cov)))

    def test_same_inputs_same_fit(self):
        model = poisson_model()
        first = fit(model, poisson_params(), threads=1)
        second = fit(model, poisson_params(), threads=3)
        self.assertEqual(first.nll, second.nll)
        assert_array_equal(first.u, second.u)


class QuadraticObjective:
    """0.5 |x - centre|^2 + offset over the free parameters, counting calls"""
    random_effects = False

    def __init__(self, centre, offset=0.0):
        self.centre = np.asarray(centre, dtype=float)
        self.offset = offset
        self.calls = 0
        self._lock = threading.Lock()

    def initial_effects(self, params):
        return np.zeros(0)

    def laplace_nll(self, params, u0=None):
        with self._lock:
            self.calls += 1
        x = params.free_vector()
        nll = self.offset + 0.5 * float(np.sum((x - self.centre) ** 2))
        return SimpleNamespace(nll=nll, inner=SimpleNamespace(u=np.zeros(0)))


def quadratic_params():
    return ParameterSet([Parameter('mu', 3.0), Parameter('beta.a', -2.0)])


def scripted_bfgs(rounds):
    """minimize() stand-in replaying (accepted points, status) per call"""
    calls = []

    def minimize(fun, x0, jac=None, method=None, callback=None, options=None):
        points, status = rounds[len(calls)]
        calls.append(options)
        for point in points:
            callback(np.asarray(point, dtype=float))
        x = np.asarray(points[-1] if points else x0, dtype=float)
        return optimize.OptimizeResult(x=x, fun=fun(x), jac=np.zeros(x.size), status=status, nit=len(points))

    return minimize, calls


class ConvergenceCriterionTests(SimpleTestCase):

    def optimizer(self, objective=None, threads=1):
        return OuterOptimizer(objective or QuadraticObjective([0.0, 0.0]), gtol=1e-4, rel_tol=1e-8,
                              max_iter=500, threads=threads)

    def test_gradient_test_alone_is_not_convergence(self):
        opt = self.optimizer()
        opt.nll_history = [10.0, 9.0]
        result = optimize.OptimizeResult(status=0, jac=np.zeros(2), fun=9.0, nit=1)
        self.assertEqual(opt._message(result), 'false convergence')
        opt.nll_history = [9.0 + 1e-9, 9.0]
        self.assertEqual(opt._message(result), 'relative convergence')

    def test_small_change_with_large_gradient_is_not_convergence(self):
        opt = self.optimizer()
        opt.nll_history = [1.0, 1.0]
        result = optimize.OptimizeResult(status=2, jac=np.array([1e-2, 0.0]), fun=1.0, nit=1)
        self.assertEqual(opt._message(result), 'false convergence')

    def test_large_final_step_triggers_tighter_restart(self):
        minimize, calls = scripted_bfgs([([(0.1, 0.0)], 0), ([], 0)])
        opt = self.optimizer()
        with mock.patch('engine.optimizer.optimize.minimize', side_effect=minimize):
            x, message, converged, iterations = opt.run(quadratic_params())
        self.assertEqual(len(calls), 2)
        self.assertEqual(calls[0]['gtol'], 1e-4)
        self.assertAlmostEqual(calls[1]['gtol'], 1e-6)
        self.assertEqual(message, 'relative convergence')
        self.assertTrue(converged)
        self.assertEqual(iterations, 1)
        assert_allclose(x, [0.1, 0.0])
        self.assertEqual(opt.nll_history[-2], opt.nll_history[-1])

    def test_nll_still_moving_after_restarts_is_false_convergence(self):
        rounds = [([(2.0, 0.0)], 0), ([(1.0, 0.0)], 0), ([(0.5, 0.0)], 0), ([(0.25, 0.0)], 0)]
        minimize, calls = scripted_bfgs(rounds)
        opt = self.optimizer()
        with mock.patch('engine.optimizer.optimize.minimize', side_effect=minimize):
            _, message, converged, iterations = opt.run(quadratic_params())
        self.assertEqual(len(calls), 4)
        self.assertEqual(message, 'false convergence')
        self.assertFalse(converged)
        self.assertEqual(iterations, 4)

    def test_quadratic_converges_to_centre(self):
        objective = QuadraticObjective([1.0, -0.5], offset=3.0)
        opt = self.optimizer(objective, threads=4)
        x, message, converged, _ = opt.run(quadratic_params())
        self.assertEqual(message, 'relative convergence')
        self.assertTrue(converged)
        assert_allclose(x, [1.0, -0.5], atol=1e-4)
        self.assertLess(opt.relative_change(), 1e-8)

    def test_threaded_evaluations_are_all_counted(self):
        objective = QuadraticObjective([1.0, -0.5], offset=3.0)
        opt = self.optimizer(objective, threads=4)
        opt.run(quadratic_params())
        # the starting point is evaluated outside the pool
        self.assertEqual(opt.n_evaluations, objective.calls - 1)
        self.assertEqual(opt.inner_failures, 0)


# ======================== Parameters ========================

class ParameterTests(SimpleTestCase):

    def test_transform_round_trip(self):
        for name, values in (('tau', np.geomspace(1e-6, 1e6, 25)),
                             ('phi', np.linspace(-0.999, 0.999, 25)),
                             ('mu', np.linspace(-50, 50, 25))):
            transform = Parameter(name, 0.5).transform
            assert_allclose(from_free(to_free(values, transform), transform), values, rtol=1e-12, atol=1e-15)

    def test_with_free_updates_only_free(self):
        params = poisson_params().with_fixed(['tau'])
        x = params.free_vector()
        moved = params.with_free(x + 0.1)
        self.assertEqual(moved['tau'], params['tau'])
        assert_allclose(moved['sigma'], params['sigma'] * np.exp(0.1))
        assert_allclose(moved['phi'], np.tanh(np.arctanh(0.5) + 0.1))

    def test_defaults(self):
        y = np.array([0.0, 2.0, 4.0, 6.0])
        params = default_parameters('poisson', 'log', y, covariate_names=('elev',))
        self.assertEqual(params.names, ['tau', 'nu', 'mu', 'phi', 'sigma', 'beta.elev'])
        assert_allclose(params['mu'], np.log(3.0))
        self.assertEqual(params['phi'], 0.5)
        self.assertEqual(params['beta.elev'], 0.0)
        self.assertTrue(params.parameter('nu').fixed)
        self.assertEqual(params['tau'], params['sigma'])

    def test_family_parameters_start_at_one(self):
        params = default_parameters('compois', 'log', np.array([1.0, 3.0]))
        self.assertEqual(params['dispersion'], 1.0)
        params = default_parameters('gaussian', 'identity', np.array([1.0, 3.0]))
        assert_allclose(params['sd'], 1.0)

    def test_overrides(self):
        params = default_parameters('poisson', 'log', np.array([1.0, 3.0]),
                                    overrides={'phi': {'value': 0.9, 'fixed': True}})
        self.assertEqual(params['phi'], 0.9)
        self.assertNotIn('phi', params.free_names)
        with self.assertRaises(ConfigError):
            default_parameters('poisson', 'log', np.array([1.0]), overrides={'sd': {'value': 1.0}})
        with self.assertRaises(ConfigError):
            default_parameters('poisson', 'log', np.array([1.0]), overrides={'nu': {'fixed': False}})
        with self.assertRaises(ConfigError):
            default_parameters('poisson', 'log', np.array([1.0]), overrides={'phi': {'value': 1.0}})


# ======================== Model Layout ========================

class ModelLayoutTests(SimpleTestCase):

    def test_observations_alias_reference_effects(self):
        model = gaussian_model()
        lookup = model.ref_lookup()
        keys = model.layout.keys()
        _, coords, times, _ = panel()
        for row, (point, t) in enumerate(zip(coords, times)):
            self.assertEqual(keys[model.obs_effect[row]], ('ref', int(t), lookup[tuple(point)]))

    def test_shared_transient_effect_per_time_and_location(self):
        locs, *_ = panel()
        model = assemble(np.array([[5.0, 5.0], [5.0, 5.0], [5.0, 5.0]]), [0, 0, 1], [1.0, 2.0, 3.0],
                         family='poisson', link='log', reference_coords=locs)
        self.assertEqual(model.layout.n_transient, 2)
        self.assertEqual(model.obs_effect[0], model.obs_effect[1])
        self.assertNotEqual(model.obs_effect[1], model.obs_effect[2])

    def test_operator_built_on_assembly(self):
        model = poisson_model()
        self.assertIn('_operator', model.__dict__)
        self.assertIs(model.operator(), model.operator())

    def test_operator_shared_across_threads(self):
        extended, _ = poisson_model().locate([[2.0, 2.0]], [0])
        self.assertNotIn('_operator', extended.__dict__)
        with ThreadPoolExecutor(max_workers=4) as pool:
            operators = list(pool.map(lambda _: extended.operator(), range(16)))
        self.assertTrue(all(op is operators[0] for op in operators))
        self.assertEqual(operators[0].layout.n_transient, extended.layout.n_transient)

    def test_locate_extends_and_keeps_existing_effects(self):
        model = gaussian_model()
        u = np.arange(model.n_effects, dtype=float)
        extended, effects = model.locate([[2.0, 2.0], model.refs.coords[3]], [0, 4])
        self.assertEqual(extended.layout.n_times, 5)
        self.assertEqual(extended.layout.n_transient, 1)
        carried = remap_values(model.layout, extended.layout, u, fill=np.nan)
        for i, key in enumerate(model.layout.keys()):
            self.assertEqual(carried[extended.layout.keys().index(key)], u[i])
        self.assertEqual(extended.layout.keys()[effects[1]], ('ref', 4, 3))
        self.assertTrue(np.isnan(carried[effects[0]]))
        old_keys, new_keys = model.layout.keys(), extended.layout.keys()
        self.assertEqual([new_keys[e] for e in extended.obs_effect], [old_keys[e] for e in model.obs_effect])

    def test_constant_covariate_rejected(self):
        _, coords, times, _ = panel()
        with self.assertRaises(DataError):
            assemble(coords, times, np.ones(len(times)), np.ones((len(times), 1)), family='poisson',
                     link='log', covariate_names=('flat',))

    def test_length_mismatch_rejected(self):
        with self.assertRaises(DataError):
            assemble([[0.0, 0.0], [1.0, 1.0]], [0], [1.0, 2.0], family='poisson', link='log')
