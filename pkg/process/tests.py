import numpy as np
from numpy.testing import assert_allclose, assert_array_equal
from scipy.stats import multivariate_normal, norm
from django.test import SimpleTestCase

from etc.exceptions import GraphError, ProcessError
from spatial.covariance import CovarianceSpec, correlation
from spatial.graph import build_persistent_graph, order_locations, pairwise_distances
from .innovations import InnovationOperator
from .state import (
    EffectLayout, RandomEffectState, TemporalParams, ar1_logdensity,
    blup_previous, blup_weights, build_spatial_structure, mean_function,
    persistent_loglik, process_loglik, transient_loglik,
)


def make_structure(n_refs=6, n_parents=5, tau=1.0, seed=0, transient=None):
    coords = np.random.default_rng(seed).uniform(size=(n_refs, 2))
    refs = order_locations(coords)
    dag = build_persistent_graph(refs, n_parents)
    return build_spatial_structure(refs, dag, tau, CovarianceSpec(), transient)


def dense_covariance(structure, p, T):
    """Covariance of [eps, W] under the exact (fully conditioned) model"""
    M = structure.n_refs
    coords = structure.refs.coords
    R = correlation(pairwise_distances(coords, coords), 0.5, structure.calibration.range_scale)
    S = structure.marginal_variance * R
    times = np.arange(T)
    E = p.stationary_variance * p.phi ** np.abs(times[:, None] - times[None, :])
    n = T * (1 + M)
    cov = np.zeros((n, n))
    cov[:T, :T] = E
    for t in range(T):
        for s in range(T):
            block = E[t, s] * np.ones((M, M))
            block += sum(p.phi ** (t - k) * p.phi ** (s - k) for k in range(min(t, s) + 1)) * S
            cov[T + t * M:T + (t + 1) * M, T + s * M:T + (s + 1) * M] = block
            cov[t, T + s * M:T + (s + 1) * M] = E[t, s]
            cov[T + s * M:T + (s + 1) * M, t] = E[t, s]
    return cov


class TemporalTests(SimpleTestCase):

    def test_single_time_is_stationary_normal(self):
        p = TemporalParams(mu=1.0, phi=0.6, sigma=0.5)
        expected = norm.logpdf(0.3, 1.0, np.sqrt(0.25 / 0.64))
        assert_allclose(ar1_logdensity([0.3], p), expected, rtol=1e-12)

    def test_zero_phi_is_independent(self):
        p = TemporalParams(mu=-0.5, phi=0.0, sigma=2.0)
        eps = np.array([0.1, -1.0, 3.0])
        assert_allclose(ar1_logdensity(eps, p), norm.logpdf(eps, -0.5, 2.0).sum(), rtol=1e-12)

    def test_recursive_form_matches_joint_normal(self):
        rng = np.random.default_rng(1)
        for T in (2, 5, 20):
            p = TemporalParams(mu=rng.normal(), phi=0.9, sigma=rng.uniform(0.2, 2))
            eps = rng.normal(size=T)
            times = np.arange(T)
            cov = p.stationary_variance * p.phi ** np.abs(times[:, None] - times[None, :])
            expected = multivariate_normal.logpdf(eps, mean=np.full(T, p.mu), cov=cov)
            assert_allclose(ar1_logdensity(eps, p), expected, rtol=1e-10)

    def test_invalid_parameters(self):
        with self.assertRaises(ProcessError):
            TemporalParams(mu=0.0, phi=1.0, sigma=1.0)
        with self.assertRaises(ProcessError):
            TemporalParams(mu=0.0, phi=0.2, sigma=0.0)
        with self.assertRaises(ProcessError):
            ar1_logdensity([np.nan], TemporalParams(mu=0.0, phi=0.2, sigma=1.0))

    def test_mean_function(self):
        self.assertEqual(mean_function(3.0, 1.0, 0.7, 0.0), 0.7)
        self.assertEqual(mean_function(2.0, 2.0, 0.7, 0.9), 0.7)
        self.assertEqual(mean_function(2.0, 1.0, 0.0, 0.5), 0.5)


class BlupTests(SimpleTestCase):

    def test_single_parent(self):
        self.assertEqual(blup_previous([4.2], [0.3]), 4.2)

    def test_equal_parent_values(self):
        assert_allclose(blup_previous([1.5, 1.5, 1.5], [0.2, 0.5, -0.1]), 1.5, rtol=1e-12)

    def test_symmetric_geometry_has_equal_weights(self):
        structure = make_structure(n_refs=2, n_parents=2, transient=None)
        midpoint = structure.refs.coords.mean(axis=0)
        structure = structure.with_transient_locations([midpoint])
        assert_allclose(blup_weights(structure.transient_weights[0]), [0.5, 0.5], rtol=1e-10)

    def test_weights_sum_to_one(self):
        structure = make_structure(n_refs=12, n_parents=4, transient=np.random.default_rng(9).uniform(size=(10, 2)))
        for weights in structure.transient_weights:
            assert_allclose(blup_weights(weights).sum(), 1.0, atol=1e-12)

    def test_degenerate_denominator(self):
        with self.assertRaisesMessage(ProcessError, 'degenerate BLUP'):
            blup_previous([1.0, 2.0], [0.5, -0.5])


class PersistentTests(SimpleTestCase):

    def test_full_conditioning_matches_dense_field(self):
        structure = make_structure(n_refs=7, n_parents=6)
        p = TemporalParams(mu=0.0, phi=0.5, sigma=1.0)
        rng = np.random.default_rng(2)
        W = rng.normal(size=(1, 7))
        state = RandomEffectState(eps=np.array([0.4]), W=W)
        R = correlation(pairwise_distances(structure.refs.coords, structure.refs.coords),
                        0.5, structure.calibration.range_scale)
        expected = multivariate_normal.logpdf(W[0], mean=np.full(7, 0.4), cov=structure.marginal_variance * R)
        assert_allclose(persistent_loglik(state, structure, p), expected, rtol=1e-8)

    def test_saturated_head_block(self):
        structure = make_structure(n_refs=4, n_parents=10)
        self.assertEqual(structure.head_size, 4)
        self.assertEqual(structure.kriging_systems(), [])

    def test_process_matches_dense_spatio_temporal_normal(self):
        rng = np.random.default_rng(3)
        for seed in range(4):
            structure = make_structure(n_refs=8, n_parents=7, tau=rng.uniform(0.5, 2), seed=seed)
            p = TemporalParams(mu=rng.normal(), phi=rng.uniform(-0.8, 0.9), sigma=rng.uniform(0.3, 2))
            T = 3
            layout = EffectLayout(n_times=T, n_refs=8)
            u = rng.normal(size=layout.n_effects)
            expected = multivariate_normal.logpdf(u, mean=np.full(u.size, p.mu), cov=dense_covariance(structure, p, T))
            got = process_loglik(layout.split(u), structure, layout, p)
            assert_allclose(got, expected, rtol=1e-8)

    def test_zero_phi_slices_are_exchangeable(self):
        structure = make_structure(n_refs=6, n_parents=3)
        p = TemporalParams(mu=0.2, phi=0.0, sigma=1.0)
        rng = np.random.default_rng(4)
        eps, W = rng.normal(size=2), rng.normal(size=(2, 6))
        one = ar1_logdensity(eps, p) + persistent_loglik(RandomEffectState(eps=eps, W=W), structure, p)
        swapped = RandomEffectState(eps=eps[::-1].copy(), W=W[::-1].copy())
        two = ar1_logdensity(swapped.eps, p) + persistent_loglik(swapped, structure, p)
        assert_allclose(one, two, rtol=1e-12)

    def test_large_tau_lowers_density(self):
        structure = make_structure(n_refs=6, n_parents=3)
        p = TemporalParams(mu=0.0, phi=0.3, sigma=1.0)
        state = RandomEffectState(eps=np.zeros(2), W=np.random.default_rng(5).normal(scale=0.1, size=(2, 6)))
        small = persistent_loglik(state, structure.with_tau(1.0), p)
        large = persistent_loglik(state, structure.with_tau(50.0), p)
        self.assertLess(large, small)


class TransientTests(SimpleTestCase):

    def test_first_time_matches_dense_conditional(self):
        rng = np.random.default_rng(6)
        structure = make_structure(n_refs=6, n_parents=6, transient=rng.uniform(size=(1, 2)))
        p = TemporalParams(mu=0.0, phi=0.5, sigma=1.0)
        eps0, W0, w = 0.3, rng.normal(size=6), 0.7
        layout = EffectLayout(n_times=1, n_refs=6, transient_keys=((0, 0),))
        state = RandomEffectState(eps=np.array([eps0]), W=W0[None, :], transient=np.array([w]))

        points = np.vstack([structure.refs.coords, structure.transient_coords])
        K = structure.marginal_variance * correlation(pairwise_distances(points, points), 0.5,
                                                       structure.calibration.range_scale)
        k = K[:6, 6]
        mean = eps0 + k @ np.linalg.solve(K[:6, :6], W0 - eps0)
        var = K[6, 6] - k @ np.linalg.solve(K[:6, :6], k)
        got = transient_loglik(state.transient, state, structure.transient_blocks(layout), p)
        assert_allclose(got, norm.logpdf(w, mean, np.sqrt(var)), rtol=1e-8)

    def test_single_parent_scalar_conditional(self):
        refs_structure = make_structure(n_refs=5, n_parents=1)
        point = refs_structure.refs.coords[2] + np.array([0.01, 0.0])
        structure = refs_structure.with_transient_locations([point])
        parent = structure.dag.transient_parents[0][0]
        d = np.linalg.norm(point - structure.refs.coords[parent])
        rho = np.exp(-d / structure.calibration.range_scale)
        assert_allclose(structure.transient_weights[0], [rho], rtol=1e-10)
        assert_allclose(structure.transient_deficits[0], 1 - rho ** 2, rtol=1e-8)

    def test_no_transient_effects_contribute_nothing(self):
        structure = make_structure()
        state = RandomEffectState(eps=np.zeros(1), W=np.zeros((1, 6)))
        p = TemporalParams(mu=0.0, phi=0.5, sigma=1.0)
        self.assertEqual(transient_loglik(state.transient, state, [], p), 0.0)

    def test_exact_reference_location_is_rejected(self):
        structure = make_structure()
        with self.assertRaisesMessage(GraphError, 'should be aliased'):
            structure.with_transient_locations([structure.refs.coords[2]])

    def test_nearly_coincident_location_gets_nugget(self):
        structure = make_structure()
        point = structure.refs.coords[2] + np.array([1e-13, 0.0])
        with self.assertLogs('process.state', level='WARNING'):
            extended = structure.with_transient_locations([point])
        self.assertEqual(extended.dag.transient_parents[0][0], 2)
        self.assertGreater(extended.transient_deficits[0], 0.0)
        self.assertLessEqual(extended.transient_deficits[0], 2e-10)


class NearDuplicateReferenceTests(SimpleTestCase):

    def test_nearly_coincident_reference_gets_nugget(self):
        coords = [(0.1, 0.1), (0.5, 0.2), (0.2, 0.6), (0.7, 0.4), (0.9, 0.9), (0.9 + 1e-12, 0.9)]
        refs = order_locations(coords)
        dag = build_persistent_graph(refs, 3)
        self.assertEqual(dag.persistent_parents[5][0], 4)
        with self.assertLogs('process.state', level='WARNING'):
            structure = build_spatial_structure(refs, dag, 1.0, CovarianceSpec())
        self.assertTrue(np.all(np.isfinite(structure.node_deficits)))
        self.assertGreater(structure.node_deficits[5], 0.0)
        self.assertLessEqual(structure.node_deficits[5], 2e-10)
        self.assertEqual(structure.node_deficits[0], 1.0)
        self.assertTrue(np.all(structure.node_deficits[1:5] > 1e-6))


class InnovationOperatorTests(SimpleTestCase):

    def setUp(self):
        rng = np.random.default_rng(7)
        self.structure = make_structure(n_refs=10, n_parents=3, tau=1.4, transient=rng.uniform(size=(4, 2)))
        self.layout = EffectLayout(n_times=3, n_refs=10,
                                   transient_keys=((0, 0), (1, 1), (2, 0), (2, 3)))
        self.p = TemporalParams(mu=0.7, phi=0.6, sigma=0.9)
        self.u = rng.normal(size=self.layout.n_effects)

    def test_matches_term_by_term_density(self):
        form = InnovationOperator(self.structure, self.layout).evaluate(self.p)
        expected = process_loglik(self.layout.split(self.u), self.structure, self.layout, self.p)
        assert_allclose(form.loglik(self.u), expected, rtol=1e-10)

    def test_tau_evaluation_matches_rescaled_structure(self):
        operator = InnovationOperator(self.structure, self.layout)
        expected = process_loglik(self.layout.split(self.u), self.structure.with_tau(3.0), self.layout, self.p)
        assert_allclose(operator.evaluate(self.p, tau=3.0).loglik(self.u), expected, rtol=1e-10)

    def test_gradient_matches_finite_differences(self):
        form = InnovationOperator(self.structure, self.layout).evaluate(self.p)
        grad = form.gradient(self.u)
        h = 1e-6
        for k in range(0, self.u.size, 5):
            step = np.zeros_like(self.u)
            step[k] = h
            fd = (form.loglik(self.u + step) - form.loglik(self.u - step)) / (2 * h)
            assert_allclose(grad[k], fd, rtol=1e-5, atol=1e-6)

    def test_operator_is_unit_lower_triangular(self):
        A = InnovationOperator(self.structure, self.layout).evaluate(self.p).A.toarray()
        assert_array_equal(np.diag(A), np.ones(self.layout.n_effects))
        assert_allclose(np.triu(A, 1), 0.0)

    def test_precision_gives_same_quadratic_form(self):
        form = InnovationOperator(self.structure, self.layout).evaluate(self.p)
        e = form.residual(self.u)
        Q = form.precision()
        mean = np.linalg.solve(form.A.toarray(), form.c)
        r = self.u - mean
        assert_allclose(r @ (Q @ r), (e * e / form.D).sum(), rtol=1e-9)

    def test_sample_slope_in_time_is_phi(self):
        structure = make_structure(n_refs=8, n_parents=3, tau=1.0)
        layout = EffectLayout(n_times=2, n_refs=8)
        p = TemporalParams(mu=0.0, phi=0.5, sigma=1e-6)
        form = InnovationOperator(structure, layout).evaluate(p)
        rng = np.random.default_rng(8)
        draws = np.array([form.sample(rng) for _ in range(4000)])
        before = draws[:, layout.ref_index(0, 5)]
        after = draws[:, layout.ref_index(1, 5)]
        slope = np.cov(before, after)[0, 1] / before.var(ddof=1)
        self.assertLess(abs(slope - 0.5), 0.06)


class LayoutTests(SimpleTestCase):

    def test_split_and_pack(self):
        layout = EffectLayout(n_times=2, n_refs=3, transient_keys=((1, 0),))
        u = np.arange(layout.n_effects, dtype=float)
        state = layout.split(u)
        assert_array_equal(state.eps, [0, 1])
        assert_array_equal(state.W, [[2, 3, 4], [5, 6, 7]])
        assert_array_equal(state.transient, [8])
        assert_array_equal(layout.pack(state), u)
        self.assertEqual(layout.keys()[layout.ref_index(1, 2)], ('ref', 1, 2))

    def test_wrong_length_rejected(self):
        with self.assertRaises(ProcessError):
            EffectLayout(n_times=1, n_refs=2).split(np.zeros(5))
