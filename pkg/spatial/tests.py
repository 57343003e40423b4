import numpy as np
from numpy.testing import assert_allclose, assert_array_equal
from django.test import SimpleTestCase

from etc.exceptions import CovarianceError, GraphError
from .covariance import (
    CovarianceCalibration, CovarianceSpec, calibrate, correlation,
    covariance, kriging_system, unit_conditional,
)
from .graph import (
    build_persistent_graph, build_transient_parents, dedupe_locations,
    mean_edge_distance, order_locations, pairwise_distances, to_dot,
)


def unit_square_grid():
    coarse = [(0.1 * x, 0.1 * y) for x in range(11) for y in range(11)]
    fine = [(0.1 * x + 0.05, 0.1 * y + 0.05) for x in range(10) for y in range(10)]
    return np.array(coarse + fine)


def brute_force_parents(coords, n_parents):
    parents = []
    for i in range(coords.shape[0]):
        d = np.sqrt(((coords[:i] - coords[i]) ** 2).sum(axis=1))
        order = sorted(range(i), key=lambda j: (d[j], j))
        parents.append(order[:min(i, n_parents)])
    return parents


class OrderLocationsTests(SimpleTestCase):

    def test_sorted_by_coordinate_sum(self):
        refs = order_locations([(0, 0), (1, 1), (0.5, 0.2)])
        assert_array_equal(refs.coords, [(0, 0), (0.5, 0.2), (1, 1)])
        assert_array_equal(refs.source_index, [0, 2, 1])

    def test_tie_broken_on_first_coordinate(self):
        refs = order_locations([(1, 0), (0, 1)])
        assert_array_equal(refs.coords, [(0, 1), (1, 0)])

    def test_grid_runs_south_west_to_north_east(self):
        refs = order_locations(unit_square_grid())
        assert_allclose(refs.coords[0], (0, 0))
        assert_allclose(refs.coords[-1], (1, 1))

    def test_permuting_input_gives_same_order(self):
        rng = np.random.default_rng(3)
        coords = rng.uniform(size=(40, 2))
        first = order_locations(coords)
        second = order_locations(coords[rng.permutation(40)])
        assert_array_equal(first.coords, second.coords)

    def test_empty_input_rejected(self):
        with self.assertRaisesMessage(GraphError, 'empty reference set'):
            order_locations(np.zeros((0, 2)))


class DedupeLocationsTests(SimpleTestCase):

    def test_duplicates_merged(self):
        unique, index = dedupe_locations([(0, 0), (1, 2), (0, 0), (3, 3), (1, 2)])
        assert_array_equal(unique, [(0, 0), (1, 2), (3, 3)])
        assert_array_equal(index, [0, 1, 0, 2, 1])

    def test_no_duplicates_is_identity(self):
        coords = np.array([(5.0, 1.0), (0.0, 0.0), (2.0, 2.0)])
        unique, index = dedupe_locations(coords)
        assert_array_equal(unique, coords)
        assert_array_equal(index, [0, 1, 2])

    def test_repeated_yearly_stations(self):
        stations = np.random.default_rng(0).uniform(size=(30, 2))
        rows = np.vstack([stations] * 5)
        unique, index = dedupe_locations(rows)
        self.assertEqual(unique.shape[0], 30)
        assert_array_equal(unique[index], rows)


class PersistentGraphTests(SimpleTestCase):

    def test_collinear_nearest_predecessor(self):
        refs = order_locations([(0, 0), (1, 0), (2, 0)])
        dag = build_persistent_graph(refs, 1)
        self.assertEqual([list(p) for p in dag.persistent_parents], [[], [0], [1]])

    def test_saturated_graph_conditions_on_everything(self):
        refs = order_locations(np.random.default_rng(1).uniform(size=(8, 2)))
        dag = build_persistent_graph(refs, 20)
        for i, parents in enumerate(dag.persistent_parents):
            self.assertEqual(sorted(parents), list(range(i)))

    def test_matches_brute_force_oracle(self):
        refs = order_locations(np.random.default_rng(2).uniform(size=(20, 2)))
        dag = build_persistent_graph(refs, 5)
        expected = brute_force_parents(refs.coords, 5)
        for i, parents in enumerate(dag.persistent_parents):
            self.assertEqual(list(parents), expected[i])
            self.assertTrue(all(p < i for p in parents))
            self.assertEqual(len(parents), min(i, 5))

    def test_tree_search_matches_brute_force(self):
        refs = order_locations(np.random.default_rng(4).uniform(size=(2100, 2)))
        dag = build_persistent_graph(refs, 4)
        coords = refs.coords
        for i in (0, 1, 17, 500, 1337, 2099):
            d = pairwise_distances(coords[i:i + 1], coords[:i])[0]
            expected = list(np.lexsort((np.arange(i), d))[:min(i, 4)])
            self.assertEqual(list(dag.persistent_parents[i]), expected)

    def test_rejects_zero_parents(self):
        refs = order_locations([(0, 0), (1, 1)])
        with self.assertRaises(GraphError):
            build_persistent_graph(refs, 0)

    def test_dot_export_has_one_line_per_edge(self):
        refs = order_locations([(0, 0), (1, 0), (2, 0)])
        dot = to_dot(build_persistent_graph(refs, 2), refs)
        self.assertTrue(dot.startswith('digraph persistent {'))
        self.assertEqual(dot.count('->'), 3)
        self.assertIn('2 -> 1;', dot)


class TransientParentsTests(SimpleTestCase):

    def test_coincident_reference_is_first_parent(self):
        refs = order_locations(unit_square_grid())
        parents = build_transient_parents([refs.coords[37]], refs, 3)
        self.assertEqual(parents[0][0], 37)
        self.assertEqual(len(parents[0]), 3)

    def test_equidistant_tie_prefers_lower_index(self):
        refs = order_locations([(0, 0), (2, 0)])
        parents = build_transient_parents([(1, 0)], refs, 1)
        self.assertEqual(list(parents[0]), [0])

    def test_transect_point_matches_brute_force(self):
        refs = order_locations(unit_square_grid())
        parents = build_transient_parents([(0.387, 0.5)], refs, 4)
        d = np.sqrt(((refs.coords - np.array([0.387, 0.5])) ** 2).sum(axis=1))
        expected = sorted(range(len(refs)), key=lambda j: (d[j], j))[:4]
        self.assertEqual(list(parents[0]), expected)

    def test_parent_count_capped_by_reference_size(self):
        refs = order_locations([(0, 0), (1, 1)])
        parents = build_transient_parents([(0.3, 0.3), (5, 5)], refs, 15)
        self.assertTrue(all(len(p) == 2 for p in parents))


class MeanEdgeDistanceTests(SimpleTestCase):

    def test_mean_of_edge_lengths(self):
        refs = order_locations([(0, 0), (1, 0), (4, 0)])
        dag = build_persistent_graph(refs, 1)
        self.assertAlmostEqual(mean_edge_distance(dag, refs).mean_edge_distance, 2.0)

    def test_matches_edge_enumeration_on_grid(self):
        refs = order_locations(unit_square_grid())
        dag = build_persistent_graph(refs, 10)
        lengths = [np.linalg.norm(refs.coords[c] - refs.coords[p]) for c, p in dag.edges()]
        assert_allclose(mean_edge_distance(dag, refs).mean_edge_distance, np.mean(lengths), rtol=1e-12)

    def test_scaling_coordinates_scales_distance(self):
        coords = np.random.default_rng(5).uniform(size=(25, 2))
        refs = order_locations(coords)
        scaled = order_locations(coords * 3.0)
        d1 = mean_edge_distance(build_persistent_graph(refs, 4), refs).mean_edge_distance
        d3 = mean_edge_distance(build_persistent_graph(scaled, 4), scaled).mean_edge_distance
        assert_allclose(d3, 3.0 * d1, rtol=1e-12)

    def test_single_node_is_degenerate(self):
        refs = order_locations([(0, 0)])
        with self.assertRaisesMessage(GraphError, 'degenerate graph'):
            mean_edge_distance(build_persistent_graph(refs, 3), refs)


class HaversineTests(SimpleTestCase):

    def lon_lat(self, n, seed):
        rng = np.random.default_rng(seed)
        return np.column_stack([rng.uniform(-30, 30, size=n), rng.uniform(30, 60, size=n)])

    def test_one_degree_of_latitude(self):
        d = pairwise_distances([(10.0, 45.0)], [(10.0, 46.0)], 'haversine')
        assert_allclose(d, [[111.195]], rtol=1e-5)

    def test_antipodes_are_half_a_circumference_apart(self):
        d = pairwise_distances([(0.0, 0.0)], [(180.0, 0.0)], 'haversine')
        assert_allclose(d, [[np.pi * 6371.0088]], rtol=1e-7)

    def test_symmetric_with_zero_diagonal(self):
        coords = self.lon_lat(12, seed=7)
        d = pairwise_distances(coords, coords, 'haversine')
        assert_allclose(d, d.T, atol=1e-9)
        assert_allclose(np.diag(d), 0.0, atol=1e-9)

    def test_needs_longitude_latitude_pairs(self):
        with self.assertRaisesMessage(GraphError, 'longitude, latitude'):
            pairwise_distances([(0.0, 0.0, 1.0)], [(1.0, 1.0, 1.0)], 'haversine')
        refs = order_locations(np.random.default_rng(8).uniform(size=(5, 3)))
        with self.assertRaises(GraphError):
            build_persistent_graph(refs, 2, metric='haversine')

    def test_tree_search_matches_brute_force(self):
        refs = order_locations(self.lon_lat(2100, seed=9))
        dag = build_persistent_graph(refs, 4, metric='haversine')
        coords = refs.coords
        for i in (0, 1, 17, 500, 1337, 2099):
            d = pairwise_distances(coords[i:i + 1], coords[:i], 'haversine')[0]
            expected = list(np.lexsort((np.arange(i), d))[:min(i, 4)])
            self.assertEqual(list(dag.persistent_parents[i]), expected)

    def test_transient_tree_search_matches_brute_force(self):
        refs = order_locations(self.lon_lat(2100, seed=10))
        query = self.lon_lat(40, seed=11)
        parents = build_transient_parents(query, refs, 5, metric='haversine')
        d = pairwise_distances(query, refs.coords, 'haversine')
        index = np.arange(len(refs))
        for row, got in enumerate(parents):
            self.assertEqual(list(got), list(np.lexsort((index, d[row]))[:5]))

    def test_small_sets_use_great_circle_order(self):
        # 1.5 degrees of longitude at 60N are shorter than 1 degree of latitude
        refs = order_locations([(0.0, 59.0), (1.5, 60.0)])
        self.assertEqual(list(build_transient_parents([(0.0, 60.0)], refs, 2)[0]), [0, 1])
        parents = build_transient_parents([(0.0, 60.0)], refs, 2, metric='haversine')
        self.assertEqual(list(parents[0]), [1, 0])


class CovarianceTests(SimpleTestCase):

    def setUp(self):
        self.spec = CovarianceSpec(tau=1.3)
        self.cal = CovarianceCalibration(k_cal=1.4, rho_tau=0.6, mean_edge_distance=0.2,
                                         marginal_variance=(1.4 * 1.3) ** 2 * 0.6)

    def test_zero_distance_is_marginal_variance(self):
        assert_allclose(covariance(0.0, self.spec, self.cal), (1.4 * 1.3) ** 2 * 0.6)

    def test_unit_exponent(self):
        d = self.cal.mean_edge_distance * self.cal.rho_tau
        assert_allclose(covariance(d, self.spec, self.cal), self.cal.marginal_variance * np.exp(-1.0))

    def test_monotone_decreasing(self):
        values = covariance(np.linspace(0, 3, 50), self.spec, self.cal)
        self.assertTrue(np.all(np.diff(values) < 0))

    def test_negative_distance_rejected(self):
        with self.assertRaises(CovarianceError):
            covariance(-0.1, self.spec, self.cal)

    def test_matern_three_halves_closed_form(self):
        h = np.linspace(0, 4, 30)
        x = np.sqrt(3.0) * h
        assert_allclose(correlation(h, nu=1.5), (1 + x) * np.exp(-x), rtol=1e-10, atol=1e-14)

    def test_matern_half_equals_exponential(self):
        h = np.linspace(0, 5, 40)
        matern = CovarianceSpec(family='matern', nu=0.5)
        assert_allclose(covariance(h, matern, self.cal), covariance(h, self.spec, self.cal), atol=1e-12)

    def test_exponential_requires_half_smoothness(self):
        with self.assertRaises(CovarianceError):
            CovarianceSpec(family='exponential', nu=1.5)


class KrigingSystemTests(SimpleTestCase):

    def setUp(self):
        self.spec = CovarianceSpec(tau=1.0)
        self.cal = CovarianceCalibration(k_cal=1.0, rho_tau=1.0, mean_edge_distance=1.0,
                                         marginal_variance=1.0)

    def test_parent_at_child_location(self):
        system = kriging_system([0.2, 0.3], [[0.2, 0.3]], self.spec, self.cal)
        assert_allclose(system.weights, [1.0])
        self.assertAlmostEqual(system.cond_var, 0.0)

    def test_single_parent_scalar_algebra(self):
        system = kriging_system([0.0, 0.0], [[0.7, 0.0]], self.spec, self.cal)
        assert_allclose(system.weights, [np.exp(-0.7)])
        assert_allclose(system.cond_var, 1.0 - np.exp(-1.4))

    def test_matches_dense_schur_complement(self):
        rng = np.random.default_rng(6)
        points = rng.uniform(size=(6, 2))
        K = np.exp(-pairwise_distances(points, points))
        system = kriging_system(points[0], points[1:], self.spec, self.cal)
        weights = np.linalg.solve(K[1:, 1:], K[1:, 0])
        cond_var = K[0, 0] - K[0, 1:] @ np.linalg.solve(K[1:, 1:], K[1:, 0])
        assert_allclose(system.weights, weights, rtol=1e-10)
        assert_allclose(system.cond_var, cond_var, rtol=1e-10)
        self.assertTrue(0.0 <= system.cond_var <= self.cal.marginal_variance)

    def test_weights_invariant_to_tau(self):
        rng = np.random.default_rng(7)
        points = rng.uniform(size=(5, 2))
        cal = CovarianceCalibration(k_cal=1.2, rho_tau=0.7, mean_edge_distance=0.3,
                                    marginal_variance=(1.2 * 1.0) ** 2 * 0.7)
        one = kriging_system(points[0], points[1:], self.spec, cal)
        two = kriging_system(points[0], points[1:], self.spec.with_tau(2.0), cal.with_tau(2.0))
        assert_allclose(two.weights, one.weights, rtol=1e-12)
        assert_allclose(two.cond_var, 4.0 * one.cond_var, rtol=1e-10)

    def test_needs_a_parent(self):
        with self.assertRaises(CovarianceError):
            kriging_system([0, 0], np.zeros((0, 2)), self.spec, self.cal)


class CalibrationTests(SimpleTestCase):

    def setUp(self):
        self.refs = order_locations(unit_square_grid())
        self.dag = build_persistent_graph(self.refs, 10)
        self.spec = CovarianceSpec(tau=2.0)

    def test_matches_dense_reimplementation(self):
        coords = self.refs.coords
        d_bar = np.mean([np.linalg.norm(coords[c] - coords[p]) for c, p in self.dag.edges()])
        K = np.exp(-pairwise_distances(coords, coords) / d_bar)
        deficits = []
        for i, parents in enumerate(self.dag.persistent_parents):
            if len(parents):
                P = np.asarray(parents)
                deficits.append(1 - K[i, P] @ np.linalg.solve(K[np.ix_(P, P)], K[P, i]))
        head = np.arange(1, 11)
        rho = 1 - K[0, head] @ np.linalg.solve(K[np.ix_(head, head)], K[head, 0])

        cal = calibrate(self.dag, self.refs, 2.0, self.spec)
        assert_allclose(cal.k_cal, np.sqrt(1 / np.mean(deficits)), rtol=1e-10)
        assert_allclose(cal.rho_tau, rho, rtol=1e-10)
        assert_allclose(cal.marginal_variance, (cal.k_cal * 2.0) ** 2 * rho, rtol=1e-12)

    def test_defining_equations_hold(self):
        cal = calibrate(self.dag, self.refs, 2.0, self.spec)
        coords = self.refs.coords
        deficits = [
            unit_conditional(coords[i], coords[p], 0.5, cal.mean_edge_distance)[1]
            for i, p in enumerate(self.dag.persistent_parents) if len(p)
        ]
        assert_allclose((cal.k_cal * 2.0) ** 2 * np.mean(deficits), 4.0, rtol=1e-8)
        head_deficit = unit_conditional(coords[0], coords[1:11], 0.5, cal.mean_edge_distance)[1]
        assert_allclose(cal.marginal_variance, (cal.k_cal * 2.0) ** 2 * head_deficit, rtol=1e-8)

    def test_constants_do_not_depend_on_tau(self):
        one = calibrate(self.dag, self.refs, 1.0, self.spec)
        three = calibrate(self.dag, self.refs, 3.0, self.spec)
        self.assertEqual(one.k_cal, three.k_cal)
        self.assertEqual(one.rho_tau, three.rho_tau)
        assert_allclose(three.marginal_variance, 9.0 * one.marginal_variance, rtol=1e-12)

    def test_scaling_at_least_one(self):
        refs = order_locations([(0, 0), (1000, 0), (2000, 0), (0, 3000)])
        dag = build_persistent_graph(refs, 1)
        cal = calibrate(dag, refs, 1.0, CovarianceSpec())
        self.assertGreaterEqual(cal.k_cal, 1.0)

    def test_coincident_node_excluded(self):
        refs = order_locations([(0, 0), (1, 0), (1, 0)])
        dag = build_persistent_graph(refs, 1)
        cal = calibrate(dag, refs, 1.0, CovarianceSpec())
        # edges of length 1 and 0, so d_bar = 0.5 and only node 1 is averaged
        assert_allclose(cal.k_cal, np.sqrt(1 / (1 - np.exp(-4.0))), rtol=1e-12)
