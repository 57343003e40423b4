import numpy as np
from numpy.testing import assert_allclose
from scipy.integrate import trapezoid
from scipy.stats import poisson
from django.test import SimpleTestCase

from etc.exceptions import ObservationError
from .families import ResponseFamily, eta_terms, log_density, make_family, simulate_response
from .links import LinkFunction, d1_inv_link, d2_inv_link, inv_link, linear_predictor


class LinearPredictorTests(SimpleTestCase):

    def test_no_covariates(self):
        self.assertEqual(float(linear_predictor(np.zeros(0), np.zeros(0), 2.5)), 2.5)

    def test_zero_covariates(self):
        self.assertEqual(float(linear_predictor([0.0, 0.0], [1.0, 3.0], -1.0)), -1.0)

    def test_arithmetic(self):
        self.assertEqual(float(linear_predictor([1.0, 2.0], [0.5, -1.0], 3.0)), 1.5)

    def test_dimension_mismatch(self):
        with self.assertRaises(ObservationError):
            linear_predictor([1.0, 2.0], [0.5], 0.0)


class LinkTests(SimpleTestCase):

    def test_identity(self):
        self.assertEqual(float(inv_link(1.7, 'identity')), 1.7)
        self.assertEqual(float(d1_inv_link(1.7, 'identity')), 1.0)
        self.assertEqual(float(d2_inv_link(1.7, 'identity')), 0.0)

    def test_log_derivatives_are_all_exp(self):
        eta = np.array([-2.0, 0.0, 3.0])
        for f in (inv_link, d1_inv_link, d2_inv_link):
            assert_allclose(f(eta, 'log'), np.exp(eta))

    def test_logit_at_zero(self):
        assert_allclose([inv_link(0.0, 'logit'), d1_inv_link(0.0, 'logit'), d2_inv_link(0.0, 'logit')],
                        [0.5, 0.25, 0.0], atol=1e-15)

    def test_overflow_guard(self):
        self.assertTrue(np.isfinite(inv_link(5000.0, 'log')))
        self.assertEqual(float(inv_link(-5000.0, 'logit')), inv_link(-700.0, 'logit'))

    def test_forward_inverts(self):
        mu = np.array([0.2, 0.7])
        for name in ('identity', 'log', 'logit'):
            assert_allclose(inv_link(LinkFunction(name).forward(mu), name), mu, rtol=1e-12)

    def test_unknown_link(self):
        with self.assertRaises(ObservationError):
            LinkFunction('probit')


class LogDensityTests(SimpleTestCase):

    def test_poisson_zero_count(self):
        assert_allclose(log_density(0, 1.0, ResponseFamily('poisson')), -1.0)

    def test_gaussian_at_mean(self):
        family = ResponseFamily('gaussian', {'sd': 1.7})
        assert_allclose(log_density(2.0, 2.0, family), -0.5 * np.log(2 * np.pi * 1.7 ** 2))

    def test_compois_unit_dispersion_is_poisson(self):
        family = ResponseFamily('compois', {'dispersion': 1.0})
        y = np.arange(51, dtype=float)
        for mu in (0.3, 4.0, 20.0):
            assert_allclose(family.log_density(y, mu), poisson.logpmf(y, mu), rtol=1e-10, atol=1e-10)

    def test_discrete_families_sum_to_one(self):
        y = np.arange(200, dtype=float)
        for family in (ResponseFamily('poisson'),
                       ResponseFamily('negative_binomial', {'overdispersion': 0.3}),
                       ResponseFamily('compois', {'dispersion': 0.7}),
                       ResponseFamily('compois', {'dispersion': 1.6})):
            assert_allclose(np.exp(family.log_density(y, 6.0)).sum(), 1.0, atol=1e-10)
        bern = ResponseFamily('bernoulli')
        assert_allclose(np.exp(bern.log_density([0.0, 1.0], 0.3)).sum(), 1.0, atol=1e-14)

    def test_gaussian_integrates_to_one(self):
        family = ResponseFamily('gaussian', {'sd': 1.3})
        grid = np.linspace(-14.0, 16.0, 30001)
        assert_allclose(trapezoid(np.exp(family.log_density(grid, 1.0)), grid), 1.0, atol=1e-8)

    def test_compois_mean_matches_target(self):
        family = ResponseFamily('compois', {'dispersion': 0.7})
        y = np.arange(120, dtype=float)
        p = np.exp(family.log_density(y, 9.5))
        assert_allclose(p @ y, 9.5, rtol=1e-9)

    def test_support_error_names_row(self):
        with self.assertRaisesMessage(ObservationError, 'row 1'):
            ResponseFamily('poisson').check_support([2.0, -1.0, 3.0])
        with self.assertRaises(ObservationError):
            ResponseFamily('bernoulli').check_support([0.0, 2.0])
        with self.assertRaises(ObservationError):
            ResponseFamily('negative_binomial', {'overdispersion': 1.0}).check_support([0.5])

    def test_mean_outside_domain_is_minus_infinity(self):
        self.assertEqual(float(ResponseFamily('poisson').log_density(1.0, -0.5)), -np.inf)

    def test_parameter_validation(self):
        with self.assertRaises(ObservationError):
            ResponseFamily('gaussian')
        with self.assertRaises(ObservationError):
            ResponseFamily('negative_binomial', {'overdispersion': -1.0})
        with self.assertRaises(ObservationError):
            make_family('bernoulli', link='log')


class DerivativeTests(SimpleTestCase):

    cases = [
        (ResponseFamily('poisson'), 'log', np.array([0.0, 3.0, 7.0])),
        (ResponseFamily('poisson'), 'identity', np.array([0.0, 3.0, 7.0])),
        (ResponseFamily('negative_binomial', {'overdispersion': 0.4}), 'log', np.array([0.0, 2.0, 9.0])),
        (ResponseFamily('compois', {'dispersion': 0.7}), 'log', np.array([0.0, 4.0, 6.0])),
        (ResponseFamily('gaussian', {'sd': 0.8}), 'identity', np.array([-1.0, 0.4, 2.2])),
        (ResponseFamily('gaussian', {'sd': 0.8}), 'log', np.array([0.5, 1.4, 2.2])),
        (ResponseFamily('bernoulli'), 'logit', np.array([0.0, 1.0, 1.0])),
    ]

    def test_first_and_second_derivatives(self):
        h = 1e-4
        for family, link, y in self.cases:
            eta = np.array([0.4, 1.1, 1.6])
            ll, g1, g2 = eta_terms(y, eta, family, link)
            up, g1_up, _ = eta_terms(y, eta + h, family, link)
            down, g1_down, _ = eta_terms(y, eta - h, family, link)
            assert_allclose(g1, (up - down) / (2 * h), rtol=1e-4, atol=1e-5, err_msg=family.family)
            assert_allclose(g2, (g1_up - g1_down) / (2 * h), rtol=1e-4, atol=1e-5, err_msg=family.family)

    def test_canonical_matches_general_path(self):
        y = np.array([0.0, 2.0, 5.0])
        eta = np.array([-0.3, 0.2, 1.7])
        ll, g1, g2 = eta_terms(y, eta, ResponseFamily('poisson'), 'log')
        assert_allclose(ll, ResponseFamily('poisson').log_density(y, np.exp(eta)), rtol=1e-12)
        assert_allclose(g1, y - np.exp(eta))
        assert_allclose(g2, -np.exp(eta))


class SimulationTests(SimpleTestCase):

    def test_tiny_gaussian_noise_returns_mean(self):
        rng = np.random.default_rng(0)
        mu = np.array([1.0, -2.0, 3.5])
        draws = simulate_response(mu, ResponseFamily('gaussian', {'sd': 1e-12}), rng)
        assert_allclose(draws, mu, atol=1e-9)

    def test_poisson_mean(self):
        rng = np.random.default_rng(1)
        draws = simulate_response(np.full(100_000, 4.0), ResponseFamily('poisson'), rng)
        self.assertLess(abs(draws.mean() - 4.0), 4 * np.sqrt(4.0 / 100_000))

    def test_bernoulli_certain_success(self):
        rng = np.random.default_rng(2)
        self.assertTrue(np.all(simulate_response(np.ones(10), ResponseFamily('bernoulli'), rng) == 1))

    def test_negative_binomial_is_over_dispersed(self):
        rng = np.random.default_rng(3)
        family = ResponseFamily('negative_binomial', {'overdispersion': 0.5})
        draws = family.simulate(np.full(100_000, 5.0), rng)
        _, var = family.mean_variance(5.0)
        self.assertGreater(draws.var(), draws.mean())
        assert_allclose(draws.var(), var, rtol=0.05)
        assert_allclose(draws.mean(), 5.0, rtol=0.02)

    def test_compois_dispersion_direction(self):
        rng = np.random.default_rng(4)
        under = ResponseFamily('compois', {'dispersion': 0.7}).simulate(np.full(20_000, 5.0), rng)
        over = ResponseFamily('compois', {'dispersion': 1.5}).simulate(np.full(20_000, 5.0), rng)
        self.assertLess(under.var(), under.mean())
        self.assertGreater(over.var(), over.mean())
        assert_allclose(under.mean(), 5.0, rtol=0.03)

    def test_compois_variance_formula(self):
        rng = np.random.default_rng(5)
        family = ResponseFamily('compois', {'dispersion': 0.7})
        draws = family.simulate(np.full(100_000, 3.0), rng)
        _, var = family.mean_variance(np.array([3.0]))
        assert_allclose(draws.var(), var[0], rtol=0.05)
