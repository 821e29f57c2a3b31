"""
Tests for the repaint_tools.analysis module
"""
import math
import unittest

import numpy
from numpy.testing import assert_allclose

from repaint_tools import analysis, models
from repaint_tools.diffusion import NoiseSource, draw_normal, sample_chain
from repaint_tools.errors import (
    InvalidRate,
    NonPositiveError,
    NotContractive,
    OffManifold,
    TooFewPoints,
)
from repaint_tools.generator import closed_form_multi_state, multi_state_coefficients

TOY_LAMBDA = 3.0 / math.sqrt(13.0)


class TestResamplingBudget(unittest.TestCase):
    def test_toy_budget(self):
        self.assertEqual(analysis.resampling_budget(1e-8, TOY_LAMBDA, math.sqrt(0.1), 3.0, 0.9), 107)

    def test_exact_power(self):
        self.assertEqual(analysis.resampling_budget(0.25, 0.5, 1.0, 1.0, 0.0), 2)

    def test_already_close(self):
        self.assertEqual(analysis.resampling_budget(10.0, 0.5, 1.0, 1.0, 0.0), 1)

    def test_monotone_in_epsilon(self):
        budgets = [analysis.resampling_budget(eps, TOY_LAMBDA, 1.0, 3.0, 0.5) for eps in (1e-2, 1e-4, 1e-8)]
        self.assertEqual(budgets, sorted(budgets))

    def test_invalid(self):
        self.assertRaises(InvalidRate, analysis.resampling_budget, 1e-8, 1.0, 1.0, 1.0, 0.5)
        self.assertRaises(InvalidRate, analysis.resampling_budget, 1e-8, 0.0, 1.0, 1.0, 0.5)
        self.assertRaises(InvalidRate, analysis.resampling_budget, 0.0, 0.5, 1.0, 1.0, 0.5)


class TestPerturbationBounds(unittest.TestCase):
    def test_ceiling(self):
        self.assertEqual(analysis.noisy_error_ceiling(0.0, 2.0, 0.5, 0.75), 0.0)
        self.assertAlmostEqual(analysis.noisy_error_ceiling(0.1, 2.0, 0.5, 0.75), 0.8, places=14)
        self.assertAlmostEqual(analysis.noisy_error_ceiling(0.2, 2.0, 0.5, 0.75), 1.6, places=14)

    def test_bound_decays_to_ceiling(self):
        zeta = analysis.noisy_error_ceiling(0.1, 1.0, 0.5, 0.75)
        first = analysis.noisy_error_bound(0, 1.0, 1.0, 0.1, 1.0, 0.5, 0.75)
        late = analysis.noisy_error_bound(200, 1.0, 1.0, 0.1, 1.0, 0.5, 0.75)
        self.assertAlmostEqual(first, 1.0 / math.sqrt(0.25) + 2.0 * zeta, places=12)
        self.assertAlmostEqual(late, zeta, places=12)

    def test_admissible(self):
        self.assertAlmostEqual(analysis.admissible_perturbation(0.01, 0.832, 1.0), 1.68e-3, places=12)
        self.assertRaises(InvalidRate, analysis.admissible_perturbation, 0.01, 1.0, 1.0)
        self.assertRaises(InvalidRate, analysis.admissible_perturbation, 0.01, 0.5, 0.0)

    def test_report(self):
        report = analysis.bound_report(1e-8, 0.9, TOY_LAMBDA, math.sqrt(0.1), 3.0)
        self.assertEqual(report.r_required, 107)
        self.assertEqual(report.error_ceiling, 0.0)
        self.assertEqual(report.lambda_hat_max, TOY_LAMBDA)
        self.assertEqual([name for name, _ in report.rows()],
                         ["lambda_max", "lambda_hat_max", "r_required", "error_ceiling", "admissible_delta"])

    def test_report_triangle_inequality(self):
        report = analysis.bound_report(1e-2, 0.9, 0.5, 1.0, 1.0, delta_norm=0.1)
        self.assertAlmostEqual(report.lambda_hat_max, 0.6, places=15)
        self.assertGreater(report.error_ceiling, 0.0)


class TestFixedPoint(unittest.TestCase):
    def test_zero_map(self):
        forcing = numpy.array([1.0, -2.0])
        assert_allclose(analysis.fixed_point_oracle(numpy.zeros((2, 2)), forcing), forcing)

    def test_toy_repaint(self):
        c = math.sqrt(0.1)
        manifold = models.toy_manifold()
        mask = models.InpaintMask.from_bits("01")
        P = manifold.projector()
        x0 = manifold.embed([[1.0]])
        forcing = (c * x0 * (1.0 - mask.m)) @ P.T
        fixed = analysis.fixed_point_oracle(c * P * mask.m, forcing)
        slope = 6.0 * c / (13.0 - 9.0 * c)
        self.assertAlmostEqual(fixed[0, 1], slope * x0[0, 0], places=12)

    def test_aligned_map_recovers_sample(self):
        manifold = models.toy_manifold()
        mask = models.InpaintMask.from_bits("01")
        P = manifold.projector()
        x0 = manifold.embed([[-1.3]])
        fixed = analysis.fixed_point_oracle(P * mask.m, (x0 * (1.0 - mask.m)) @ P.T)
        assert_allclose(fixed, x0, atol=1e-12)

    def test_check_mode(self):
        rng = numpy.random.default_rng(4)
        M = rng.standard_normal((5, 5))
        M *= 0.99 / models.spectral_norm(M)
        forcing = rng.standard_normal(5)
        solved = analysis.fixed_point_oracle(M, forcing, "check")
        assert_allclose(solved, M @ solved + forcing, atol=1e-10)

    def test_not_contractive(self):
        self.assertRaises(NotContractive, analysis.fixed_point_oracle, numpy.eye(2), numpy.ones(2))
        self.assertRaises(ValueError, analysis.fixed_point_oracle, numpy.zeros((2, 2)), numpy.ones(2), "guess")


class TestRates(unittest.TestCase):
    def test_toy_contraction_rate(self):
        rate = analysis.contraction_rate(models.toy_manifold(), models.InpaintMask.from_bits("01"))
        self.assertAlmostEqual(rate, 9.0 / 13.0, places=12)

    def test_rate_below_norm(self):
        manifold = models.random_manifold(6, 3, seed=2)
        mask = models.InpaintMask.from_bits("110000")
        self.assertLessEqual(analysis.contraction_rate(manifold, mask),
                             models.validate_mask(mask, manifold) + 1e-12)

    def test_fit_geometric(self):
        fit = analysis.fit_rate([1.0, 0.5, 0.25, 0.125])
        self.assertAlmostEqual(fit.fitted_rate, 0.5, places=12)
        self.assertAlmostEqual(fit.r_squared, 1.0, places=12)
        self.assertEqual(fit.rounds_used, 4)

    def test_fit_constant(self):
        fit = analysis.fit_rate([2.0, 2.0, 2.0])
        self.assertEqual((fit.fitted_rate, fit.r_squared), (1.0, 1.0))

    def test_fit_errors(self):
        self.assertRaises(TooFewPoints, analysis.fit_rate, [1.0, 0.5])
        self.assertRaises(NonPositiveError, analysis.fit_rate, [1.0, 0.0, 0.5])
        self.assertRaises(NonPositiveError, analysis.fit_rate, [1.0, -0.5, 0.25])

    def test_fit_drops_round_off(self):
        with self.assertWarns(UserWarning):
            fit = analysis.fit_rate([1.0, 0.1, 0.01, 0.001, 1e-20])
        self.assertEqual(fit.rounds_used, 4)
        self.assertAlmostEqual(fit.fitted_rate, 0.1, places=10)


class TestManifoldChecks(unittest.TestCase):
    def setUp(self):
        self.manifold = models.toy_manifold()

    def test_residual(self):
        self.assertAlmostEqual(analysis.manifold_residual(self.manifold.embed([[2.0]])[0], self.manifold), 0.0,
                               places=14)
        off = numpy.array([3.0, -2.0]) / math.sqrt(13.0)
        self.assertAlmostEqual(analysis.manifold_residual(off, self.manifold), 1.0, places=14)
        self.assertEqual(analysis.manifold_residual(numpy.zeros((4, 2)), self.manifold).shape, (4,))

    def test_exact_sampler_moments(self):
        schedule = models.constant_schedule(0.2, 4)
        model = closed_form_multi_state(self.manifold, schedule, iid_noise=True)
        alignment = models.AlignmentSchedule.for_sampling(schedule, multi_state_coefficients(schedule))
        samples = sample_chain(model, alignment, NoiseSource(9).spawn(20000))
        report = analysis.latent_moment_test(samples, self.manifold)
        self.assertTrue(report.passed)

    def test_collapsed_samples_fail(self):
        report = analysis.latent_moment_test(numpy.zeros((1000, 2)), self.manifold)
        self.assertTrue(report.mean_ok)
        self.assertFalse(report.cov_ok)

    def test_overdispersed_samples_fail(self):
        samples = models.draw_from_manifold(self.manifold, 5000, seed=1).samples * 2.0
        self.assertFalse(analysis.latent_moment_test(samples, self.manifold).cov_ok)

    def test_accepts_sample_batch(self):
        batch = models.draw_from_manifold(self.manifold, 5000, seed=1)
        self.assertTrue(analysis.latent_moment_test(batch, self.manifold).passed)

    def test_rejections(self):
        self.assertRaises(TooFewPoints, analysis.latent_moment_test, numpy.zeros((10, 2)), self.manifold)
        self.assertRaises(OffManifold, analysis.latent_moment_test,
                          draw_normal(NoiseSource(0).spawn(200), 2), self.manifold)


class TestSlowExpansion(unittest.TestCase):
    def test_single_step_bracket(self):
        manifold = models.toy_manifold()
        mask = models.InpaintMask.from_bits("01")
        schedule = models.constant_schedule(0.5, 2)
        x_T = numpy.array([[1.0, 0.0]])
        x0 = manifold.embed([[1.0]])
        parts = analysis.slow_diffusion_expansion(manifold, mask, schedule, 0.5, x_T, x0, terms=True)
        self.assertEqual(len(parts), 2)
        P = manifold.projector()
        assert_allclose(parts[0], 0.25 * (x_T @ (P * mask.m @ P).T), atol=1e-15)
        assert_allclose(parts[1], 0.5 * math.sqrt(0.5) * ((x0 * (1.0 - mask.m)) @ P.T), atol=1e-15)
        total = analysis.slow_diffusion_expansion(manifold, mask, schedule, 0.5, x_T, x0)
        assert_allclose(total, parts[0] + parts[1], atol=1e-15)


if __name__ == "__main__":
    unittest.main()
