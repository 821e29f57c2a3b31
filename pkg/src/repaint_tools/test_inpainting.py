"""
Tests for the repaint_tools.inpainting module
"""
import math
import unittest

import numpy
from numpy.testing import assert_allclose, assert_array_equal

from repaint_tools import analysis, inpainting, models
from repaint_tools.diffusion import NoiseSource, draw_normal
from repaint_tools.errors import AssumptionViolated, InvalidMask, OutOfRange, ScheduleMismatch, ShapeMismatch
from repaint_tools.generator import (
    closed_form_multi_state,
    closed_form_two_state,
    multi_state_coefficients,
    perturb_generator,
)

C = math.sqrt(0.1)
REPAINT_SLOPE = 6.0 * C / (13.0 - 9.0 * C)


class ToyCase(unittest.TestCase):
    '''Toy line through [2, 3], second coordinate missing, beta = 0.9.'''
    n = 1000

    def setUp(self):
        self.manifold = models.toy_manifold()
        self.mask = models.InpaintMask.from_bits("01")
        self.model = closed_form_two_state(self.manifold, 0.9)
        batch = models.draw_from_manifold(self.manifold, self.n, seed=42)
        self.truth = batch.samples
        self.latents = batch.latents[:, 0]
        self.prior = draw_normal(NoiseSource(42, 1).spawn(self.n), 2)

    def errors(self, output):
        return numpy.linalg.norm(output - self.truth, axis=1)


class TestRepaintPlusTwoState(ToyCase):
    def test_recovers_samples(self):
        run = inpainting.repaint_plus_two_state(self.truth, self.mask, self.model, 100, self.prior)
        rmse = math.sqrt(numpy.mean(self.errors(run.output) ** 2))
        self.assertLessEqual(rmse, 1e-6)
        self.assertEqual(run.method, inpainting.REPAINT_PLUS_SPECIAL)

    def test_error_recursion(self):
        run = inpainting.repaint_plus_two_state(self.truth, self.mask, self.model, 10, self.prior, record=True)
        self.assertEqual(len(run.trajectory), 10)
        PD = self.manifold.projector() * self.mask.m
        start = self.prior @ self.manifold.projector() - self.truth
        for r in (1, 2, 5, 10):
            expected = start @ numpy.linalg.matrix_power(PD, r).T
            assert_allclose(run.trajectory[r - 1] - self.truth, expected, atol=1e-12)

    def test_contracts_every_round(self):
        lam = models.validate_mask(self.mask, self.manifold)
        run = inpainting.repaint_plus_two_state(self.truth, self.mask, self.model, 30, self.prior, record=True)
        previous = self.errors(self.prior @ self.manifold.projector())
        for iterate in run.trajectory:
            current = self.errors(iterate)
            self.assertTrue(numpy.all(current <= lam * previous + 1e-12))
            previous = current

    def test_pathwise_bound(self):
        lam = models.validate_mask(self.mask, self.manifold)
        run = inpainting.repaint_plus_two_state(self.truth, self.mask, self.model, 50, self.prior, record=True)
        prefactor = C * numpy.linalg.norm(self.prior - self.truth, axis=1) / math.sqrt(0.1)
        for r, iterate in enumerate(run.trajectory, start=1):
            self.assertTrue(numpy.all(self.errors(iterate) <= lam ** r * prefactor + 1e-12))

    def test_geometric_rate(self):
        run = inpainting.repaint_plus_two_state(self.truth, self.mask, self.model, 40, self.prior, record=True)
        errors = [numpy.mean(self.errors(x)) for x in run.trajectory]
        fit = analysis.fit_rate(errors)
        self.assertAlmostEqual(fit.fitted_rate, 9.0 / 13.0, places=6)

    def test_empty_mask_returns_known(self):
        run = inpainting.repaint_plus_two_state(self.truth, models.InpaintMask.from_bits("00"), self.model, 1,
                                                self.prior)
        assert_allclose(run.output, self.truth, atol=1e-12)

    def test_zero_rounds(self):
        run = inpainting.repaint_plus_two_state(self.truth, self.mask, self.model, 0, self.prior)
        assert_allclose(run.output, self.prior @ self.manifold.projector(), atol=1e-12)

    def test_checks(self):
        self.assertRaises(InvalidMask, inpainting.repaint_plus_two_state, self.truth,
                          models.InpaintMask.from_bits("11"), self.model, 5, self.prior)
        self.assertRaises(ShapeMismatch, inpainting.repaint_plus_two_state, self.truth, self.mask, self.model, 5,
                          self.prior[:3])
        self.assertRaises(ShapeMismatch, inpainting.repaint_plus_two_state, self.truth,
                          models.InpaintMask.from_bits("010"), self.model, 5, self.prior)
        self.assertRaises(OutOfRange, inpainting.repaint_plus_two_state, self.truth, self.mask, self.model, -1,
                          self.prior)


class TestBaselines(ToyCase):
    def test_repaint_slope(self):
        run = inpainting.repaint_two_state(self.truth, self.mask, self.model, 100, self.prior)
        assert_allclose(run.output[:, 0], self.truth[:, 0], atol=0.0)
        assert_allclose(run.output[:, 1], REPAINT_SLOPE * self.truth[:, 0], atol=1e-10)
        self.assertAlmostEqual(REPAINT_SLOPE, 0.186860, places=6)

    def test_repaint_matches_fixed_point(self):
        run = inpainting.repaint_two_state(self.truth, self.mask, self.model, 200, self.prior)
        P = self.manifold.projector()
        forcing = (C * (self.truth * (1.0 - self.mask.m))) @ P.T
        fixed = analysis.fixed_point_oracle(C * P * self.mask.m, forcing)
        assert_allclose(run.output, self.mask.paste(fixed, self.truth), atol=1e-10)

    def test_repaint_error_per_sample(self):
        run = inpainting.repaint_two_state(self.truth, self.mask, self.model, 100, self.prior)
        assert_allclose(self.errors(run.output), 0.7284 * numpy.abs(self.latents), rtol=1e-3)

    def test_repaint_then_reverse(self):
        run = inpainting.repaint_then_reverse(self.truth, self.mask, self.model, 100, self.prior)
        residual = analysis.manifold_residual(run.output, self.manifold)
        self.assertLess(residual.max(), 1e-12)
        P = self.manifold.projector()
        forcing = (C * (self.truth * (1.0 - self.mask.m))) @ P.T
        fixed = analysis.fixed_point_oracle(C * P * self.mask.m, forcing)
        expected = C * self.mask.paste(fixed, self.truth) @ P.T
        assert_allclose(run.output, expected, atol=1e-8)
        assert_allclose(self.errors(run.output), 0.8754 * numpy.abs(self.latents), rtol=1e-3)

    def test_aligned_gap(self):
        plus = inpainting.repaint_plus_two_state(self.truth, self.mask, self.model, 100, self.prior)
        base = inpainting.repaint_two_state(self.truth, self.mask, self.model, 100, self.prior)
        plus_rmse = math.sqrt(numpy.mean(self.errors(plus.output) ** 2))
        base_rmse = math.sqrt(numpy.mean(self.errors(base.output) ** 2))
        self.assertLess(plus_rmse * 1e6, base_rmse)

    def test_ordering(self):
        methods = (inpainting.repaint_plus_two_state, inpainting.repaint_two_state, inpainting.repaint_then_reverse)
        for seed in range(1, 21):
            truth = models.draw_from_manifold(self.manifold, self.n, seed=seed).samples
            prior = draw_normal(NoiseSource(seed, 1).spawn(self.n), 2)
            rmse = [math.sqrt(numpy.mean(numpy.sum((method(truth, self.mask, self.model, 100, prior).output
                                                    - truth) ** 2, axis=1)))
                    for method in methods]
            with self.subTest(seed=seed):
                self.assertLess(rmse[0], rmse[1])
                self.assertLess(rmse[0], rmse[2])
                self.assertLess(rmse[1], rmse[2])

    def test_invalid_mask(self):
        full = models.InpaintMask.from_bits("11")
        self.assertRaises(InvalidMask, inpainting.repaint_two_state, self.truth, full, self.model, 5, self.prior)
        self.assertRaises(InvalidMask, inpainting.repaint_then_reverse, self.truth, full, self.model, 5, self.prior)

    def test_small_beta_limit(self):
        model = closed_form_two_state(self.manifold, 1e-12)
        base = inpainting.repaint_two_state(self.truth, self.mask, model, 200, self.prior)
        plus = inpainting.repaint_plus_two_state(self.truth, self.mask, model, 200, self.prior)
        assert_allclose(base.output, plus.output, atol=1e-9)


class TestGeneral(ToyCase):
    n = 50

    def test_single_step_matches_two_state(self):
        schedule = models.constant_schedule(0.9, 1)
        model = closed_form_multi_state(self.manifold, schedule, iid_noise=True)
        alignment = models.AlignmentSchedule.for_inpainting(schedule, multi_state_coefficients(schedule))
        sources = NoiseSource(42, 2).spawn(self.n)
        general = inpainting.repaint_plus_general(self.truth, self.mask, model, schedule, alignment, 20, sources,
                                                  x_init=self.prior)
        special = inpainting.repaint_plus_two_state(self.truth, self.mask, model, 20, self.prior,
                                                    omega=alignment.omegas[1])
        assert_array_equal(general.output, special.output)

    def test_lifted_instance(self):
        manifold = models.make_manifold([[2.0, 0.0], [3.0, 0.0], [0.0, 2.0], [0.0, 3.0]])
        mask = models.InpaintMask.from_bits("1010")
        schedule = models.constant_schedule(0.2, 4)
        model = closed_form_multi_state(manifold, schedule, iid_noise=True)
        alignment = models.AlignmentSchedule.for_inpainting(schedule, multi_state_coefficients(schedule))
        truth = models.draw_from_manifold(manifold, 500, seed=1).samples
        sources = NoiseSource(1, 2).spawn(500)
        run = inpainting.repaint_plus_general(truth, mask, model, schedule, alignment, 20, sources)
        rmse = math.sqrt(numpy.mean(numpy.sum((run.output - truth) ** 2, axis=1)))
        self.assertLessEqual(rmse, 1e-3)

    def test_empty_mask(self):
        schedule = models.constant_schedule(0.3, 3)
        model = closed_form_multi_state(self.manifold, schedule, iid_noise=True)
        alignment = models.AlignmentSchedule.for_inpainting(schedule, multi_state_coefficients(schedule))
        run = inpainting.repaint_plus_general(self.truth, models.InpaintMask.from_bits("00"), model, schedule,
                                              alignment, 1, NoiseSource(0).spawn(self.n))
        assert_allclose(run.output, self.truth, atol=1e-10)

    def test_trajectory(self):
        schedule = models.constant_schedule(0.3, 2)
        model = closed_form_multi_state(self.manifold, schedule, iid_noise=True)
        alignment = models.AlignmentSchedule.for_inpainting(schedule, multi_state_coefficients(schedule))
        run = inpainting.repaint_plus_general(self.truth, self.mask, model, schedule, alignment, 7,
                                              NoiseSource(0).spawn(self.n), record=True)
        self.assertEqual(len(run.trajectory), 7)

    def test_output_on_manifold(self):
        schedule = models.constant_schedule(0.3, 3)
        model = closed_form_multi_state(self.manifold, schedule, iid_noise=True)
        alignment = models.AlignmentSchedule.for_inpainting(schedule, multi_state_coefficients(schedule))
        run = inpainting.repaint_plus_general(self.truth, self.mask, model, schedule, alignment, 3,
                                              NoiseSource(5).spawn(self.n))
        self.assertLessEqual(analysis.manifold_residual(run.output, self.manifold).max(), 1e-10)

    def test_invalid_mask(self):
        schedule = models.constant_schedule(0.3, 2)
        model = closed_form_multi_state(self.manifold, schedule, iid_noise=True)
        alignment = models.AlignmentSchedule.for_inpainting(schedule, multi_state_coefficients(schedule))
        self.assertRaises(InvalidMask, inpainting.repaint_plus_general, self.truth, models.InpaintMask.from_bits("11"),
                          model, schedule, alignment, 1, NoiseSource(0).spawn(self.n))

    def test_schedule_mismatch(self):
        schedule = models.constant_schedule(0.3, 2)
        model = closed_form_multi_state(self.manifold, schedule, iid_noise=True)
        self.assertRaises(ScheduleMismatch, inpainting.repaint_plus_general, self.truth, self.mask, model,
                          schedule, models.AlignmentSchedule.unaligned(3), 1, NoiseSource(0).spawn(self.n))
        alignment = models.AlignmentSchedule.for_inpainting(schedule, multi_state_coefficients(schedule))
        self.assertRaises(ShapeMismatch, inpainting.repaint_plus_general, self.truth, self.mask, model,
                          schedule, alignment, 1, NoiseSource(0).spawn(3))


class TestSlowDiffusion(unittest.TestCase):
    def setUp(self):
        d = 64
        self.manifold = models.make_manifold(numpy.ones((d, 1)))
        self.mask = models.InpaintMask.from_bits("1" + "0" * (d - 1))

    def pieces(self, T):
        schedule = models.constant_schedule(0.2, T)
        coefficients = multi_state_coefficients(schedule)
        model = closed_form_multi_state(self.manifold, schedule, iid_noise=True)
        alignment = models.AlignmentSchedule.for_sampling(schedule, coefficients)
        return schedule, coefficients, model, alignment

    def test_noiseless_expansion(self):
        schedule, coefficients, model, alignment = self.pieces(8)
        truth = models.draw_from_manifold(self.manifold, 5, seed=2).samples
        start = draw_normal(NoiseSource(2, 1).spawn(5), 64)
        run = inpainting.slow_diffusion_inpaint(truth, self.mask, model, schedule, alignment,
                                                NoiseSource(2).spawn(5), x_init=start, noiseless=True)
        scale = alignment.omegas[1] * coefficients.nu_bar
        expected = analysis.slow_diffusion_expansion(self.manifold, self.mask, schedule, scale, start, truth)
        assert_allclose(run.output, expected, atol=1e-10)

    def test_bias_persists(self):
        for T in (2, 8, 32):
            schedule, _, model, alignment = self.pieces(T)
            truth = models.draw_from_manifold(self.manifold, 200, seed=T).samples
            prior = draw_normal(NoiseSource(T, 1).spawn(200), 64)
            slow = inpainting.slow_diffusion_inpaint(truth, self.mask, model, schedule, alignment,
                                                     NoiseSource(T, 2).spawn(200), x_init=prior)
            plus = inpainting.repaint_plus_two_state(truth, self.mask, closed_form_two_state(self.manifold, 0.2),
                                                     T, prior)
            slow_rmse = math.sqrt(numpy.mean(numpy.sum((slow.output - truth) ** 2, axis=1)))
            plus_rmse = math.sqrt(numpy.mean(numpy.sum((plus.output - truth) ** 2, axis=1)))
            self.assertGreater(slow_rmse, 0.05)
            self.assertGreater(slow_rmse, 10.0 * plus_rmse)

    def test_needs_two_steps(self):
        schedule = models.constant_schedule(0.2, 1)
        model = closed_form_multi_state(self.manifold, schedule, iid_noise=True)
        alignment = models.AlignmentSchedule.for_inpainting(schedule, multi_state_coefficients(schedule))
        truth = numpy.zeros((1, 64))
        self.assertRaises(OutOfRange, inpainting.slow_diffusion_inpaint, truth, self.mask, model, schedule,
                          alignment, NoiseSource(0).spawn(1))

    def test_noiseless_needs_start(self):
        schedule, _, model, alignment = self.pieces(2)
        self.assertRaises(ValueError, inpainting.slow_diffusion_inpaint, numpy.zeros((1, 64)), self.mask, model,
                          schedule, alignment, NoiseSource(0).spawn(1), noiseless=True)

    def test_invalid_mask(self):
        schedule, _, model, alignment = self.pieces(2)
        self.assertRaises(InvalidMask, inpainting.slow_diffusion_inpaint, numpy.zeros((1, 64)),
                          models.InpaintMask.from_bits("1" * 64), model, schedule, alignment, NoiseSource(0).spawn(1))


class TestPerturbedBound(unittest.TestCase):
    def test_error_below_bound_every_round(self):
        beta = 0.5
        mask = models.InpaintMask.from_bits("1000")
        tried = 0
        for seed in range(100):
            manifold = models.random_manifold(4, 2, seed=seed)
            if not models.is_valid_lambda(models.validate_mask(mask, manifold)):
                continue
            exact = closed_form_two_state(manifold, beta)
            rng = numpy.random.default_rng(seed)
            try:
                model, lam_hat = perturb_generator(exact, 0.01 * rng.standard_normal((4, 4)), manifold, mask)
            except AssumptionViolated:
                continue
            tried += 1
            truth = manifold.embed(rng.standard_normal((5, 2)))
            start = rng.standard_normal((5, 4))
            run = inpainting.repaint_plus_two_state(truth, mask, model, 50, start, record=True)
            theta_norm = models.spectral_norm(model.theta)
            theta_gap = models.spectral_norm(model.theta - exact.theta)
            distances = numpy.linalg.norm(start - truth, axis=1)
            norms = numpy.linalg.norm(truth, axis=1)
            for r, iterate in enumerate(run.trajectory, start=1):
                errors = numpy.linalg.norm(iterate - truth, axis=1)
                bounds = numpy.array([analysis.noisy_error_bound(r, theta_norm, distance, theta_gap, norm, lam_hat,
                                                                 beta)
                                      for distance, norm in zip(distances, norms)])
                self.assertTrue(numpy.all(errors <= bounds + 1e-10), "seed %d round %d" % (seed, r))
        self.assertGreater(tried, 50)


if __name__ == "__main__":
    unittest.main()
