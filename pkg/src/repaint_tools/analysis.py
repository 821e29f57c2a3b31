'''
Bounds, rates and oracles for resampling inpainting
'''

import logging
import math
import warnings
from dataclasses import dataclass

import numpy
import scipy.linalg
import scipy.stats

from repaint_tools.errors import (
    InvalidRate,
    NonPositiveError,
    NotContractive,
    OffManifold,
    ShapeMismatch,
    TooFewPoints,
)
from repaint_tools.models import spectral_norm
from repaint_tools.util import as_vector

log = logging.getLogger(__name__)

ITERATE_ROUNDS = 10000
AGREEMENT_TOL = 1e-10
OFF_MANIFOLD_TOL = 1e-8
MIN_MOMENT_SAMPLES = 100


@dataclass(frozen=True)
class RateFit:
    fitted_rate: float
    r_squared: float
    rounds_used: int


@dataclass(frozen=True)
class BoundReport:
    '''What the resampling bounds say about one configuration.'''
    lambda_max: float
    lambda_hat_max: float
    r_required: int
    error_ceiling: float
    admissible_delta: float

    def rows(self):
        return [
            ("lambda_max", self.lambda_max),
            ("lambda_hat_max", self.lambda_hat_max),
            ("r_required", self.r_required),
            ("error_ceiling", self.error_ceiling),
            ("admissible_delta", self.admissible_delta),
        ]


@dataclass(frozen=True)
class MomentReport:
    n: int
    mean_norm: float
    cov_error: float
    mean_threshold: float
    cov_threshold: float

    @property
    def mean_ok(self):
        return self.mean_norm <= self.mean_threshold

    @property
    def cov_ok(self):
        return self.cov_error <= self.cov_threshold

    @property
    def passed(self):
        return self.mean_ok and self.cov_ok


def _check_rate(value, name, allow_zero=False):
    low_ok = value >= 0.0 if allow_zero else value > 0.0
    if not (low_ok and value < 1.0):
        raise InvalidRate("%s must lie in %s0, 1), got %r" % (name, "[" if allow_zero else "(", value))


def resampling_budget(epsilon, lambda_max, theta_norm, init_distance, beta):
    '''Smallest R with lambda_max^R * prefactor <= epsilon, at least 1.

    prefactor = theta_norm * init_distance / sqrt(1 - beta)
    '''
    _check_rate(lambda_max, "lambda_max")
    if not epsilon > 0.0:
        raise InvalidRate("epsilon must be positive, got %r" % epsilon)
    argument = theta_norm * init_distance / (epsilon * math.sqrt(1.0 - beta))
    if argument <= 1.0:
        return 1
    rounds = math.log(argument) / math.log(1.0 / lambda_max)
    # shave rounding noise so exact powers do not tip over to the next integer
    return max(1, int(math.ceil(rounds - 1e-12)))


def noisy_error_ceiling(theta_gap, x0_norm, lambda_hat_max, beta):
    '''zeta = ||theta_hat - theta*|| ||x0|| / ((1 - lambda_hat) sqrt(1 - beta)).

    Passing the support radius kappa as x0_norm gives the ceiling that
    holds for every sample of a compactly supported distribution.
    '''
    _check_rate(lambda_hat_max, "lambda_hat_max", allow_zero=True)
    return theta_gap * x0_norm / ((1.0 - lambda_hat_max) * math.sqrt(1.0 - beta))


def noisy_error_bound(r, theta_norm, init_distance, theta_gap, x0_norm, lambda_hat_max, beta):
    '''Right-hand side of the perturbed-model bound after r rounds.'''
    zeta = noisy_error_ceiling(theta_gap, x0_norm, lambda_hat_max, beta)
    transient = theta_norm * init_distance / math.sqrt(1.0 - beta) + zeta
    return lambda_hat_max ** r * transient + zeta


def admissible_perturbation(epsilon, lambda_hat_max, kappa):
    '''Largest ||delta|| (unit constant) keeping the limiting error near epsilon.'''
    _check_rate(lambda_hat_max, "lambda_hat_max", allow_zero=True)
    if not kappa > 0.0:
        raise InvalidRate("kappa must be positive, got %r" % kappa)
    return epsilon * (1.0 - lambda_hat_max) / kappa


def bound_report(epsilon, beta, lambda_max, theta_norm, init_distance,
                 delta_norm=0.0, kappa=1.0, lambda_hat_max=None):
    '''Assemble every bound for one setting.

    Without an explicit lambda_hat_max the triangle inequality
    lambda_max + ||delta|| is used.
    '''
    if lambda_hat_max is None:
        lambda_hat_max = lambda_max + delta_norm
    r_required = resampling_budget(epsilon, lambda_max, theta_norm, init_distance, beta)
    theta_gap = delta_norm * math.sqrt(1.0 - beta)
    zeta = noisy_error_ceiling(theta_gap, kappa, lambda_hat_max, beta)
    admissible = admissible_perturbation(epsilon, lambda_hat_max, kappa)
    log.debug("bound: lambda=%g R=%d zeta=%g delta<=%g", lambda_max, r_required, zeta, admissible)
    return BoundReport(lambda_max, lambda_hat_max, r_required, zeta, admissible)


def contraction_rate(manifold, mask):
    '''Spectral radius of A A^T D(m), the asymptotic per-round error factor.'''
    matrix = manifold.projector() * mask.m
    return float(numpy.max(numpy.abs(scipy.linalg.eigvals(matrix))))


def fixed_point_oracle(contraction_matrix, forcing, mode="solve"):
    '''Solve x = M x + forcing.

    mode is "solve" (dense linear solve), "iterate" (ITERATE_ROUNDS
    substitutions from x = 0) or "check" (both, raising when they disagree
    by more than AGREEMENT_TOL).
    '''
    M = numpy.asarray(contraction_matrix, dtype=numpy.float64)
    forcing = numpy.asarray(forcing, dtype=numpy.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1] or M.shape[0] != forcing.shape[-1]:
        raise ShapeMismatch("need a square M matching forcing, got %s and %s" % (M.shape, forcing.shape))
    norm = spectral_norm(M)
    if norm >= 1.0:
        raise NotContractive("||M|| = %.15g is not below 1" % norm)
    if mode not in ("solve", "iterate", "check"):
        raise ValueError("unknown mode %r" % mode)

    if mode == "iterate":
        return _iterate(M, forcing)
    solved = scipy.linalg.solve(numpy.eye(M.shape[0]) - M, forcing.T).T
    if mode == "check":
        gap = float(numpy.abs(solved - _iterate(M, forcing)).max())
        if gap > AGREEMENT_TOL:
            raise NotContractive("solve and iteration disagree by %g" % gap)
    return solved


def _iterate(M, forcing):
    x = numpy.zeros_like(forcing)
    for _ in range(ITERATE_ROUNDS):
        x = x @ M.T + forcing
    return x


def fit_rate(errors):
    '''Per-round geometric factor fitted to log(error) against the round index.

    Entries below 100 machine epsilons of the first error are dropped.
    '''
    errors = as_vector(errors, "errors")
    if numpy.any(~(errors > 0.0)):
        raise NonPositiveError("every error must be positive")
    floor = 100.0 * numpy.finfo(numpy.float64).eps * errors[0] if errors.size else 0.0
    keep = errors >= floor
    if not keep.all():
        warnings.warn("dropped %d entries below %g before fitting" % (int((~keep).sum()), floor))
    rounds = numpy.arange(errors.size)[keep]
    logs = numpy.log(errors[keep])
    if logs.size < 3:
        raise TooFewPoints("need at least 3 usable errors, got %d" % logs.size)
    if numpy.ptp(logs) == 0.0:
        return RateFit(1.0, 1.0, int(logs.size))
    fit = scipy.stats.linregress(rounds, logs)
    return RateFit(float(math.exp(fit.slope)), float(fit.rvalue ** 2), int(logs.size))


def manifold_residual(x, manifold):
    '''||(I - A A^T) x||; one value per row for a batch.'''
    x = numpy.asarray(x, dtype=numpy.float64)
    if x.shape[-1] != manifold.d:
        raise ShapeMismatch("expected vectors in R^%d, got shape %s" % (manifold.d, x.shape))
    off = x - x @ manifold.projector()
    if x.ndim == 1:
        return float(numpy.linalg.norm(off))
    return numpy.linalg.norm(off, axis=-1)


def latent_moment_test(samples, manifold):
    '''Check that z = A^T x has zero mean and identity covariance.

    Thresholds: ||mean|| <= 4/sqrt(n) and ||cov - I||_F <= 8k/sqrt(n).
    '''
    x = numpy.asarray(getattr(samples, "samples", samples), dtype=numpy.float64)
    n = x.shape[0]
    if n < MIN_MOMENT_SAMPLES:
        raise TooFewPoints("need at least %d samples, got %d" % (MIN_MOMENT_SAMPLES, n))
    worst = float(numpy.max(manifold_residual(x, manifold)))
    if worst > OFF_MANIFOLD_TOL:
        raise OffManifold("a sample lies %g away from span(A)" % worst)
    latents = x @ manifold.a_matrix
    k = manifold.k
    mean_norm = float(numpy.linalg.norm(latents.mean(axis=0)))
    cov = numpy.atleast_2d(numpy.cov(latents, rowvar=False))
    cov_error = float(numpy.linalg.norm(cov - numpy.eye(k)))
    return MomentReport(n, mean_norm, cov_error, 4.0 / math.sqrt(n), 8.0 * k / math.sqrt(n))


def slow_diffusion_expansion(manifold, mask, schedule, drift_scale, x_T, x0, terms=False):
    '''Deterministic part of single-pass inpainting with drift c A A^T per step.

    c^T (P D)^(T-1) P x_T + sum_{s=1}^{T-1} c^s sqrt(abar_s) (P D)^(s-1) P D' x0
    with P = A A^T, D = D(m) and D' = D(1 - m).  With terms=True the list of
    summands is returned, the x_T term first.
    '''
    P = manifold.projector()
    PD = P * mask.m
    T = schedule.T
    x_T = numpy.asarray(x_T, dtype=numpy.float64)
    x0 = numpy.asarray(x0, dtype=numpy.float64)
    head = numpy.linalg.matrix_power(PD, T - 1) @ P
    parts = [drift_scale ** T * (x_T @ head.T)]
    known = (x0 * (1.0 - mask.m)) @ P.T
    for s in range(1, T):
        power = numpy.linalg.matrix_power(PD, s - 1)
        parts.append(drift_scale ** s * math.sqrt(schedule.alpha_bars[s]) * (known @ power.T))
    if terms:
        return parts
    return sum(parts[1:], parts[0])
