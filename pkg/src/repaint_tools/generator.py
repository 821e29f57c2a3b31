"""
Generator models: closed forms, population solves, SGD training, perturbation
"""

import logging
import math
from dataclasses import dataclass

import numpy
import scipy.linalg

from repaint_tools.diffusion import NoiseSource, posterior_coefficients
from repaint_tools.errors import (
    AssumptionViolated,
    DegenerateVariance,
    Diverged,
    OutOfRange,
    ScheduleMismatch,
    ShapeMismatch,
)
from repaint_tools.models import (
    EXACT_MULTI_STATE,
    EXACT_TWO_STATE,
    MODEL_KINDS,
    PERTURBED,
    TRAINED,
    GeneratorModel,
    LinearManifold,
    is_valid_lambda,
    make_schedule,
    spectral_norm,
)
from repaint_tools.util import format_exact

log = logging.getLogger(__name__)

POSTERIOR_MEAN = "posterior_mean"
NOISE_PRED = "noise_pred"
LOSS_KINDS = (POSTERIOR_MEAN, NOISE_PRED)
DIVERGENCE_LIMIT = 1e12


@dataclass(frozen=True)
class MultiStateCoefficients:
    nu: float
    gamma: float
    nu_bar: float


@dataclass(frozen=True)
class TrainingConfig:
    """SGD settings for the linear approximator.

    average_tail is the fraction of the final iterates that are averaged
    into the returned weights; 0 returns the last iterate.
    """
    loss_kind: str = POSTERIOR_MEAN
    step_size: float = 0.05
    iterations: int = 20000
    batch: int = 64
    seed: int = 7
    multi_state: bool = False
    average_tail: float = 0.5

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError("loss_kind must be one of %s, got %r" % (LOSS_KINDS, self.loss_kind))
        if not self.step_size > 0.0:
            raise OutOfRange("step size must be positive, got %r" % self.step_size)
        if self.iterations < 0:
            raise OutOfRange("iterations must be non-negative, got %r" % self.iterations)
        if self.batch < 1:
            raise OutOfRange("batch must be at least 1, got %r" % self.batch)
        if not 0.0 <= self.average_tail <= 1.0:
            raise OutOfRange("average_tail must lie in [0, 1], got %r" % self.average_tail)


def closed_form_two_state(manifold, beta):
    """theta* = sqrt(1 - beta) A A^T."""
    if not 0.0 < beta < 1.0:
        raise OutOfRange("beta must lie in (0, 1), got %r" % beta)
    theta = math.sqrt(1.0 - beta) * manifold.projector()
    return GeneratorModel(theta, EXACT_TWO_STATE, make_schedule([beta]), manifold.k)


def _per_step(schedule):
    abar = schedule.alpha_bars[1:]
    if numpy.any(abar == 1.0):
        raise DegenerateVariance("some abar_t equals 1 for t >= 1")
    return abar, schedule.alpha_bars[:-1], numpy.sqrt(schedule.alphas[1:])


def multi_state_coefficients(schedule):
    """nu, gamma and nu_bar as exact averages over t = 1..T."""
    abar, abar_prev, sqrt_alpha = _per_step(schedule)
    mean_inv = numpy.mean(1.0 / (1.0 - abar))
    mean_ratio = numpy.mean(abar / (1.0 - abar))
    mean_drift = numpy.mean(abar_prev * sqrt_alpha)
    gamma = mean_inv * numpy.mean(sqrt_alpha * (1.0 - abar_prev))
    nu = mean_inv * mean_drift - mean_ratio * numpy.mean(sqrt_alpha)
    nu_bar = mean_inv * mean_drift - mean_ratio * mean_drift
    return MultiStateCoefficients(float(nu), float(gamma), float(nu_bar))


def closed_form_multi_state(manifold, schedule, iid_noise=False):
    """[nu A A^T + gamma I, 0], or [nu_bar A A^T, 0] under IID forward/reverse noise."""
    coefficients = multi_state_coefficients(schedule)
    projector = manifold.projector()
    if iid_noise:
        left = coefficients.nu_bar * projector
    else:
        left = coefficients.nu * projector + coefficients.gamma * numpy.eye(manifold.d)
    theta = numpy.hstack([left, numpy.zeros((manifold.d, 1))])
    return GeneratorModel(theta, EXACT_MULTI_STATE, schedule, manifold.k)


def population_moments(manifold, schedule, multi_state=False):
    """Exact second moments of the training problem over x0, eps and uniform t.

    Returns (E[y u^T], E[u u^T], E[y y^T]) where u = x_t (or [x_t; t]) and
    y is the posterior-mean target.
    """
    abar = schedule.alpha_bars[1:]
    coef = numpy.array([posterior_coefficients(schedule, t) for t in range(1, schedule.T + 1)])
    on_x0 = coef[:, 0] + coef[:, 1] * numpy.sqrt(abar)
    on_eps = coef[:, 1] * numpy.sqrt(1.0 - abar)
    projector = manifold.projector()
    eye = numpy.eye(manifold.d)

    cross = numpy.mean(on_x0 * numpy.sqrt(abar)) * projector + numpy.mean(on_eps * numpy.sqrt(1.0 - abar)) * eye
    gram = numpy.mean(abar) * projector + numpy.mean(1.0 - abar) * eye
    target = numpy.mean(on_x0 ** 2) * projector + numpy.mean(on_eps ** 2) * eye
    if multi_state:
        steps = numpy.arange(1, schedule.T + 1, dtype=numpy.float64)
        cross = numpy.hstack([cross, numpy.zeros((manifold.d, 1))])
        gram = scipy.linalg.block_diag(gram, [[numpy.mean(steps ** 2)]])
    return cross, gram, target


def population_solution(manifold, schedule, multi_state=False):
    """Minimizer of the population posterior-mean objective (normal equations)."""
    cross, gram, _ = population_moments(manifold, schedule, multi_state)
    return scipy.linalg.solve(gram, cross.T, assume_a="pos").T


def population_loss(theta, manifold, schedule):
    """E ||mu_tilde_t - theta u||^2 evaluated in closed form."""
    theta = numpy.asarray(theta, dtype=numpy.float64)
    multi_state = theta.shape[1] == manifold.d + 1
    cross, gram, target = population_moments(manifold, schedule, multi_state)
    return float(numpy.trace(target) - 2.0 * numpy.sum(theta * cross) + numpy.sum((theta @ gram) * theta))


def loss_and_gradient(theta, inputs, targets):
    """Mean squared residual of targets - inputs theta^T, and its gradient in theta."""
    residual = targets - inputs @ theta.T
    n = inputs.shape[0]
    loss = float(numpy.sum(residual * residual) / n)
    gradient = -2.0 * residual.T @ inputs / n
    return loss, gradient


def training_batch(source, schedule, noise, size, loss_kind=POSTERIOR_MEAN, multi_state=False):
    """One training draw: x0 ~ q, eps ~ N(0, I), t ~ Uniform{1..T}.

    source is a LinearManifold (exact q) or a SampleBatch (empirical q).
    Returns (inputs, targets).
    """
    if isinstance(source, LinearManifold):
        x0 = source.embed(noise.normal((size, source.k)))
        d = source.d
    else:
        d = source.d
        x0 = source.samples[noise.integers(0, source.n - 1, size)]
    eps = noise.normal((size, d))
    steps = noise.integers(1, schedule.T, size)
    abar = schedule.alpha_bars[steps][:, numpy.newaxis]
    x_t = numpy.sqrt(abar) * x0 + numpy.sqrt(1.0 - abar) * eps
    if loss_kind == NOISE_PRED:
        targets = eps
    else:
        coef = numpy.array([posterior_coefficients(schedule, t) for t in range(1, schedule.T + 1)])
        on_x0 = coef[steps - 1, 0][:, numpy.newaxis]
        on_xt = coef[steps - 1, 1][:, numpy.newaxis]
        targets = on_x0 * x0 + on_xt * x_t
    inputs = x_t
    if multi_state:
        inputs = numpy.hstack([x_t, steps[:, numpy.newaxis].astype(numpy.float64)])
    return inputs, targets


def noise_model_to_drift(weights, schedule):
    """Drift induced by eps_theta(x) = W x at t = 1.

    mu(x) = (x - beta_1 / sqrt(1 - abar_1) W x) / sqrt(alpha_1)
    """
    weights = numpy.asarray(weights, dtype=numpy.float64)
    d = weights.shape[0]
    scale = schedule.betas[1] / math.sqrt(1.0 - schedule.alpha_bars[1])
    return (numpy.eye(d) - scale * weights[:, :d]) / math.sqrt(schedule.alphas[1])


def train_ddpm(source, schedule, config, init=None, callback=None):
    """Stochastic gradient descent on the denoising loss for a linear mu_theta.

    source: LinearManifold or SampleBatch.  init defaults to zeros.
    callback(iteration, loss) is called after every step.
    """
    if config.loss_kind == NOISE_PRED and (config.multi_state or schedule.T != 1):
        raise ScheduleMismatch("noise prediction induces a step-dependent drift; only T = 1 is supported")
    d = source.d
    width = d + 1 if config.multi_state else d
    if init is None:
        theta = numpy.zeros((d, width))
    else:
        theta = numpy.array(init, dtype=numpy.float64)
        if theta.shape != (d, width):
            raise ShapeMismatch("init must have shape %s, got %s" % ((d, width), theta.shape))
    noise = NoiseSource(config.seed)
    first_averaged = config.iterations - int(math.ceil(config.average_tail * config.iterations))
    average = numpy.zeros_like(theta)
    averaged = 0
    log.debug("training %s model, %d iterations, step %g", config.loss_kind, config.iterations, config.step_size)
    for iteration in range(config.iterations):
        inputs, targets = training_batch(source, schedule, noise, config.batch, config.loss_kind, config.multi_state)
        loss, gradient = loss_and_gradient(theta, inputs, targets)
        if not math.isfinite(loss) or loss > DIVERGENCE_LIMIT:
            raise Diverged("loss %g at iteration %d; lower the step size" % (loss, iteration))
        theta = theta - config.step_size * gradient
        if iteration >= first_averaged:
            averaged += 1
            average += (theta - average) / averaged
        if callback is not None:
            callback(iteration, loss)
        if iteration % 5000 == 0:
            log.debug("iteration %d loss %.6g", iteration, loss)
    if averaged:
        theta = average
    if config.loss_kind == NOISE_PRED:
        theta = noise_model_to_drift(theta, schedule)
    k = source.k if isinstance(source, LinearManifold) else None
    return GeneratorModel(theta, TRAINED, schedule, k)


def perturb_generator(exact, delta, manifold, mask):
    """theta_hat = theta* + delta sqrt(1 - beta); returns (model, lambda_hat_max)."""
    if exact.kind != EXACT_TWO_STATE:
        raise ShapeMismatch("only exact two-state models can be perturbed, got %s" % exact.kind)
    delta = numpy.asarray(delta, dtype=numpy.float64)
    if delta.shape != (exact.d, exact.d):
        raise ShapeMismatch("delta must be %d x %d, got %s" % (exact.d, exact.d, delta.shape))
    lambda_hat = spectral_norm((manifold.projector() + delta) * mask.m)
    if not is_valid_lambda(lambda_hat):
        raise AssumptionViolated("||(A A^T + delta) D(m)|| = %.15g is not below 1" % lambda_hat)
    theta = exact.theta + delta * math.sqrt(1.0 - exact.beta)
    return GeneratorModel(theta, PERTURBED, exact.schedule, exact.k), lambda_hat


def save_model(model, path):
    """Header 'kind d k T', then the betas, then theta row by row."""
    k = "-" if model.k is None else str(model.k)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("%s %d %s %d\n" % (model.kind, model.d, k, model.schedule.T))
        f.write(" ".join(format_exact(b) for b in model.schedule.betas[1:]) + "\n")
        for row in model.theta:
            f.write(" ".join(format_exact(v) for v in row) + "\n")


def load_model(path):
    with open(path, "r", encoding="utf-8") as f:
        lines = [line.split() for line in f if line.strip()]
    if len(lines) < 2:
        raise ValueError("%s: truncated model file" % path)
    try:
        kind, d, k, T = lines[0]
        d, T = int(d), int(T)
        k = None if k == "-" else int(k)
    except ValueError:
        raise ValueError("%s: bad header %r" % (path, " ".join(lines[0])))
    if kind not in MODEL_KINDS:
        raise ValueError("%s: unknown model kind %r" % (path, kind))
    betas = [float(b) for b in lines[1]]
    if len(betas) != T:
        raise ValueError("%s: header says T = %d but %d betas follow" % (path, T, len(betas)))
    theta = numpy.array([[float(v) for v in row] for row in lines[2:]])
    if theta.shape[0] != d:
        raise ValueError("%s: header says d = %d but theta has %d rows" % (path, d, theta.shape[0]))
    return GeneratorModel(theta, kind, make_schedule(betas), k)
