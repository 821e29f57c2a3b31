"""
Forward and reverse Gaussian transition kernels

Every kernel takes its noise explicitly, so a transition is a pure function
of its inputs.  NoiseSource is the only place randomness comes from.
"""

import math

import numpy

from repaint_tools.errors import (
    DegenerateVariance,
    IndexOutOfRange,
    OutOfRange,
    ScheduleMismatch,
    ShapeMismatch,
)


class NoiseSource:
    """Counter-based Gaussian stream keyed by (seed, stream path).

    Two sources built from the same seed and stream path produce the same
    draws in the same order, whatever else the process is doing.
    """

    def __init__(self, seed, stream_id=0, _path=None):
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        self._path = tuple(_path) if _path is not None else (self.stream_id,)
        sequence = numpy.random.SeedSequence(self.seed, spawn_key=self._path)
        self._generator = numpy.random.Generator(numpy.random.Philox(sequence))

    def child(self, index):
        """An independent sub-stream, e.g. one per sample."""
        return NoiseSource(self.seed, self.stream_id, self._path + (int(index),))

    def spawn(self, n, start=0):
        return [self.child(i) for i in range(start, start + n)]

    def normal(self, size):
        return self._generator.standard_normal(size)

    def integers(self, low, high, size):
        """Uniform integers in low..high inclusive."""
        return self._generator.integers(low, high, size=size, endpoint=True)

    def __str__(self):
        return "<NoiseSource: seed=%d path=%s>" % (self.seed, self._path)
    __repr__ = __str__


def draw_normal(sources, d):
    """Stack one d-dimensional draw from each source into an (n, d) array."""
    if not sources:
        return numpy.zeros((0, d))
    return numpy.stack([s.normal(d) for s in sources])


def _check_beta(beta_t):
    if not 0.0 < beta_t < 1.0:
        raise OutOfRange("beta_t must lie in (0, 1), got %r" % beta_t)


def _check_t(t, schedule, lowest=0):
    if not lowest <= t <= schedule.T:
        raise IndexOutOfRange("step %r outside %d..%d" % (t, lowest, schedule.T))


def forward_step(x_prev, beta_t, eps):
    """One forward kernel step: sqrt(1 - beta) x + sqrt(beta) eps."""
    _check_beta(beta_t)
    x_prev = numpy.asarray(x_prev, dtype=numpy.float64)
    eps = numpy.asarray(eps, dtype=numpy.float64)
    if x_prev.shape != eps.shape:
        raise ShapeMismatch("x has shape %s but eps has %s" % (x_prev.shape, eps.shape))
    return math.sqrt(1.0 - beta_t) * x_prev + math.sqrt(beta_t) * eps


def forward_marginal(x0, t, schedule, eps):
    """Jump straight to step t: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    _check_t(t, schedule)
    x0 = numpy.asarray(x0, dtype=numpy.float64)
    eps = numpy.asarray(eps, dtype=numpy.float64)
    if x0.shape != eps.shape:
        raise ShapeMismatch("x0 has shape %s but eps has %s" % (x0.shape, eps.shape))
    abar = schedule.alpha_bars[t]
    return math.sqrt(abar) * x0 + math.sqrt(1.0 - abar) * eps


def posterior_coefficients(schedule, t):
    """Weights (on x0, on x_t) of the posterior mean of q(x_{t-1} | x_t, x0)."""
    _check_t(t, schedule)
    abar_t = schedule.alpha_bars[t]
    if abar_t == 1.0:
        raise DegenerateVariance("1 - abar_%d is zero" % t)
    abar_prev = schedule.alpha_bars[t - 1]
    on_x0 = math.sqrt(abar_prev) * schedule.betas[t] / (1.0 - abar_t)
    on_xt = math.sqrt(schedule.alphas[t]) * (1.0 - abar_prev) / (1.0 - abar_t)
    return on_x0, on_xt


def posterior_mean(x_t, x0, t, schedule):
    on_x0, on_xt = posterior_coefficients(schedule, t)
    x_t = numpy.asarray(x_t, dtype=numpy.float64)
    x0 = numpy.asarray(x0, dtype=numpy.float64)
    if x_t.shape != x0.shape:
        raise ShapeMismatch("x_t has shape %s but x0 has %s" % (x_t.shape, x0.shape))
    return on_x0 * x0 + on_xt * x_t


def reverse_step(model, x_t, t, alignment, eps):
    """omega_t theta [x_t; t] + xi_t sqrt(beta_t) eps.

    With omega = xi = 1 this is the unaligned reverse kernel.  Works on a
    single vector or on an (n, d) batch.
    """
    x_t = numpy.asarray(x_t, dtype=numpy.float64)
    eps = numpy.asarray(eps, dtype=numpy.float64)
    if x_t.shape[-1] != model.d:
        raise ShapeMismatch("%s expects vectors in R^%d, got shape %s" % (model, model.d, x_t.shape))
    if eps.shape != x_t.shape:
        raise ShapeMismatch("x_t has shape %s but eps has %s" % (x_t.shape, eps.shape))
    if t < 1 or t > model.schedule.T:
        raise IndexOutOfRange("reverse step %r outside 1..%d" % (t, model.schedule.T))
    if t > alignment.T:
        raise ScheduleMismatch("alignment covers %d steps, asked for step %d" % (alignment.T, t))
    drift = alignment.omegas[t] * model.drift(x_t, t)
    return drift + alignment.xis[t] * math.sqrt(model.schedule.betas[t]) * eps


def sample_chain(model, alignment, sources, x_init=None):
    """Run the aligned reverse chain from x_T down to x_0.

    x_T is drawn from N(0, I) per sample unless x_init is given.  The
    dispersion at t = 1 is switched off so x_0 is the drift of x_1.
    """
    T = model.schedule.T
    if alignment.T != T:
        raise ScheduleMismatch("alignment covers %d steps, model has T = %d" % (alignment.T, T))
    d = model.d
    if x_init is None:
        x = draw_normal([s.child(0) for s in sources], d)
    else:
        x = numpy.asarray(x_init, dtype=numpy.float64)
    noise = [s.child(1) for s in sources]
    for t in range(T, 0, -1):
        eps = draw_normal(noise, d) if t > 1 else numpy.zeros_like(x)
        x = reverse_step(model, x, t, alignment, eps)
    return x
