'''
Inpainting procedures on top of a linear generator

All procedures work on an (n, d) batch; a single vector is treated as n = 1.
Randomness comes only from per-sample NoiseSource objects, so a batch split
across workers reproduces the serial result.
'''

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy

from repaint_tools.diffusion import draw_normal, reverse_step
from repaint_tools.errors import InvalidMask, OutOfRange, ScheduleMismatch, ShapeMismatch
from repaint_tools.models import is_valid_lambda, spectral_norm
from repaint_tools.util import as_batch

log = logging.getLogger(__name__)

REPAINT = "repaint"
REPAINT_PLUS_SPECIAL = "repaint_plus_special"
REPAINT_PLUS_GENERAL = "repaint_plus_general"
SLOW_DIFFUSION = "slow_diffusion"
REPAINT_THEN_REVERSE = "repaint_then_reverse"
METHODS = (REPAINT, REPAINT_PLUS_SPECIAL, REPAINT_PLUS_GENERAL, SLOW_DIFFUSION, REPAINT_THEN_REVERSE)

# child stream indices of a per-sample NoiseSource
KNOWN_STREAM = 0
REVERSE_STREAM = 1
PUSH_STREAM = 2
INIT_STREAM = 3


@dataclass
class InpaintRun:
    '''Result of one inpainting call.

    trajectory holds one (n, d) iterate per resampling round when recording
    was requested, otherwise it is None.
    '''
    method: str
    R: int
    output: numpy.ndarray
    trajectory: Optional[list] = None

    def __str__(self):
        return "<InpaintRun: %s R=%d n=%d>" % (self.method, self.R, self.output.shape[0])
    __repr__ = __str__


def _check_inputs(x0_known, mask, model, other=None, other_name="x1_init"):
    if mask.d != model.d:
        raise ShapeMismatch("mask has length %d but the model works in R^%d" % (mask.d, model.d))
    known = as_batch(x0_known, model.d, "x0_known")
    if other is None:
        return known, None
    start = as_batch(other, model.d, other_name)
    if start.shape != known.shape:
        raise ShapeMismatch("x0_known has shape %s but %s has %s" % (known.shape, other_name, start.shape))
    return known, start


def _check_contraction(mask, matrix):
    '''The aligned drift restricted to the masked coordinates must contract.

    matrix is the drift normalized to the projector, whatever scale the
    loop itself runs at.
    '''
    lam = spectral_norm(matrix * mask.m)
    if not is_valid_lambda(lam):
        raise InvalidMask("mask %s gives ||P D(m)|| = %.15g, need < 1" % (mask.bits(), lam))
    return lam


def _normalized(spatial):
    '''spatial scaled to unit spectral norm; nu_bar A A^T becomes A A^T.'''
    norm = spectral_norm(spatial)
    return spatial / norm if norm > 0.0 else spatial


def _check_rounds(R):
    if R < 0:
        raise OutOfRange("resampling rounds must be non-negative, got %r" % R)


def _two_state_loop(x0_known, mask, model, R, x1_init, omega, record):
    known, x = _check_inputs(x0_known, mask, model, x1_init)
    _check_rounds(R)
    _check_contraction(mask, model.spatial / math.sqrt(1.0 - model.beta))
    trajectory: Optional[list] = [] if record else None
    x = omega * model.drift(x, 1)
    for _ in range(R):
        x = omega * model.drift(mask.paste(x, known), 1)
        if trajectory is not None:
            trajectory.append(x.copy())
    return x, known, trajectory


def repaint_plus_two_state(x0_known, mask, model, R, x1_init, record=False, omega=None):
    '''Aligned two-state resampling: x <- theta paste(x) / sqrt(1 - beta).

    The returned output is the aligned drift of the last pasted iterate, so
    it lies in the range of theta.  omega overrides 1/sqrt(1 - beta).
    '''
    if omega is None:
        omega = 1.0 / math.sqrt(1.0 - model.beta)
    x, _, trajectory = _two_state_loop(x0_known, mask, model, R, x1_init, omega, record)
    return InpaintRun(REPAINT_PLUS_SPECIAL, R, x, trajectory)


def repaint_two_state(x0_known, mask, model, R, x1_init, record=False):
    '''Unaligned baseline; ends with a paste of the known coordinates.'''
    x, known, trajectory = _two_state_loop(x0_known, mask, model, R, x1_init, 1.0, record)
    return InpaintRun(REPAINT, R, mask.paste(x, known), trajectory)


def repaint_then_reverse(x0_known, mask, model, R, x1_init, record=False):
    '''The baseline followed by one more unaligned reverse drift.'''
    x, known, trajectory = _two_state_loop(x0_known, mask, model, R, x1_init, 1.0, record)
    return InpaintRun(REPAINT_THEN_REVERSE, R, model.drift(mask.paste(x, known), 1), trajectory)


def _known_part(known, schedule, t, eps):
    abar = schedule.alpha_bars[t]
    return math.sqrt(abar) * known + math.sqrt(1.0 - abar) * eps


def _starting_state(sources, d, x_init, known_shape):
    if x_init is not None:
        x = numpy.asarray(x_init, dtype=numpy.float64)
        if x.ndim == 1:
            x = x[numpy.newaxis, :]
        if x.shape != known_shape:
            raise ShapeMismatch("x_init has shape %s, expected %s" % (x.shape, known_shape))
        return x
    return draw_normal([s.child(INIT_STREAM) for s in sources], d)


def _check_schedule(model, schedule, alignment):
    if model.schedule.T != schedule.T:
        raise ScheduleMismatch("model was built for T = %d, schedule has T = %d" % (model.schedule.T, schedule.T))
    if alignment.T != schedule.T:
        raise ScheduleMismatch("alignment covers %d steps, schedule has T = %d" % (alignment.T, schedule.T))


def repaint_plus_general(x0_known, mask, model, schedule, alignment, R, sources, x_init=None, record=False):
    '''Resampling inpainting over a T-step chain.

    For t = T..1 and r = 1..R: synthesize the known part at noise level t-1,
    take an aligned reverse step, paste, and push forward again unless this
    is the last round or t = 1.  Finishes with the aligned drift at t = 1.
    sources holds one NoiseSource per sample.
    '''
    known, _ = _check_inputs(x0_known, mask, model)
    _check_schedule(model, schedule, alignment)
    _check_rounds(R)
    if len(sources) != known.shape[0]:
        raise ShapeMismatch("need one noise source per sample, got %d for %d" % (len(sources), known.shape[0]))
    _check_contraction(mask, _normalized(model.spatial))
    d = model.d
    forward = [s.child(KNOWN_STREAM) for s in sources]
    backward = [s.child(REVERSE_STREAM) for s in sources]
    push = [s.child(PUSH_STREAM) for s in sources]
    x = _starting_state(sources, d, x_init, known.shape)
    zeros = numpy.zeros_like(known)
    trajectory: Optional[list] = [] if record else None

    for t in range(schedule.T, 0, -1):
        for r in range(1, R + 1):
            if t > 1:
                eps_known = draw_normal(forward, d)
                eps_reverse = draw_normal(backward, d)
            else:
                eps_known = eps_reverse = zeros
            target = _known_part(known, schedule, t - 1, eps_known)
            x_prev = mask.paste(reverse_step(model, x, t, alignment, eps_reverse), target)
            if r < R and t > 1:
                beta_t = schedule.betas[t]
                x = math.sqrt(1.0 - beta_t) * x_prev + math.sqrt(beta_t) * draw_normal(push, d)
            else:
                x = x_prev
            if trajectory is not None and t == 1:
                trajectory.append(alignment.omegas[1] * model.drift(x, 1))
        log.debug("step %d done", t)
    output = alignment.omegas[1] * model.drift(x, 1)
    return InpaintRun(REPAINT_PLUS_GENERAL, R, output, trajectory)


def slow_diffusion_inpaint(x0_known, mask, model, schedule, alignment, sources, x_init=None, noiseless=False):
    '''One reverse pass without resampling, pasting only at states T-1..1.

    The returned x_0 is not pasted and gets no extra drift.  noiseless
    forces every Gaussian draw to zero, leaving the deterministic part.
    '''
    known, _ = _check_inputs(x0_known, mask, model)
    _check_schedule(model, schedule, alignment)
    if schedule.T < 2:
        raise OutOfRange("slow diffusion needs T >= 2, got T = %d" % schedule.T)
    if len(sources) != known.shape[0]:
        raise ShapeMismatch("need one noise source per sample, got %d for %d" % (len(sources), known.shape[0]))
    _check_contraction(mask, _normalized(model.spatial))
    d = model.d
    forward = [s.child(KNOWN_STREAM) for s in sources]
    backward = [s.child(REVERSE_STREAM) for s in sources]
    zeros = numpy.zeros_like(known)
    if noiseless and x_init is None:
        raise ValueError("the noiseless variant needs an explicit x_init")
    x = _starting_state(sources, d, x_init, known.shape)
    for t in range(schedule.T, 0, -1):
        eps_reverse = zeros if (noiseless or t == 1) else draw_normal(backward, d)
        x = reverse_step(model, x, t, alignment, eps_reverse)
        if t > 1:
            eps_known = zeros if noiseless else draw_normal(forward, d)
            x = mask.paste(x, _known_part(known, schedule, t - 1, eps_known))
    return InpaintRun(SLOW_DIFFUSION, 1, x, None)
