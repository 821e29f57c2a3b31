'''
Domain models: the linear manifold, masks, schedules and generators
'''
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy
import scipy.linalg

from repaint_tools.errors import (
    AssumptionViolated,
    DimensionMismatch,
    InvalidMask,
    OutOfRange,
    RankDeficient,
    ShapeMismatch,
)

ORTHONORMAL_TOL = 1e-12
RANK_TOL = 1e-10
MASK_MARGIN = 1e-12
SVD_MAX_DIM = 64
POWER_TOL = 1e-12
POWER_MAX_ITER = 10000

EXACT_TWO_STATE = "exact_two_state"
EXACT_MULTI_STATE = "exact_multi_state"
TRAINED = "trained"
PERTURBED = "perturbed"
MODEL_KINDS = (EXACT_TWO_STATE, EXACT_MULTI_STATE, TRAINED, PERTURBED)


def _frozen(arr):
    arr = numpy.array(arr, dtype=numpy.float64)
    arr.setflags(write=False)
    return arr


def spectral_norm(matrix):
    '''Largest singular value; full SVD for small matrices, power iteration above.'''
    matrix = numpy.asarray(matrix, dtype=numpy.float64)
    if matrix.size == 0:
        return 0.0
    if max(matrix.shape) <= SVD_MAX_DIM:
        return float(scipy.linalg.svdvals(matrix)[0])
    gram = matrix.T @ matrix
    rng = numpy.random.default_rng(0)
    v = rng.standard_normal(gram.shape[0])
    v /= numpy.linalg.norm(v)
    sigma2 = 0.0
    for _ in range(POWER_MAX_ITER):
        w = gram @ v
        norm = numpy.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
        if abs(norm - sigma2) <= POWER_TOL * max(norm, 1.0):
            sigma2 = norm
            break
        sigma2 = norm
    return math.sqrt(sigma2)


@dataclass(frozen=True)
class LinearManifold:
    '''Data lives on span(A): x0 = A z0 with z0 ~ N(0, I_k).'''
    a_matrix: numpy.ndarray

    def __post_init__(self):
        a = _frozen(self.a_matrix)
        if a.ndim != 2 or a.shape[1] > a.shape[0] or a.shape[1] < 1:
            raise DimensionMismatch("A must be d x k with 1 <= k <= d, got %s" % (a.shape,))
        gap = numpy.abs(a.T @ a - numpy.eye(a.shape[1])).max()
        if gap > ORTHONORMAL_TOL:
            raise AssumptionViolated("columns of A are not orthonormal (max |A^T A - I| = %g)" % gap)
        object.__setattr__(self, "a_matrix", a)

    @property
    def d(self):
        return self.a_matrix.shape[0]

    @property
    def k(self):
        return self.a_matrix.shape[1]

    def projector(self):
        '''A A^T, the orthogonal projector onto the manifold.'''
        return self.a_matrix @ self.a_matrix.T

    def embed(self, latents):
        '''Map latent rows z (n x k) to samples A z (n x d).'''
        latents = numpy.asarray(latents, dtype=numpy.float64)
        return latents @ self.a_matrix.T

    def __str__(self):
        return "<LinearManifold: d=%d k=%d>" % (self.d, self.k)
    __repr__ = __str__


def make_manifold(raw):
    '''Orthonormalize the columns of raw with Householder QR.'''
    raw = numpy.atleast_2d(numpy.asarray(raw, dtype=numpy.float64))
    if raw.shape[0] == 1 and raw.shape[1] > 1:
        raw = raw.T
    d, k = raw.shape
    if k > d:
        raise RankDeficient("need k <= d, got a %d x %d matrix" % (d, k))
    singular = scipy.linalg.svdvals(raw)
    if singular[0] == 0.0 or singular[-1] < RANK_TOL * singular[0]:
        raise RankDeficient("numerical rank below %d (singular values %s)" % (k, singular))
    q, r = scipy.linalg.qr(raw, mode="economic")
    # fix the sign ambiguity so positive inputs give positive columns
    signs = numpy.sign(numpy.diag(r))
    signs[signs == 0] = 1.0
    return LinearManifold(q * signs)


def toy_manifold():
    '''The d = 2, k = 1 manifold spanned by [2, 3].'''
    return make_manifold([[2.0], [3.0]])


def random_manifold(d, k, seed):
    rng = numpy.random.default_rng(seed)
    return make_manifold(rng.standard_normal((d, k)))


@dataclass(frozen=True)
class InpaintMask:
    '''Binary vector m, 1 marks a missing coordinate.'''
    m: numpy.ndarray

    def __post_init__(self):
        m = numpy.asarray(self.m)
        if m.ndim != 1:
            raise InvalidMask("mask must be a vector, got shape %s" % (m.shape,))
        if not numpy.all((m == 0) | (m == 1)):
            raise InvalidMask("mask entries must be 0 or 1, got %s" % m)
        object.__setattr__(self, "m", _frozen(m))

    @classmethod
    def from_bits(cls, bits):
        '''Build from a string such as "01" or an iterable of 0/1.'''
        if isinstance(bits, str):
            bits = bits.strip().replace(",", "").replace(" ", "")
            if not bits or set(bits) - set("01"):
                raise InvalidMask("mask string must contain only 0 and 1, got %r" % bits)
            bits = [int(b) for b in bits]
        return cls(numpy.asarray(bits, dtype=numpy.float64))

    @classmethod
    def random(cls, d, density, seed):
        rng = numpy.random.default_rng(seed)
        return cls((rng.random(d) < density).astype(numpy.float64))

    @property
    def d(self):
        return self.m.shape[0]

    def operator(self):
        '''D(m).'''
        return numpy.diag(self.m)

    def complement(self):
        '''D(1 - m).'''
        return numpy.diag(1.0 - self.m)

    def paste(self, generated, known):
        '''m * generated + (1 - m) * known, row-wise for batches.'''
        return self.m * generated + (1.0 - self.m) * known

    def bits(self):
        return "".join(str(int(b)) for b in self.m)

    def __str__(self):
        return "<InpaintMask: %s>" % self.bits()
    __repr__ = __str__


def is_valid_lambda(lambda_max):
    return lambda_max < 1.0 - MASK_MARGIN


def validate_mask(mask, manifold):
    '''Return lambda_max = ||A A^T D(m)||; the mask is valid iff it is below 1.'''
    if mask.d != manifold.d:
        raise DimensionMismatch("mask has length %d but the manifold lives in R^%d" % (mask.d, manifold.d))
    lam = spectral_norm(manifold.projector() * mask.m)
    if is_valid_lambda(lam) and lam > 1.0 - 1e-6:
        warnings.warn("mask %s is barely valid (lambda_max = %.12f)" % (mask.bits(), lam))
    return lam


def require_valid_mask(mask, manifold):
    lam = validate_mask(mask, manifold)
    if not is_valid_lambda(lam):
        raise InvalidMask("mask %s violates ||A A^T D(m)|| < 1 (lambda_max = %.15g)" % (mask.bits(), lam))
    return lam


@dataclass(frozen=True)
class DiffusionSchedule:
    '''Variance schedule; index 0 holds beta_0 = 0 so alpha_bar_0 = 1.'''
    betas: numpy.ndarray
    alphas: numpy.ndarray = field(init=False)
    alpha_bars: numpy.ndarray = field(init=False)

    def __post_init__(self):
        betas = _frozen(self.betas)
        if betas.ndim != 1 or betas.shape[0] < 2 or betas[0] != 0.0:
            raise OutOfRange("schedule must start with beta_0 = 0 and have T >= 1")
        alphas = 1.0 - betas
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", _frozen(alphas))
        object.__setattr__(self, "alpha_bars", _frozen(numpy.cumprod(alphas)))

    @property
    def T(self):
        return self.betas.shape[0] - 1

    def beta(self, t):
        return float(self.betas[t])

    def __str__(self):
        return "<DiffusionSchedule: T=%d>" % self.T
    __repr__ = __str__


def make_schedule(betas):
    '''betas are beta_1..beta_T, each in the open interval (0, 1).'''
    betas = numpy.atleast_1d(numpy.asarray(betas, dtype=numpy.float64))
    if betas.ndim != 1 or betas.shape[0] < 1:
        raise OutOfRange("need at least one beta")
    bad = (betas <= 0.0) | (betas >= 1.0) | ~numpy.isfinite(betas)
    if bad.any():
        raise OutOfRange("every beta_t must lie in (0, 1), got %s" % betas[bad])
    return DiffusionSchedule(numpy.concatenate([[0.0], betas]))


def constant_schedule(beta, T):
    return make_schedule(numpy.full(T, float(beta)))


def linear_schedule(beta_start, beta_end, T):
    return make_schedule(numpy.linspace(beta_start, beta_end, T))


@dataclass(frozen=True)
class AlignmentSchedule:
    '''Drift (omega_t) and dispersion (xi_t) factors, indexed by t = 0..T.'''
    omegas: numpy.ndarray
    xis: numpy.ndarray

    def __post_init__(self):
        omegas = _frozen(self.omegas)
        xis = _frozen(self.xis)
        if omegas.shape != xis.shape or omegas.ndim != 1:
            raise ShapeMismatch("omegas and xis must be vectors of equal length")
        object.__setattr__(self, "omegas", omegas)
        object.__setattr__(self, "xis", xis)

    @property
    def T(self):
        return self.omegas.shape[0] - 1

    @classmethod
    def unaligned(cls, T):
        '''omega = xi = 1, the plain RePaint reverse step.'''
        return cls(numpy.ones(T + 1), numpy.ones(T + 1))

    @classmethod
    def two_state(cls, beta):
        return cls([1.0, 1.0 / math.sqrt(1.0 - beta)], [1.0, 0.0])

    @classmethod
    def for_sampling(cls, schedule, coefficients):
        '''Constant omega = 1/(nu_bar 2^(1/(2T))) and the matching xi_t.'''
        T = schedule.T
        if T < 2:
            raise OutOfRange("the sampling alignment needs T >= 2, got T = %d" % T)
        omega = 1.0 / (coefficients.nu_bar * 2.0 ** (1.0 / (2 * T)))
        xis = numpy.zeros(T + 1)
        for t in range(2, T + 1):
            xis[t] = math.sqrt(2.0 ** ((t - 1) / T) / (2.0 * schedule.betas[t] * (T - 1)))
        return cls(numpy.full(T + 1, omega), xis)

    @classmethod
    def for_inpainting(cls, schedule, coefficients):
        '''omega_t = 1/nu_bar turns the exact drift into the projector A A^T.'''
        T = schedule.T
        xis = numpy.ones(T + 1)
        xis[:2] = 0.0
        return cls(numpy.full(T + 1, 1.0 / coefficients.nu_bar), xis)


@dataclass(frozen=True)
class GeneratorModel:
    '''Linear reverse-drift weights; d x d, or d x (d + 1) with a time column.'''
    theta: numpy.ndarray
    kind: str
    schedule: DiffusionSchedule
    k: Optional[int] = None

    def __post_init__(self):
        theta = _frozen(self.theta)
        if self.kind not in MODEL_KINDS:
            raise ValueError("unknown generator kind %r" % self.kind)
        if theta.ndim != 2 or theta.shape[1] not in (theta.shape[0], theta.shape[0] + 1):
            raise ShapeMismatch("theta must be d x d or d x (d+1), got %s" % (theta.shape,))
        if self.kind == EXACT_TWO_STATE and theta.shape[1] != theta.shape[0]:
            raise ShapeMismatch("a two-state model is d x d")
        if self.kind == EXACT_MULTI_STATE:
            if theta.shape[1] != theta.shape[0] + 1:
                raise ShapeMismatch("a multi-state model is d x (d+1)")
            if numpy.any(theta[:, -1] != 0.0):
                raise AssumptionViolated("exact multi-state model must have a zero time column")
        object.__setattr__(self, "theta", theta)

    @property
    def d(self):
        return self.theta.shape[0]

    @property
    def is_multi_state(self):
        return self.theta.shape[1] == self.theta.shape[0] + 1

    @property
    def spatial(self):
        '''The d x d block acting on x.'''
        return self.theta[:, :self.d]

    @property
    def time_column(self):
        if not self.is_multi_state:
            return numpy.zeros(self.d)
        return self.theta[:, self.d]

    @property
    def beta(self):
        return self.schedule.beta(1)

    def drift(self, x, t=1):
        '''theta [x; t] for each row of x.'''
        out = x @ self.spatial.T
        if self.is_multi_state:
            out = out + t * self.time_column
        return out

    def __str__(self):
        return "<GeneratorModel: %s d=%d T=%d>" % (self.kind, self.d, self.schedule.T)
    __repr__ = __str__


@dataclass(frozen=True)
class SampleBatch:
    '''n samples in R^d, with their latents when they came from a manifold.'''
    samples: numpy.ndarray
    latents: Optional[numpy.ndarray] = None
    seed: Optional[int] = None

    def __post_init__(self):
        samples = _frozen(self.samples)
        if samples.ndim != 2:
            raise ShapeMismatch("samples must be an n x d array, got %s" % (samples.shape,))
        object.__setattr__(self, "samples", samples)
        if self.latents is not None:
            latents = _frozen(self.latents)
            if latents.ndim != 2 or latents.shape[0] != samples.shape[0]:
                raise ShapeMismatch("need one latent row per sample")
            object.__setattr__(self, "latents", latents)

    @property
    def n(self):
        return self.samples.shape[0]

    @property
    def d(self):
        return self.samples.shape[1]

    def consistent_with(self, manifold, tol=1e-12):
        '''True when every sample equals A z for its stored latent.'''
        if self.latents is None:
            return False
        if self.n == 0:
            return True
        return bool(numpy.abs(manifold.embed(self.latents) - self.samples).max() <= tol)


def draw_from_manifold(manifold, n, seed):
    '''n samples x0 = A z0 with z0 ~ N(0, I_k).'''
    rng = numpy.random.Generator(numpy.random.Philox(numpy.random.SeedSequence(seed)))
    latents = rng.standard_normal((n, manifold.k))
    return SampleBatch(manifold.embed(latents), latents, seed)
