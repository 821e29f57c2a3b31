'''
Experiment runs behind the repaint subcommands: configuration, runs, CSV output
'''

import csv
import logging
import math
import multiprocessing
import os
import signal
import sys
import threading
import time
from dataclasses import asdict, dataclass, field, replace
from typing import List, Optional

import numpy

from repaint_tools import analysis
from repaint_tools.diffusion import NoiseSource, draw_normal, forward_marginal, sample_chain
from repaint_tools.errors import (
    AssumptionViolated,
    ConfigError,
    FlagError,
    InvalidMask,
    InvalidRate,
    RepaintError,
)
from repaint_tools.generator import (
    LOSS_KINDS,
    TrainingConfig,
    closed_form_multi_state,
    closed_form_two_state,
    loss_and_gradient,
    multi_state_coefficients,
    perturb_generator,
    population_solution,
    save_model,
    train_ddpm,
    training_batch,
)
from repaint_tools import inpainting
from repaint_tools.models import (
    AlignmentSchedule,
    InpaintMask,
    constant_schedule,
    draw_from_manifold,
    is_valid_lambda,
    linear_schedule,
    make_manifold,
    make_schedule,
    random_manifold,
    require_valid_mask,
    spectral_norm,
    toy_manifold,
    validate_mask,
)
from repaint_tools.util import format_float, stderr, uniq, verbose_stderr

log = logging.getLogger(__name__)

OUTPUT_ENV = "REPAINT_OUTPUT_DIR"
RESOLVED_NAME = "config.resolved"

# stream ids under the run seed
PRIOR_STREAM = 1
METHOD_STREAM = 2
DIFFUSE_STREAM = 3
GENERATE_STREAM = 4
CHECK_STREAM = 5

SCHEDULES = ("constant", "linear")
MANIFOLDS = ("toy", "random", "identity")

RMSE_FIELDS = ["method", "rmse_per_sample", "summed_error", "rmse_coordinate", "n"]
SAMPLE_FIELDS = ["method", "sample_id", "coord_index", "value", "kind"]
TRAJECTORY_FIELDS = ["method", "round", "mean_error"]
CHECK_FIELDS = ["check", "passed", "measured", "threshold", "detail"]


@dataclass(frozen=True)
class ExperimentConfig:
    '''Every knob of every subcommand.  The defaults are the toy experiment.'''
    d: int = 2
    k: int = 1
    T: int = 1
    R: int = 100
    n: int = 1000
    beta: float = 0.9
    schedule: str = "constant"
    beta_start: float = 1e-4
    beta_end: float = 0.02
    manifold: str = "toy"
    mask: Optional[str] = "01"
    mask_density: Optional[float] = None
    mask_seed: int = 0
    delta: str = "none"
    seed: int = 42
    methods: tuple = (inpainting.REPAINT, inpainting.REPAINT_PLUS_SPECIAL, inpainting.REPAINT_THEN_REVERSE)
    out: Optional[str] = None
    workers: int = 1
    record_trajectory: bool = False
    epsilon: float = 1e-8
    kappa: float = 1.0
    init_distance: float = 3.0
    lambda_max: Optional[float] = None
    iterations: int = 20000
    step_size: float = 0.05
    batch: int = 64
    loss: str = "posterior_mean"
    aligned: bool = True
    moment_samples: int = 100000


def _parse_bool(text):
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected a boolean, got %r" % text)


def _optional(parser):
    def parse(text):
        if text.strip().lower() in ("", "none"):
            return None
        return parser(text)
    return parse


def _parse_methods(text):
    names = uniq([m.strip() for m in text.split(",") if m.strip()])
    if not names:
        raise ValueError("at least one method is required")
    return tuple(names)


def _parse_delta(text):
    text = text.strip().lower()
    if text == "none":
        return text
    kind, _, amount = text.partition(":")
    if kind not in ("identity", "random") or not amount:
        raise ValueError("expected none, identity:<c> or random:<norm>, got %r" % text)
    float(amount)
    return text


PARSERS = {
    "d": int, "k": int, "T": int, "R": int, "n": int,
    "beta": float, "schedule": str.strip, "beta_start": float, "beta_end": float,
    "manifold": str.strip, "mask": _optional(str.strip), "mask_density": _optional(float),
    "mask_seed": int, "delta": _parse_delta, "seed": int, "methods": _parse_methods,
    "out": _optional(str.strip), "workers": int, "record_trajectory": _parse_bool,
    "epsilon": float, "kappa": float, "init_distance": float, "lambda_max": _optional(float),
    "iterations": int, "step_size": float, "batch": int, "loss": str.strip,
    "aligned": _parse_bool, "moment_samples": int,
}


def parse_value(key, text, line=None):
    if key not in PARSERS:
        raise ConfigError("unknown key", field=key, line=line)
    try:
        return PARSERS[key](text)
    except ValueError as e:
        raise ConfigError("bad value %r (%s)" % (text, e), field=key, line=line)


def read_config_file(path):
    '''Parse key = value lines into {key: (value, line)}.'''
    values = {}
    with open(path, "r", encoding="utf-8") as f:
        for number, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, text = line.partition("=")
            key = key.strip()
            if not sep or not key:
                raise ConfigError("expected 'key = value', got %r" % raw.rstrip("\n"), line=number)
            values[key] = (parse_value(key, text, number), number)
    return values


def check_config(config, lines=None):
    '''Raise ConfigError on the first violated invariant.'''
    lines = lines or {}

    def fail(key, message):
        raise ConfigError(message, field=key, line=lines.get(key))

    for key in ("d", "k", "T", "workers", "batch"):
        if getattr(config, key) < 1:
            fail(key, "must be at least 1")
    for key in ("R", "n", "iterations", "moment_samples"):
        if getattr(config, key) < 0:
            fail(key, "must be non-negative")
    if config.k > config.d:
        fail("k", "k = %d exceeds d = %d" % (config.k, config.d))
    if not 0.0 < config.beta < 1.0:
        fail("beta", "must lie in (0, 1)")
    if config.schedule not in SCHEDULES:
        fail("schedule", "must be one of %s" % ", ".join(SCHEDULES))
    if config.schedule == "linear" and not 0.0 < config.beta_start <= config.beta_end < 1.0:
        fail("beta_start", "need 0 < beta_start <= beta_end < 1")
    if config.manifold not in MANIFOLDS:
        fail("manifold", "must be one of %s" % ", ".join(MANIFOLDS))
    if config.manifold == "toy" and (config.d, config.k) != (2, 1):
        fail("manifold", "the toy manifold has d = 2, k = 1")
    if config.mask is None and config.mask_density is None:
        fail("mask", "set either mask or mask_density")
    if config.mask is not None:
        if set(config.mask) - set("01"):
            fail("mask", "mask must be a string of 0 and 1")
        if len(config.mask) != config.d:
            fail("mask", "mask has %d entries but d = %d" % (len(config.mask), config.d))
    elif not 0.0 <= config.mask_density <= 1.0:
        fail("mask_density", "must lie in [0, 1]")
    for method in config.methods:
        if method not in inpainting.METHODS:
            fail("methods", "unknown method %r" % method)
    if config.loss not in LOSS_KINDS:
        fail("loss", "must be one of %s" % ", ".join(LOSS_KINDS))
    for key in ("epsilon", "kappa", "step_size"):
        if not getattr(config, key) > 0.0:
            fail(key, "must be positive")
    if config.init_distance < 0.0:
        fail("init_distance", "must be non-negative")


def resolve_config(path=None, overrides=None, environ=None):
    '''defaults < config file < overrides; REPAINT_OUTPUT_DIR fills in out.

    Override values may be strings (parsed like file values) or typed.
    '''
    environ = os.environ if environ is None else environ
    values = asdict(ExperimentConfig())
    lines = {}
    given = set()
    if path is not None:
        for key, (value, line) in read_config_file(path).items():
            values[key] = value
            lines[key] = line
            given.add(key)
    for key, value in (overrides or {}).items():
        if key not in PARSERS:
            raise ConfigError("unknown key", field=key)
        values[key] = parse_value(key, value) if isinstance(value, str) else value
        lines.pop(key, None)
        given.add(key)
    # a density without explicit bits replaces the default mask
    if "mask_density" in given and "mask" not in given:
        values["mask"] = None
    if isinstance(values["methods"], list):
        values["methods"] = tuple(values["methods"])
    if values["out"] is None:
        values["out"] = environ.get(OUTPUT_ENV, ".")
    config = ExperimentConfig(**values)
    check_config(config, lines)
    return config


def _format_config_value(value):
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return format_float(value)
    if isinstance(value, tuple):
        return ",".join(value)
    return str(value)


def write_resolved_config(config, directory):
    path = os.path.join(directory, RESOLVED_NAME)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for key in sorted(PARSERS):
            f.write("%s = %s\n" % (key, _format_config_value(getattr(config, key))))
    return path


def write_csv(path, fieldnames, rows):
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: format_float(v) if isinstance(v, float) else v for k, v in row.items()})
    return path


# ===================== building blocks =====================

def build_manifold(config):
    if config.manifold == "toy":
        return toy_manifold()
    if config.manifold == "random":
        return random_manifold(config.d, config.k, config.seed)
    return make_manifold(numpy.eye(config.d)[:, :config.k])


def build_mask(config):
    if config.mask is not None:
        return InpaintMask.from_bits(config.mask)
    return InpaintMask.random(config.d, config.mask_density, config.mask_seed)


def build_schedule(config):
    if config.schedule == "linear":
        return linear_schedule(config.beta_start, config.beta_end, config.T)
    return constant_schedule(config.beta, config.T)


def build_delta(config):
    '''The perturbation matrix named by config.delta, or None.'''
    if config.delta == "none":
        return None
    kind, _, amount = config.delta.partition(":")
    amount = float(amount)
    if kind == "identity":
        return amount * numpy.eye(config.d)
    rng = numpy.random.default_rng(config.seed)
    raw = rng.standard_normal((config.d, config.d))
    return amount * raw / spectral_norm(raw)


def delta_norm(config):
    if config.delta == "none":
        return 0.0
    return abs(float(config.delta.partition(":")[2]))


def _valid_mask(mask, manifold):
    try:
        return require_valid_mask(mask, manifold)
    except InvalidMask as e:
        raise ConfigError(str(e), field="mask")


@dataclass
class MethodMetrics:
    method: str
    n: int
    rmse_per_sample: float
    summed_error: float
    rmse_coordinate: float
    mean_trajectory: Optional[list] = None
    fitted_rate: Optional[float] = None

    def row(self):
        return {
            "method": self.method,
            "rmse_per_sample": self.rmse_per_sample,
            "summed_error": self.summed_error,
            "rmse_coordinate": self.rmse_coordinate,
            "n": self.n,
        }


@dataclass
class Check:
    name: str
    passed: bool
    measured: float
    threshold: float
    detail: str = ""

    def row(self):
        return {
            "check": self.name,
            "passed": "pass" if self.passed else "fail",
            "measured": float(self.measured),
            "threshold": float(self.threshold),
            "detail": self.detail,
        }


@dataclass
class ExperimentReport:
    command: str
    config: ExperimentConfig
    metrics: List[MethodMetrics] = field(default_factory=list)
    checks: List[Check] = field(default_factory=list)
    files: List[str] = field(default_factory=list)
    outputs: dict = field(default_factory=dict)
    wall_clock: float = 0.0

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    def metric(self, method):
        for m in self.metrics:
            if m.method == method:
                return m
        raise KeyError(method)


def error_metrics(method, recovered, truth, trajectory=None):
    '''RMSE in the three normalizations plus the per-round mean error.'''
    n, d = truth.shape
    squared = numpy.sum((recovered - truth) ** 2, axis=1)
    total = math.fsum(squared.tolist())
    if n == 0:
        return MethodMetrics(method, 0, 0.0, 0.0, 0.0)
    metrics = MethodMetrics(method, n, math.sqrt(total / n), math.sqrt(total), math.sqrt(total / (n * d)))
    if trajectory is not None:
        metrics.mean_trajectory = [
            math.fsum(numpy.linalg.norm(x - truth, axis=1).tolist()) / n for x in trajectory
        ]
        if metrics.mean_trajectory and all(e > 0.0 for e in metrics.mean_trajectory):
            try:
                metrics.fitted_rate = analysis.fit_rate(metrics.mean_trajectory).fitted_rate
            except RepaintError:
                metrics.fitted_rate = None
    return metrics


# ===================== parallel inpainting =====================

@dataclass
class InpaintTask:
    method: str
    model: object
    mask: InpaintMask
    known: numpy.ndarray
    start: numpy.ndarray
    R: int
    seed: int
    first: int
    record: bool
    schedule: object = None
    alignment: object = None


def run_task(task):
    '''Run one chunk of samples; returns (output, trajectory).'''
    sources = NoiseSource(task.seed, METHOD_STREAM).spawn(task.known.shape[0], task.first)
    if task.method == inpainting.REPAINT:
        run = inpainting.repaint_two_state(task.known, task.mask, task.model, task.R, task.start, task.record)
    elif task.method == inpainting.REPAINT_PLUS_SPECIAL:
        run = inpainting.repaint_plus_two_state(task.known, task.mask, task.model, task.R, task.start, task.record)
    elif task.method == inpainting.REPAINT_THEN_REVERSE:
        run = inpainting.repaint_then_reverse(task.known, task.mask, task.model, task.R, task.start, task.record)
    elif task.method == inpainting.REPAINT_PLUS_GENERAL:
        run = inpainting.repaint_plus_general(
            task.known, task.mask, task.model, task.schedule, task.alignment, task.R, sources,
            x_init=task.start, record=task.record)
    else:
        run = inpainting.slow_diffusion_inpaint(
            task.known, task.mask, task.model, task.schedule, task.alignment, sources, x_init=task.start)
    return run.output, run.trajectory


def _chunks(n, workers):
    bounds = numpy.linspace(0, n, min(workers, max(n, 1)) + 1).astype(int)
    return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def run_parallel(function, tasks, workers):
    '''map function over tasks, in order, with a process pool when workers > 1.'''
    if workers <= 1 or len(tasks) <= 1:
        return [function(t) for t in tasks]
    pool = multiprocessing.Pool(processes=min(workers, len(tasks)))

    # terminate the pool on SIGTERM
    def terminate_handler(signum, frame):
        verbose_stderr("SIGTERM, terminating ...")
        pool.terminate()
        pool.join()
        sys.exit(1)

    # signal handlers can only be installed from the main thread
    main_thread = threading.current_thread() is threading.main_thread()
    previous = signal.signal(signal.SIGTERM, terminate_handler) if main_thread else None
    try:
        results = pool.map(function, tasks)
        pool.close()
    except KeyboardInterrupt:
        verbose_stderr("KeyboardInterrupt, terminating ...")
        pool.terminate()
        raise
    finally:
        pool.join()
        if main_thread:
            signal.signal(signal.SIGTERM, previous)
    return results


def inpaint_batch(method, model, mask, known, start, R, seed, workers=1, record=False,
                  schedule=None, alignment=None):
    '''Split the batch into contiguous chunks and reassemble in sample order.'''
    n, d = known.shape
    tasks = [
        InpaintTask(method, model, mask, known[a:b], start[a:b], R, seed, a, record, schedule, alignment)
        for a, b in _chunks(n, workers)
    ]
    if not tasks:
        return numpy.zeros((0, d)), ([] if record else None)
    results = run_parallel(run_task, tasks, workers)
    output = numpy.concatenate([r[0] for r in results])
    trajectory = None
    if record and results[0][1] is not None:
        trajectory = [numpy.concatenate([r[1][i] for r in results]) for i in range(len(results[0][1]))]
    return output, trajectory


def _inpainting_models(config, manifold, mask):
    '''Two-state model (perturbed when delta is set) and the multi-state pieces.'''
    two_state = closed_form_two_state(manifold, config.beta)
    delta = build_delta(config)
    if delta is not None:
        try:
            two_state, _ = perturb_generator(two_state, delta, manifold, mask)
        except AssumptionViolated as e:
            raise ConfigError(str(e), field="delta")
    multi = {}
    if set(config.methods) & {inpainting.REPAINT_PLUS_GENERAL, inpainting.SLOW_DIFFUSION}:
        schedule = build_schedule(config)
        coefficients = multi_state_coefficients(schedule)
        multi["schedule"] = schedule
        multi["model"] = closed_form_multi_state(manifold, schedule, iid_noise=True)
        multi[inpainting.REPAINT_PLUS_GENERAL] = AlignmentSchedule.for_inpainting(schedule, coefficients)
        if inpainting.SLOW_DIFFUSION in config.methods:
            if schedule.T < 2:
                raise ConfigError("slow_diffusion needs T >= 2", field="T")
            multi[inpainting.SLOW_DIFFUSION] = AlignmentSchedule.for_sampling(schedule, coefficients)
    return two_state, multi


def run_methods(config, manifold, mask, truth, prior):
    '''Every configured method on the same truth and starting points.'''
    two_state, multi = _inpainting_models(config, manifold, mask)
    results = {}
    for method in config.methods:
        verbose_stderr("running %s on %d samples" % (method, truth.shape[0]))
        if method in (inpainting.REPAINT_PLUS_GENERAL, inpainting.SLOW_DIFFUSION):
            output, trajectory = inpaint_batch(
                method, multi["model"], mask, truth, prior, config.R, config.seed, config.workers,
                config.record_trajectory, multi["schedule"], multi[method])
        else:
            output, trajectory = inpaint_batch(
                method, two_state, mask, truth, prior, config.R, config.seed, config.workers,
                config.record_trajectory)
        results[method] = (output, trajectory)
    return results


def _sample_rows(method, batch, kind):
    for i, row in enumerate(batch):
        for j, value in enumerate(row):
            yield {"method": method, "sample_id": i, "coord_index": j, "value": float(value), "kind": kind}


def _prepare_output(config):
    os.makedirs(config.out, exist_ok=True)
    return write_resolved_config(config, config.out)


def _write_inpainting_files(config, report, truth, prior, results):
    out = config.out
    rows = []
    rows.extend(_sample_rows("data", truth, "true"))
    rows.extend(_sample_rows("data", prior, "prior"))
    for method, (output, _) in results.items():
        rows.extend(_sample_rows(method, output, "recovered"))
    report.files.append(write_csv(os.path.join(out, "samples.csv"), SAMPLE_FIELDS, rows))
    report.files.append(write_csv(os.path.join(out, "rmse.csv"), RMSE_FIELDS, [m.row() for m in report.metrics]))
    if config.record_trajectory:
        rows = []
        for m in report.metrics:
            for r, value in enumerate(m.mean_trajectory or [], start=1):
                rows.append({"method": m.method, "round": r, "mean_error": value})
        report.files.append(write_csv(os.path.join(out, "trajectory.csv"), TRAJECTORY_FIELDS, rows))


def run_toy(config, truth=None):
    '''RePaint, RePaint+ and friends on samples from the configured manifold.

    truth overrides the drawn samples (an (n, d) array).
    '''
    started = time.time()
    report = ExperimentReport("toy", config)
    manifold = build_manifold(config)
    mask = build_mask(config)
    _valid_mask(mask, manifold)
    if truth is None:
        truth = draw_from_manifold(manifold, config.n, config.seed).samples
    truth = numpy.asarray(truth, dtype=numpy.float64)
    prior = draw_normal(NoiseSource(config.seed, PRIOR_STREAM).spawn(truth.shape[0]), manifold.d)
    results = run_methods(config, manifold, mask, truth, prior)
    for method, (output, trajectory) in results.items():
        report.metrics.append(error_metrics(method, output, truth, trajectory))
        report.outputs[method] = output
    report.files.append(_prepare_output(config))
    _write_inpainting_files(config, report, truth, prior, results)
    report.wall_clock = time.time() - started
    return report


def run_inpaint(config, known):
    '''One ad hoc instance: known is the full vector x0 (masked entries are ignored).'''
    known = numpy.asarray(known, dtype=numpy.float64)
    if known.ndim != 1 or known.shape[0] != config.d:
        raise FlagError("--known needs %d comma separated values, got %d" % (config.d, known.size))
    report = run_toy(replace(config, n=1), truth=known[numpy.newaxis, :])
    report.command = "inpaint"
    return report


def run_generate(config):
    '''Draw priors, run the aligned reverse chain and write the figure data.'''
    started = time.time()
    report = ExperimentReport("generate", config)
    manifold = build_manifold(config)
    schedule = build_schedule(config)
    if schedule.T == 1:
        model = closed_form_two_state(manifold, schedule.beta(1))
        alignment = AlignmentSchedule.two_state(schedule.beta(1))
    else:
        model = closed_form_multi_state(manifold, schedule, iid_noise=True)
        alignment = AlignmentSchedule.for_sampling(schedule, multi_state_coefficients(schedule))
    n, d = config.n, manifold.d
    truth = draw_from_manifold(manifold, n, config.seed).samples
    eps = draw_normal(NoiseSource(config.seed, DIFFUSE_STREAM).spawn(n), d)
    diffused = forward_marginal(truth, schedule.T, schedule, eps) if n else numpy.zeros((0, d))
    prior = draw_normal(NoiseSource(config.seed, PRIOR_STREAM).spawn(n), d)
    tasks = [(model, alignment, config.seed, a, prior[a:b]) for a, b in _chunks(n, config.workers)]
    parts = run_parallel(_generate_chunk, tasks, config.workers)
    generated = numpy.concatenate(parts) if parts else numpy.zeros((0, d))
    report.outputs["generated"] = generated

    if n:
        worst = float(numpy.max(analysis.manifold_residual(generated, manifold)))
        report.checks.append(Check("on_manifold", worst <= 1e-10, worst, 1e-10))
    if n >= analysis.MIN_MOMENT_SAMPLES:
        moments = analysis.latent_moment_test(generated, manifold)
        report.checks.append(Check("latent_mean", moments.mean_ok, moments.mean_norm, moments.mean_threshold))
        report.checks.append(Check("latent_cov", moments.cov_ok, moments.cov_error, moments.cov_threshold))

    report.files.append(_prepare_output(config))
    rows = []
    for batch, kind in ((truth, "true"), (diffused, "diffused"), (prior, "prior"), (generated, "recovered")):
        rows.extend(_sample_rows("reverse_chain", batch, kind))
    report.files.append(write_csv(os.path.join(config.out, "samples.csv"), SAMPLE_FIELDS, rows))
    report.wall_clock = time.time() - started
    return report


def _generate_chunk(task):
    model, alignment, seed, first, prior = task
    sources = NoiseSource(seed, GENERATE_STREAM).spawn(prior.shape[0], first)
    return sample_chain(model, alignment, sources, x_init=prior)


def run_train(config):
    '''Train the linear generator with SGD and compare it with the exact solution.'''
    started = time.time()
    report = ExperimentReport("train", config)
    manifold = build_manifold(config)
    schedule = constant_schedule(config.beta, 1) if config.T == 1 else build_schedule(config)
    multi_state = schedule.T > 1
    training = TrainingConfig(config.loss, config.step_size, config.iterations, config.batch,
                              config.seed, multi_state=multi_state)
    losses = []
    model = train_ddpm(manifold, schedule, training, callback=lambda i, loss: losses.append((i, loss)))
    if multi_state:
        reference = population_solution(manifold, schedule, multi_state=True)
    else:
        reference = closed_form_two_state(manifold, config.beta).theta
    gap = float(numpy.linalg.norm(model.theta - reference))
    report.checks.append(Check("trained_vs_exact", gap <= 0.05, gap, 0.05))
    report.outputs["model"] = model

    report.files.append(_prepare_output(config))
    model_path = os.path.join(config.out, "model.txt")
    save_model(model, model_path)
    report.files.append(model_path)
    rows = [{"iteration": i, "loss": loss} for i, loss in losses]
    report.files.append(write_csv(os.path.join(config.out, "training.csv"), ["iteration", "loss"], rows))
    report.wall_clock = time.time() - started
    return report


def run_bound(config):
    '''Resampling budget, error ceiling and admissible perturbation.'''
    report = ExperimentReport("bound", config)
    beta = config.beta
    delta = build_delta(config)
    norm = delta_norm(config)
    try:
        if config.lambda_max is not None:
            lam = config.lambda_max
            lam_hat = lam + norm
        else:
            manifold = build_manifold(config)
            mask = build_mask(config)
            lam = require_valid_mask(mask, manifold)
            lam_hat = lam if delta is None else spectral_norm((manifold.projector() + delta) * mask.m)
        bounds = analysis.bound_report(config.epsilon, beta, lam, math.sqrt(1.0 - beta),
                                       config.init_distance, norm, config.kappa, lam_hat)
    except (InvalidRate, InvalidMask) as e:
        raise FlagError(str(e))
    report.outputs["bound"] = bounds
    report.files.append(_prepare_output(config))
    rows = [{"quantity": name, "value": value} for name, value in bounds.rows()]
    report.files.append(write_csv(os.path.join(config.out, "bound.csv"), ["quantity", "value"], rows))
    return report


# ===================== verification suite =====================

def _guard(name, function):
    '''Run one check; a raised error becomes a failed entry.'''
    try:
        check = function()
    except (RepaintError, ArithmeticError, ValueError) as e:
        return Check(name, False, float("nan"), float("nan"), "%s: %s" % (type(e).__name__, e))
    log.debug("%s: %s measured %g", name, "pass" if check.passed else "fail", check.measured)
    return check


def _check_mask_valid(manifold, mask):
    lam = validate_mask(mask, manifold)
    if not is_valid_lambda(lam):
        raise AssumptionViolated("lambda_max = %.15g is not below 1" % lam)
    return Check("mask_valid", True, lam, 1.0)


def _check_population(manifold, beta):
    schedule = make_schedule([beta])
    gap = float(numpy.linalg.norm(population_solution(manifold, schedule)
                                  - closed_form_two_state(manifold, beta).theta))
    return Check("population_solve", gap <= 1e-10, gap, 1e-10)


def _check_trained(config, manifold):
    training = TrainingConfig(config.loss, config.step_size, config.iterations, config.batch, config.seed)
    model = train_ddpm(manifold, make_schedule([config.beta]), training)
    gap = float(numpy.linalg.norm(model.theta - closed_form_two_state(manifold, config.beta).theta))
    return Check("trained_generator", gap <= 0.05, gap, 0.05)


def _check_multi_state_reduction(manifold, beta):
    multi = closed_form_multi_state(manifold, make_schedule([beta]))
    gap = float(numpy.abs(multi.spatial - closed_form_two_state(manifold, beta).theta).max())
    return Check("multi_state_T1", gap <= 1e-12 and not multi.time_column.any(), gap, 1e-12)


def _check_gradient(manifold, beta, seed):
    schedule = make_schedule([beta])
    noise = NoiseSource(seed, CHECK_STREAM)
    inputs, targets = training_batch(manifold, schedule, noise, 32)
    h = 1e-6
    worst = 0.0
    for _ in range(10):
        theta = noise.normal((manifold.d, manifold.d))
        _, gradient = loss_and_gradient(theta, inputs, targets)
        numeric = numpy.zeros_like(theta)
        for index in numpy.ndindex(*theta.shape):
            step = numpy.zeros_like(theta)
            step[index] = h
            up, _ = loss_and_gradient(theta + step, inputs, targets)
            down, _ = loss_and_gradient(theta - step, inputs, targets)
            numeric[index] = (up - down) / (2.0 * h)
        worst = max(worst, float(numpy.linalg.norm(gradient - numeric) / max(numpy.linalg.norm(gradient), 1e-12)))
    return Check("gradient_finite_difference", worst <= 1e-4, worst, 1e-4)


def _repaint_map(manifold, mask, beta, x0):
    scale = math.sqrt(1.0 - beta)
    P = manifold.projector()
    return scale * P * mask.m, (scale * (x0 * (1.0 - mask.m))) @ P.T


def _check_fixed_point(manifold, mask, beta, truth):
    M, forcing = _repaint_map(manifold, mask, beta, truth[:1])
    solved = analysis.fixed_point_oracle(M, forcing, "solve")
    iterated = analysis.fixed_point_oracle(M, forcing, "iterate")
    gap = float(numpy.abs(solved - iterated).max())
    return Check("fixed_point_agreement", gap <= analysis.AGREEMENT_TOL, gap, analysis.AGREEMENT_TOL)


def _check_repaint_bias(config, manifold, mask, truth, prior):
    model = closed_form_two_state(manifold, config.beta)
    run = inpainting.repaint_two_state(truth, mask, model, config.R, prior)
    M, forcing = _repaint_map(manifold, mask, config.beta, truth)
    expected = mask.paste(analysis.fixed_point_oracle(M, forcing), truth)
    gap = float(numpy.abs(run.output - expected).max())
    return Check("repaint_fixed_point", gap <= 1e-6, gap, 1e-6)


def _resampling_trajectory(config, manifold, mask, truth, prior):
    model = closed_form_two_state(manifold, config.beta)
    if config.aligned:
        run = inpainting.repaint_plus_two_state(truth, mask, model, config.R, prior, record=True)
    else:
        run = inpainting.repaint_two_state(truth, mask, model, config.R, prior, record=True)
    return model, run


def _check_pathwise_bound(config, manifold, mask, truth, prior):
    lam = validate_mask(mask, manifold)
    model, run = _resampling_trajectory(config, manifold, mask, truth, prior)
    prefactor = (spectral_norm(model.theta) * numpy.linalg.norm(prior - truth, axis=1)
                 / math.sqrt(1.0 - config.beta))
    worst = 0.0
    for r, iterate in enumerate(run.trajectory, start=1):
        excess = numpy.linalg.norm(iterate - truth, axis=1) - lam ** r * prefactor
        worst = max(worst, float(excess.max()))
    return Check("pathwise_bound", worst <= 1e-10, worst, 1e-10, "max error minus bound over all rounds")


def _check_linear_rate(config, manifold, mask, truth, prior):
    _, run = _resampling_trajectory(config, manifold, mask, truth, prior)
    errors = [math.fsum(numpy.linalg.norm(x - truth, axis=1).tolist()) / truth.shape[0]
              for x in run.trajectory[:40]]
    fitted = analysis.fit_rate(errors).fitted_rate
    if manifold.k == 1:
        expected = analysis.contraction_rate(manifold, mask)
        return Check("linear_rate", abs(fitted - expected) <= 1e-6, fitted, expected, "rank-1: exact geometric ratio")
    lam = validate_mask(mask, manifold)
    return Check("linear_rate", fitted <= lam + 1e-6, fitted, lam, "fitted rate below lambda_max")


def _limiting_errors(manifold, mask, beta, c, truth, prior):
    exact = closed_form_two_state(manifold, beta)
    model, lam_hat = perturb_generator(exact, c * numpy.eye(manifold.d), manifold, mask)
    rounds = analysis.resampling_budget(1e-13, lam_hat, 1.0, 10.0, 0.0)
    run = inpainting.repaint_plus_two_state(truth, mask, model, rounds, prior)
    return numpy.linalg.norm(run.output - truth, axis=1), lam_hat


def _check_error_ceiling(config, manifold, mask, truth, prior):
    worst = 0.0
    for c in (1e-3, 1e-2, 1e-1):
        errors, lam_hat = _limiting_errors(manifold, mask, config.beta, c, truth, prior)
        gap = c * math.sqrt(1.0 - config.beta)
        zeta = numpy.array([analysis.noisy_error_ceiling(gap, norm, lam_hat, config.beta)
                            for norm in numpy.linalg.norm(truth, axis=1)])
        worst = max(worst, float((errors - zeta).max()))
    return Check("error_ceiling", worst <= 1e-12, worst, 1e-12, "max limiting error minus zeta")


def _check_error_scaling(beta):
    # first-order regime: the toy mask "10" keeps the second-order term small
    manifold = toy_manifold()
    mask = InpaintMask.from_bits("10")
    truth = manifold.embed([[1.0]])
    prior = numpy.zeros_like(truth)
    scales = numpy.array([1e-3, 1e-2, 1e-1])
    errors = numpy.array([_limiting_errors(manifold, mask, beta, c, truth, prior)[0][0] for c in scales])
    slope = numpy.polyfit(numpy.log(scales), numpy.log(errors), 1)[0]
    return Check("error_scaling", abs(slope - 1.0) <= 0.05, float(slope), 1.0, "log-log slope of limiting error")


def _check_universal_masks(seed):
    d, k, beta, epsilon = 6, 3, 0.5, 1e-6
    manifold = random_manifold(d, k, seed)
    model = closed_form_two_state(manifold, beta)
    theta_norm = spectral_norm(model.theta)
    noise = NoiseSource(seed, CHECK_STREAM)
    worst = 0.0
    tried = 0
    for code in range(1, 2 ** d):
        mask = InpaintMask.from_bits(format(code, "0%db" % d))
        lam = validate_mask(mask, manifold)
        if not is_valid_lambda(lam):
            continue
        tried += 1
        truth = manifold.embed(noise.normal((4, k)))
        start = noise.normal((4, d))
        distance = float(numpy.linalg.norm(start - truth, axis=1).max())
        rounds = analysis.resampling_budget(epsilon, lam, theta_norm, distance, beta)
        run = inpainting.repaint_plus_two_state(truth, mask, model, rounds, start)
        worst = max(worst, float(numpy.linalg.norm(run.output - truth, axis=1).max()))
    return Check("universal_masks", worst <= epsilon, worst, epsilon, "%d valid masks, one generator" % tried)


def _check_sampler_moments(config, manifold):
    schedule = constant_schedule(config.beta, 4)
    model = closed_form_multi_state(manifold, schedule, iid_noise=True)
    alignment = AlignmentSchedule.for_sampling(schedule, multi_state_coefficients(schedule))
    n = config.moment_samples
    prior = draw_normal(NoiseSource(config.seed, PRIOR_STREAM).spawn(n), manifold.d)
    tasks = [(model, alignment, config.seed, a, prior[a:b]) for a, b in _chunks(n, config.workers)]
    generated = numpy.concatenate(run_parallel(_generate_chunk, tasks, config.workers))
    moments = analysis.latent_moment_test(generated, manifold)
    detail = "mean %.3g <= %.3g, cov %.3g <= %.3g" % (
        moments.mean_norm, moments.mean_threshold, moments.cov_error, moments.cov_threshold)
    return Check("sampler_moments", moments.passed, moments.cov_error, moments.cov_threshold, detail)


def slow_diffusion_instance():
    '''d = 64 line through the all-ones direction, one masked coordinate.'''
    d = 64
    manifold = make_manifold(numpy.ones((d, 1)))
    mask = InpaintMask.from_bits("1" + "0" * (d - 1))
    return manifold, mask


def _check_slow_expansion(seed):
    manifold, mask = slow_diffusion_instance()
    schedule = constant_schedule(0.2, 8)
    coefficients = multi_state_coefficients(schedule)
    model = closed_form_multi_state(manifold, schedule, iid_noise=True)
    alignment = AlignmentSchedule.for_sampling(schedule, coefficients)
    noise = NoiseSource(seed, CHECK_STREAM)
    truth = manifold.embed(noise.normal((8, 1)))
    start = noise.normal((8, manifold.d))
    sources = noise.spawn(8)
    run = inpainting.slow_diffusion_inpaint(truth, mask, model, schedule, alignment, sources,
                                            x_init=start, noiseless=True)
    scale = alignment.omegas[1] * coefficients.nu_bar
    expected = analysis.slow_diffusion_expansion(manifold, mask, schedule, scale, start, truth)
    gap = float(numpy.abs(run.output - expected).max())
    return Check("slow_diffusion_expansion", gap <= 1e-10, gap, 1e-10)


def slow_versus_resampling(T, n, seed):
    '''(slow diffusion RMSE, RePaint+ RMSE) at matched compute T = R.'''
    manifold, mask = slow_diffusion_instance()
    schedule = constant_schedule(0.2, T)
    coefficients = multi_state_coefficients(schedule)
    model = closed_form_multi_state(manifold, schedule, iid_noise=True)
    alignment = AlignmentSchedule.for_sampling(schedule, coefficients)
    truth = draw_from_manifold(manifold, n, seed).samples
    prior = draw_normal(NoiseSource(seed, PRIOR_STREAM).spawn(n), manifold.d)
    sources = NoiseSource(seed, METHOD_STREAM).spawn(n)
    slow = inpainting.slow_diffusion_inpaint(truth, mask, model, schedule, alignment, sources, x_init=prior)
    plus = inpainting.repaint_plus_two_state(truth, mask, closed_form_two_state(manifold, 0.2), T, prior)
    return (error_metrics("slow", slow.output, truth).rmse_per_sample,
            error_metrics("plus", plus.output, truth).rmse_per_sample)


def _check_slow_bias(seed):
    worst = float("inf")
    details = []
    passed = True
    for T in (2, 8, 32):
        slow, plus = slow_versus_resampling(T, 200, seed)
        details.append("T=%d slow %.3g plus %.3g" % (T, slow, plus))
        passed = passed and slow > 10.0 * plus and slow > 0.05
        worst = min(worst, slow)
    return Check("slow_diffusion_bias", passed, worst, 0.05, "; ".join(details))


def run_verify(config):
    '''Every property check on the configured instance plus the fixed instances.'''
    started = time.time()
    report = ExperimentReport("verify", config)
    manifold = build_manifold(config)
    mask = build_mask(config)
    truth = draw_from_manifold(manifold, config.n, config.seed).samples
    prior = draw_normal(NoiseSource(config.seed, PRIOR_STREAM).spawn(config.n), manifold.d)
    few = min(config.n, 100)

    report.checks.append(_guard("mask_valid", lambda: _check_mask_valid(manifold, mask)))
    report.checks.append(_guard("population_solve", lambda: _check_population(manifold, config.beta)))
    report.checks.append(_guard("trained_generator", lambda: _check_trained(config, manifold)))
    report.checks.append(_guard("multi_state_T1", lambda: _check_multi_state_reduction(manifold, config.beta)))
    report.checks.append(_guard("gradient_finite_difference",
                                lambda: _check_gradient(manifold, config.beta, config.seed)))
    report.checks.append(_guard("fixed_point_agreement",
                                lambda: _check_fixed_point(manifold, mask, config.beta, truth)))
    report.checks.append(_guard("repaint_fixed_point",
                                lambda: _check_repaint_bias(config, manifold, mask, truth[:few], prior[:few])))
    report.checks.append(_guard("pathwise_bound",
                                lambda: _check_pathwise_bound(config, manifold, mask, truth, prior)))
    report.checks.append(_guard("linear_rate",
                                lambda: _check_linear_rate(config, manifold, mask, truth[:few], prior[:few])))
    report.checks.append(_guard("error_ceiling",
                                lambda: _check_error_ceiling(config, manifold, mask, truth[:few], prior[:few])))
    report.checks.append(_guard("error_scaling", lambda: _check_error_scaling(config.beta)))
    report.checks.append(_guard("universal_masks", lambda: _check_universal_masks(config.seed)))
    report.checks.append(_guard("sampler_moments", lambda: _check_sampler_moments(config, manifold)))
    report.checks.append(_guard("slow_diffusion_expansion", lambda: _check_slow_expansion(config.seed)))
    report.checks.append(_guard("slow_diffusion_bias", lambda: _check_slow_bias(config.seed)))

    report.files.append(_prepare_output(config))
    report.files.append(write_csv(os.path.join(config.out, "verify.csv"), CHECK_FIELDS,
                                  [c.row() for c in report.checks]))
    report.wall_clock = time.time() - started
    if not report.passed:
        stderr("verification failed: %s" % ", ".join(c.name for c in report.checks if not c.passed))
    return report
