'''
The repaint command: toy, generate, verify, bound, train and inpaint
'''

import optparse
import sys
import traceback

from repaint_tools import experiments
from repaint_tools.errors import ConfigError, FlagError
from repaint_tools.util import format_float, set_verbose, stderr, verbose_stderr

SUBCOMMANDS = ("toy", "generate", "verify", "bound", "train", "inpaint")

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2


def make_parser():
    parser = optparse.OptionParser(
        "usage: %prog {" + "|".join(SUBCOMMANDS) + "} [-v] [-c CONFIG] [-o DIR] [options]"
    )
    parser.add_option(
        "-c",
        "--config",
        action="store",
        dest="config",
        default=None,
        help="key = value configuration file (default: built-in toy experiment)",
    )
    parser.add_option(
        "--seed",
        action="store",
        dest="seed",
        type="int",
        default=None,
        help="master seed for every noise stream",
    )
    parser.add_option(
        "-o",
        "--out",
        action="store",
        dest="out",
        default=None,
        help="output directory (default: $%s or the current directory)" % experiments.OUTPUT_ENV,
    )
    parser.add_option(
        "-w",
        "--workers",
        action="store",
        dest="workers",
        type="int",
        default=None,
        help="worker processes for sample-parallel runs",
    )
    parser.add_option(
        "--record-trajectory",
        action="store_true",
        dest="record_trajectory",
        default=None,
        help="write the per-round mean error to trajectory.csv",
    )
    parser.add_option(
        "-s",
        "--set",
        action="append",
        dest="settings",
        default=[],
        metavar="KEY=VALUE",
        help="override one configuration key; may be repeated",
    )
    parser.add_option("--mask", action="store", dest="mask", default=None, help="mask bits, e.g. 01")
    parser.add_option("--beta", action="store", dest="beta", type="float", default=None)
    parser.add_option("--epsilon", action="store", dest="epsilon", type="float", default=None,
                      help="bound: target accuracy")
    parser.add_option("--lambda-max", action="store", dest="lambda_max", type="float", default=None,
                      help="bound: use this lambda_max instead of computing it from the mask")
    parser.add_option("--delta-norm", action="store", dest="delta_norm", type="float", default=None,
                      help="bound: spectral norm of the generator perturbation")
    parser.add_option("--kappa", action="store", dest="kappa", type="float", default=None,
                      help="bound: support radius of the data")
    parser.add_option("--init-distance", action="store", dest="init_distance", type="float", default=None,
                      help="bound: ||x_1 - x_0|| of the starting point")
    parser.add_option("--iterations", action="store", dest="iterations", type="int", default=None,
                      help="train: SGD iterations")
    parser.add_option("--known", action="store", dest="known", default=None,
                      help="inpaint: comma separated x0; masked entries are ignored")
    parser.add_option("--method", action="store", dest="method", default=None,
                      help="inpaint: comma separated methods to run")
    parser.add_option(
        "-v",
        "--verbose",
        action="store_true",
        dest="verbose",
        default=False,
        help="be verbose (default: %default)",
    )
    return parser


def collect_overrides(options):
    '''Command-line values that take precedence over the configuration file.'''
    overrides = {}
    for setting in options.settings:
        key, sep, value = setting.partition("=")
        if not sep:
            raise FlagError("--set expects KEY=VALUE, got %r" % setting)
        overrides[key.strip()] = value.strip()
    for name in ("seed", "out", "workers", "record_trajectory", "mask", "beta", "epsilon",
                 "lambda_max", "kappa", "init_distance", "iterations"):
        value = getattr(options, name)
        if value is not None:
            overrides[name] = value
    if options.delta_norm is not None:
        overrides["delta"] = "identity:%r" % options.delta_norm
    if options.method is not None:
        overrides["methods"] = options.method
    return overrides


def parse_known(text):
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise FlagError("--known must be comma separated numbers, got %r" % text)


def print_metrics(report):
    for m in report.metrics:
        line = "%s: rmse_per_sample=%s summed_error=%s" % (
            m.method, format_float(m.rmse_per_sample), format_float(m.summed_error))
        if m.fitted_rate is not None:
            line += " fitted_rate=%s" % format_float(m.fitted_rate)
        print(line)


def print_checks(report):
    for c in report.checks:
        print("%-28s %s  measured=%s threshold=%s %s" % (
            c.name, "pass" if c.passed else "FAIL", format_float(c.measured),
            format_float(c.threshold), c.detail))


def dispatch(command, config, options):
    '''Run one subcommand; returns the exit code.'''
    if command == "toy":
        report = experiments.run_toy(config)
        print_metrics(report)
    elif command == "generate":
        report = experiments.run_generate(config)
        print_checks(report)
    elif command == "verify":
        report = experiments.run_verify(config)
        print_checks(report)
    elif command == "bound":
        report = experiments.run_bound(config)
        for name, value in report.outputs["bound"].rows():
            print("%s = %s" % (name, value if isinstance(value, int) else format_float(value)))
    elif command == "train":
        report = experiments.run_train(config)
        print_checks(report)
    else:
        if options.known is None:
            raise FlagError("inpaint needs --known")
        report = experiments.run_inpaint(config, parse_known(options.known))
        for method, output in report.outputs.items():
            print("%s: %s" % (method, " ".join(format_float(v) for v in output[0])))
    verbose_stderr("%s finished in %.2f s, wrote %s" % (command, report.wall_clock, ", ".join(report.files)))
    return EXIT_OK if report.passed else EXIT_FAILED


def run(argv=None):
    parser = make_parser()
    (options, args) = parser.parse_args(sys.argv[1:] if argv is None else argv)

    set_verbose(options.verbose)

    if len(args) != 1 or args[0] not in SUBCOMMANDS:
        stderr("Error: expected exactly one subcommand out of %s" % ", ".join(SUBCOMMANDS))
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG

    try:
        config = experiments.resolve_config(options.config, collect_overrides(options))
        return dispatch(args[0], config, options)
    except (ConfigError, FlagError) as e:
        stderr("Error: %s" % e)
        return EXIT_CONFIG
    except OSError as e:
        stderr("Error: %s" % e)
        return EXIT_CONFIG
    except Exception as e:
        # report exception and exit
        stderr("repaint %s failed with exception %s" % (args[0], e))
        exctype, value, tb = sys.exc_info()
        traceback.print_tb(tb)
        return EXIT_FAILED


def main():
    sys.exit(run())
