"""
Exceptions raised by repaint_tools
"""


class RepaintError(Exception):
    """Base class for every error raised by this package."""


class RankDeficient(RepaintError, ValueError):
    pass


class DimensionMismatch(RepaintError, ValueError):
    pass


class ShapeMismatch(RepaintError, ValueError):
    pass


class OutOfRange(RepaintError, ValueError):
    pass


class IndexOutOfRange(RepaintError, IndexError):
    pass


class DegenerateVariance(RepaintError, ZeroDivisionError):
    pass


class InvalidMask(RepaintError, ValueError):
    pass


class AssumptionViolated(RepaintError, ValueError):
    pass


class ScheduleMismatch(RepaintError, ValueError):
    pass


class Diverged(RepaintError, ArithmeticError):
    pass


class InvalidRate(RepaintError, ValueError):
    pass


class NotContractive(RepaintError, ValueError):
    pass


class TooFewPoints(RepaintError, ValueError):
    pass


class NonPositiveError(RepaintError, ValueError):
    pass


class OffManifold(RepaintError, ValueError):
    pass


class FlagError(RepaintError, ValueError):
    pass


class ConfigError(RepaintError, ValueError):
    """Bad configuration; remembers where in the file it came from."""

    def __init__(self, message, field=None, line=None):
        self.field = field
        self.line = line
        where = []
        if line is not None:
            where.append("line %d" % line)
        if field is not None:
            where.append("field %r" % field)
        if where:
            message = "%s: %s" % (", ".join(where), message)
        super().__init__(message)
