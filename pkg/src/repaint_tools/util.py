'''
Miscellaneous utility functions
'''

import logging
import sys

import numpy

from repaint_tools.errors import ShapeMismatch


def uniq(seq, idfun=None):
    '''Makes a sequence 'unique' in the style of UNIX command uniq'''
    # order preserving
    if idfun is None:
        def idfun(x): return x
    seen = set()
    result = []
    for item in seq:
        marker = idfun(item)
        if marker in seen: continue
        seen.add(marker)
        result.append(item)
    return result


def format_float(value):
    '''Shortest decimal string that reads back to the same double.'''
    return repr(float(value))


def format_exact(value):
    '''Decimal string with 17 significant digits, used by model files.'''
    return "%.17g" % float(value)


def as_vector(x, name="vector"):
    '''Coerce x into a 1-d float64 array.'''
    arr = numpy.asarray(x, dtype=numpy.float64)
    if arr.ndim != 1:
        raise ShapeMismatch("%s must be one-dimensional, got shape %s" % (name, arr.shape))
    return arr


def as_batch(x, d, name="batch"):
    '''Coerce x into an (n, d) float64 array; a single vector becomes n = 1.'''
    arr = numpy.asarray(x, dtype=numpy.float64)
    if arr.ndim == 1:
        arr = arr[numpy.newaxis, :]
    if arr.ndim != 2 or arr.shape[1] != d:
        raise ShapeMismatch("%s must have shape (n, %d), got %s" % (name, d, arr.shape))
    return arr


def stderr(text):
    """print out something to standard error, followed by an ENTER"""
    sys.stderr.write(text)
    sys.stderr.write("\n")


__verbose = False
def verbose_stderr(*args, **kwargs):
    global __verbose
    if __verbose: stderr(*args, **kwargs)


def set_verbose(boolean):
    '''Toggle verbose CLI output and route library logging to stderr.'''
    global __verbose
    __verbose = boolean
    root = logging.getLogger("repaint_tools")
    if not root.handlers:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("%(name)s: %(message)s"))
        root.addHandler(handler)
    root.setLevel(logging.DEBUG if boolean else logging.WARNING)
