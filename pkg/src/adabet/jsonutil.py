"""Canonical JSON emission.

Artifacts written by the toolkit must be byte-identical across runs, so
every float is rendered with 17 significant digits (enough to round-trip a
double exactly) and key order is fixed by the caller, never re-sorted.
"""

import json
import math

from .errors import InternalError


def format_float(x):
    """Render a finite float with 17 significant digits."""
    x = float(x)
    if not math.isfinite(x):
        raise InternalError("cannot serialize non-finite float %r" % x)
    return format(x, ".17g")


def dumps_canonical(obj):
    """Serialize nested dicts/lists/scalars, preserving dict insertion order.

    Floats go through format_float; ints, bools, None and strings use the
    standard JSON forms.  The result has no insignificant whitespace beyond
    single spaces after ':' and ','.
    """
    out = []
    _emit(obj, out)
    return "".join(out)


def _emit(obj, out):
    if obj is None or obj is True or obj is False:
        out.append(json.dumps(obj))
    elif isinstance(obj, str):
        out.append(json.dumps(obj))
    elif isinstance(obj, bool):  # pragma: no cover - caught above
        out.append(json.dumps(obj))
    elif isinstance(obj, int):
        out.append(str(obj))
    elif isinstance(obj, float):
        out.append(format_float(obj))
    elif isinstance(obj, dict):
        out.append("{")
        for k, (key, val) in enumerate(obj.items()):
            if k:
                out.append(", ")
            out.append(json.dumps(str(key)))
            out.append(": ")
            _emit(val, out)
        out.append("}")
    elif isinstance(obj, (list, tuple)):
        out.append("[")
        for k, val in enumerate(obj):
            if k:
                out.append(", ")
            _emit(val, out)
        out.append("]")
    else:
        raise InternalError("unserializable value of type %s" % type(obj).__name__)
