"""Selection of the convolution kernel implementation.

The compiled extension is used when it imports; otherwise, or when the
environment variable ``GBTD_PURE_PYTHON`` is set to a non-empty value, the
numpy fallback is used. ``GBTD_THREADS`` caps the threads of the compiled
kernel.
"""

import os

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_BACKENDS = {"python": _pykernels}
if _ckernels is not None:
    _BACKENDS["cython"] = _ckernels

if _ckernels is not None and not os.environ.get("GBTD_PURE_PYTHON"):
    default = _ckernels
else:
    default = _pykernels


def available():
    """Names of the importable backends."""
    return sorted(_BACKENDS)


def get(name=None):
    if name is None:
        return default
    try:
        return _BACKENDS[name]
    except KeyError:
        raise ValueError(f"backend {name!r} not available; have {available()}") from None


def threads():
    raw = os.environ.get("GBTD_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise ValueError(f"GBTD_THREADS must be an integer, got {raw!r}") from None
    return os.cpu_count() or 1
