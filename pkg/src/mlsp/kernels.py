"""Backend selection for the hot kernels.

The compiled extension is used when it imports; set ``MLSP_PURE_PYTHON=1``
to force the numpy fallback.  ``BACKEND`` names the active implementation.
"""
import os

from . import _pykernels

_compiled = None
if os.environ.get("MLSP_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _compiled
    except ImportError:
        _compiled = None

_impl = _compiled if _compiled is not None else _pykernels
BACKEND = "cython" if _compiled is not None else "python"

area_resize = _impl.area_resize
# numpy's float16 cast uses the CPU's half conversion instructions and beats
# the scalar compiled loop; both round to nearest even and clamp alike
fp16_encode = _pykernels.fp16_encode
fp16_decode = _impl.fp16_decode
cell_means = _impl.cell_means
coverage_matrix = _pykernels.coverage_matrix
HALF_MAX = _pykernels.HALF_MAX


def backends():
    """Return ``{name: module}`` for every importable backend."""
    found = {"python": _pykernels}
    if _compiled is not None:
        found["cython"] = _compiled
    else:
        try:
            from . import _ckernels
        except ImportError:
            pass
        else:
            found["cython"] = _ckernels
    return found
