"""Pick the compiled kernels when they are built, else the numpy fallback.

Set ``CALIBSEG_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _fallback

if os.environ.get("CALIBSEG_PURE_PYTHON", "") not in ("", "0"):
    impl = _fallback
    NAME = "python"
else:
    try:
        from . import _kernels as impl
    except ImportError:
        impl = _fallback
        NAME = "python"
    else:
        NAME = "cython"

window_sums = impl.window_sums
distance_to_mask = impl.distance_to_mask
