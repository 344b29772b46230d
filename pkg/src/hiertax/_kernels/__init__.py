"""Kernel backend selection.

Prefers the compiled extension (hiertax._kernels._core) and falls back to
the pure-Python implementation.  Set HIERTAX_PURE=1 to force the fallback.
Both backends are bit-identical; benchmarks/bench_kernels.py compares them.
"""

import os

if os.environ.get("HIERTAX_PURE", "0") not in ("", "0"):
    from . import _pure as _impl

    BACKEND = "pure"
else:
    try:
        from . import _core as _impl  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:
        from . import _pure as _impl

        BACKEND = "pure"

splitmix_fill_u64 = _impl.splitmix_fill_u64
uniform_fill = _impl.uniform_fill
gaussian_fill = _impl.gaussian_fill
resample_trilinear = _impl.resample_trilinear
avg_pool3d = _impl.avg_pool3d


def backend_name() -> str:
    return BACKEND
