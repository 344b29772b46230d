"""Build script for the optional compiled kernel core.

The extension is marked optional: if no C compiler (or Cython) is available
the install still succeeds and the package falls back to the pure-Python
kernels in hiertax._kernels._pure at import time.

Compiled with -ffp-contract=off (no fused multiply-add) and with the
sin/cos builtins disabled (no sincos fusion, which perturbs the last ulp)
so that the C arithmetic is bit-identical to the pure backend.
"""

from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "hiertax._kernels._core",
                sources=["src/hiertax/_kernels/_core.pyx"],
                extra_compile_args=[
                    "-O3",
                    "-ffp-contract=off",
                    "-fno-builtin-sin",
                    "-fno-builtin-cos",
                ],
                optional=True,
            )
        ],
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    )

setup(ext_modules=ext_modules)
