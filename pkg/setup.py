"""Build script for the compiled kernel extension.

The extension is optional at runtime: if it is absent (or fails to build on
an exotic toolchain) the package falls back to the pure-Python kernels in
fedquad._pykernels, which produce bit-identical results. -ffp-contract=off
keeps the compiler from fusing multiply-adds, which would silently change
rounding and break that parity.
"""

from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

if cythonize is not None:
    ext_modules = cythonize(
        [
            Extension(
                "fedquad._kernels",
                ["src/fedquad/_kernels.pyx"],
                extra_compile_args=["-O3", "-ffp-contract=off"],
            )
        ],
        language_level=3,
    )
else:
    ext_modules = []

setup(ext_modules=ext_modules)
