"""Build script: compiles the optional Cython kernel extension.

The package is fully functional without the extension (a NumPy fallback is
selected at import time), so any build failure here only disables the
compiled fast path.  Set AFMDP_NO_EXT=1 to skip compilation explicitly.
"""
import os

from setuptools import setup

ext_modules = []
if os.environ.get("AFMDP_NO_EXT") != "1":
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension

        ext = Extension(
            "afmdp.kernels._native",
            ["src/afmdp/kernels/_native.pyx"],
            include_dirs=[numpy.get_include()],
            # -ffp-contract=off: the compiled kernels must be bit-identical
            # to the NumPy fallback, so FMA contraction is disabled.
            extra_compile_args=["-O3", "-ffp-contract=off"],
        )
        ext_modules = cythonize([ext], compiler_directives={"language_level": "3"})
    except Exception as exc:  # pragma: no cover - build-environment dependent
        print(f"afmdp: compiled kernels disabled ({exc}); using NumPy fallback")

setup(ext_modules=ext_modules)
