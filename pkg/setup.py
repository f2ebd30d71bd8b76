"""Build script for the optional compiled kernels.

The Cython extension is optional: if Cython or a C compiler is missing the
package installs without it and ``drivessl.kernels`` falls back to numpy.
"""
import os

from setuptools import setup

ext_modules = []
if not os.environ.get("DRIVESSL_NO_EXT"):
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "drivessl.kernels._core",
                    ["src/drivessl/kernels/_core.pyx"],
                    include_dirs=[np.get_include()],
                    # no -ffast-math / -march=native: results must match the
                    # numpy fallback bit for bit
                    extra_compile_args=["-O3", "-ffp-contract=off"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
