"""Build script for the optional compiled kernel extension.

The package works without the extension (a NumPy fallback is selected at
import time); building it makes the conv3d / trilinear / scatter hot loops
roughly 3-5x faster on a single core.  Set DESCFIELDS_NO_EXT=1 to skip the
build entirely.
"""

import os

from setuptools import setup

ext_modules = []
if not os.environ.get("DESCFIELDS_NO_EXT"):
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "descfields.diffmath._kernels",
                    sources=[
                        "src/descfields/diffmath/_kernels.pyx",
                        "src/descfields/diffmath/kernels_core.c",
                    ],
                    include_dirs=[numpy.get_include(), "src/descfields/diffmath"],
                    extra_compile_args=["-O3", "-march=native", "-std=c99"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            language_level=3,
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
