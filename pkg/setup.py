"""Build script for the optional compiled kernels.

The package works without the extension; ``rowfed.kernels`` falls back to
the NumPy implementation when ``rowfed._ckernels`` cannot be imported.
"""
import os

import numpy
from setuptools import Extension, setup

extensions = []
if os.environ.get("ROWFED_NO_EXT", "") != "1":
    try:
        from Cython.Build import cythonize
    except ImportError:  # pragma: no cover
        cythonize = None
    if cythonize is not None:
        extensions = cythonize(
            [
                Extension(
                    "rowfed._ckernels",
                    ["src/rowfed/_ckernels.pyx"],
                    include_dirs=[numpy.get_include()],
                    extra_compile_args=["-O3"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=extensions)
