"""Build the optional Cython kernels.

The package works without them: ``panocalib.kernels`` falls back to numpy
implementations when ``panocalib._core`` cannot be imported.

    pip install -e . --no-build-isolation
"""
import os

from setuptools import setup

ext_modules = []
if not os.environ.get("PANOCALIB_NO_EXT"):
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "panocalib._core",
                    ["src/panocalib/_core.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
