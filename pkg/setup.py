import os

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # fall back to the pure-Python kernels
    cythonize = None

ext_modules = []
if cythonize is not None and not os.environ.get("BEVSAN_PURE_PYTHON"):
    ext_modules = cythonize(
        [
            Extension(
                "bevsan._pool_kernels",
                ["src/bevsan/_pool_kernels.pyx"],
                include_dirs=[np.get_include()],
                # no -ffast-math: summation order must be preserved exactly
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
