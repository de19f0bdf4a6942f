import os
import sys

import numpy as np
from setuptools import Extension, setup

ext_modules = []
if os.environ.get("TACTOBENCH_NO_EXT") != "1":
    try:
        from Cython.Build import cythonize
    except ImportError:
        print("Cython not found; building without the compiled physics core", file=sys.stderr)
    else:
        # No -ffast-math / -march=native: results must be bitwise reproducible.
        ext = Extension(
            "tactobench.physics._kernels",
            ["src/tactobench/physics/_kernels.pyx"],
            include_dirs=[np.get_include()],
            extra_compile_args=["-O3", "-fopenmp", "-ffp-contract=off"],
            extra_link_args=["-fopenmp"],
            define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            optional=True,
        )
        ext_modules = cythonize(
            [ext],
            compiler_directives={
                "language_level": "3",
                "boundscheck": False,
                "wraparound": False,
                "cdivision": True,
                "initializedcheck": False,
            },
        )

setup(ext_modules=ext_modules)
