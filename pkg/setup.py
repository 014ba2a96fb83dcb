import os

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pure-Python install; kernels fall back to numpy
    cythonize = None

# no-trapping-math lets gcc turn float compares into selects (the max pool and
# relu loops stay branch-free and vectorize); it does not reorder arithmetic
compile_args = ["-O3", "-fno-trapping-math"]
if not os.environ.get("LACONV_PORTABLE"):
    compile_args.append("-march=native")

ext_modules = []
if cythonize is not None and not os.environ.get("LACONV_NO_EXT"):
    ext_modules = cythonize(
        [
            Extension(
                "laconv._kernels",
                ["src/laconv/_kernels.pyx"],
                include_dirs=[np.get_include(), "src/laconv"],
                depends=["src/laconv/_dyconv.h", "src/laconv/_bn.h", "src/laconv/_pool.h"],
                extra_compile_args=compile_args,
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
            "initializedcheck": False,
        },
    )

setup(ext_modules=ext_modules)
