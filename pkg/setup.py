import os

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pure-Python install; dotfactor.kernels falls back to numpy
    cythonize = None

ext_modules = []
if cythonize is not None and not os.environ.get("DOTFACTOR_NO_EXT"):
    ext_modules = cythonize(
        [
            Extension(
                "dotfactor._ckernels",
                ["src/dotfactor/_ckernels.pyx"],
                include_dirs=[np.get_include()],
                # keep float32 rounding sequence identical to the numpy path;
                # no errno from sqrt lets the Adam loop vectorise
                extra_compile_args=["-O3", "-ffp-contract=off", "-fno-math-errno"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
