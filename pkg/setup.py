import sys

import numpy as np
from setuptools import Extension, setup

# The compiled kernels are optional: if Cython or a C compiler is missing the
# package still installs and falls back to the numpy kernels at import time.
ext_modules = []
try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "pathfilter._native",
                ["src/pathfilter/_native.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    print("Cython not available; building without compiled kernels", file=sys.stderr)

setup(ext_modules=ext_modules)
