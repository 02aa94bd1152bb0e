import os

import numpy as np
from setuptools import Extension, setup

# FEDLEAK_NO_EXT=1 skips the compiled core; the package then runs on its numpy kernels.
if os.environ.get("FEDLEAK_NO_EXT"):
    ext_modules = []
else:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "fedleak._ckernels",
                ["src/fedleak/_ckernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3", "-march=native"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
