"""Build script: compiles the optional Cython kernel extension.

The package is pure Python plus one small extension module with the
per-step hot loops (row softmax, fused unmask sampling, Adam updates).
If the extension is unavailable at runtime the package falls back to
NumPy implementations with identical semantics.
"""

import numpy
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "diffpolicy.kernels._ck",
                ["src/diffpolicy/kernels/_ck.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )
        ],
        language_level=3,
    )
except ImportError:
    extensions = []

setup(ext_modules=extensions)
