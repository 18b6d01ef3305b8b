"""Build script for the compiled convolution kernels.

The extension lowers each convolution to C gather/scatter loops around a
matrix product that is dispatched through numpy, so it links nothing beyond
the C runtime. The extension is optional: if no C compiler is available the
install still succeeds and the package falls back to its pure numpy kernels
(see attnmine.backend).
"""

import numpy
from Cython.Build import cythonize
from setuptools import Extension, setup

setup(
    ext_modules=cythonize(
        [
            Extension(
                "attnmine._convkern",
                ["src/attnmine/_convkern.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                optional=True,
            )
        ],
        language_level=3,
    )
)
