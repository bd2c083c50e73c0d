import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "bunchdesign._fast._core",
                ["src/bunchdesign/_fast/_core.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                optional=True,
            )
        ],
        language_level=3,
    )
except ImportError:
    # No Cython available: the package falls back to the numpy implementation.
    extensions = []

setup(ext_modules=extensions)
