"""Build script for the compiled encoder kernels.

The extension is optional at runtime: memrl.backend falls back to the pure
numpy forward pass if the import fails, so a source checkout works without
compiling. `pip install -e . --no-build-isolation` builds it in place.
"""

import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

extensions = [
    Extension(
        "memrl._encoder_core",
        ["src/memrl/_encoder_core.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=["-O3"],
    )
]

setup(
    ext_modules=cythonize(
        extensions,
        compiler_directives={
            "language_level": 3,
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    ),
)
