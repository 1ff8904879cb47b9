"""Build script for the optional compiled kernel extension.

The package works without the extension (a pure-Python backend is selected at
import time); building it is strongly recommended for any run beyond smoke
scale.  `pip install -e . --no-build-isolation` compiles it in place.
"""

import os

from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

PYX = "src/loopsoup/_kernels/_core.pyx"

extensions = []
if cythonize is not None and os.path.exists(PYX):
    extensions = cythonize(
        [
            Extension(
                "loopsoup._kernels._core",
                sources=[PYX],
                # fp-contract off: fused multiply-adds would break the
                # bit-for-bit parity contract with the Python backend
                extra_compile_args=["-O3", "-ffp-contract=off"],
            )
        ],
        compiler_directives={
            "language_level": 3,
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
            "initializedcheck": False,
        },
    )

setup(ext_modules=extensions)
