"""Build the optional compiled kernels.

The package works without them: ``vrnet.kernels`` falls back to the
NumPy implementations in ``vrnet._pykernels`` when the extension is
missing. To build in place::

    pip install -e . --no-build-isolation
"""
import os

import numpy as np
from setuptools import Extension, setup

ext_modules = []
if os.environ.get("VRNET_NO_EXT", "") != "1":
    try:
        from Cython.Build import cythonize
    except ImportError:  # pragma: no cover
        cythonize = None
    if cythonize is not None:
        ext = Extension(
            "vrnet._ckernels",
            ["src/vrnet/_ckernels.pyx"],
            include_dirs=[np.get_include()],
            extra_compile_args=["-O3"],
            define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        )
        ext_modules = cythonize(
            [ext],
            compiler_directives={
                "language_level": 3,
                "boundscheck": False,
                "wraparound": False,
                "cdivision": True,
                "initializedcheck": False,
            },
        )

setup(ext_modules=ext_modules)
