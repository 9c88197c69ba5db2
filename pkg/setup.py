"""Build script for the optional compiled kernel core.

The package works without the extension (a numpy fallback is selected at
import time); building it just makes the attention / layer-norm hot loops
faster. `python setup.py build_ext --inplace` drops the .so next to the
sources for editable installs.
"""

from setuptools import Extension, setup

try:
    import numpy as np
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "mat.kernels._ckern",
                ["src/mat/kernels/_ckern.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules)
