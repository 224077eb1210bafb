"""Build script for the optional compiled kernel extension.

The package is fully functional without the extension; kernels/__init__.py
falls back to the numpy reference implementation when the import fails.
"""

from setuptools import Extension, setup

extensions = []
try:
    import numpy as np
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "dualdyn.kernels._fastcore",
                ["src/dualdyn/kernels/_fastcore.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                optional=True,
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    # No Cython toolchain: install the pure build.
    extensions = []

setup(ext_modules=extensions)
