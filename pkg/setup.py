import os

from setuptools import setup

ext_modules = []
if os.environ.get("DIVMAX_NO_EXTENSION", "") in ("", "0"):
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "divmax.kernels._core",
                    ["src/divmax/kernels/_core.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={"language_level": 3},
        )
    except ImportError:
        # pure-python install; divmax.kernels falls back to numpy
        ext_modules = []

setup(ext_modules=ext_modules)
