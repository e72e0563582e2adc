"""Builds the optional compiled kernel; the package works without it."""

from setuptools import setup

ext_modules = []
try:
    import numpy as np
    from Cython.Build import cythonize
    from setuptools import Extension
except ImportError:
    pass
else:
    ext_modules = cythonize(
        [Extension("sisso._kernels", sources=["src/sisso/_kernels.pyx"],
                   include_dirs=[np.get_include()], extra_compile_args=["-O3"],
                   define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")])],
        language_level=3,
    )

setup(ext_modules=ext_modules)
