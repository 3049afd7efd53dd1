"""Builds the optional compiled kernel; the package runs without it."""
from setuptools import setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize
    from setuptools import Extension
except ImportError:
    pass
else:
    ext_modules = cythonize(
        [Extension("islandpsi._kernels", ["src/islandpsi/_kernels.pyx"],
                   include_dirs=[numpy.get_include()],
                   extra_compile_args=["-O3"],
                   define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")])],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
