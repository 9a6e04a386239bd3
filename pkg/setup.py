"""Build script for the optional compiled consensus kernel.

The package is fully functional without the extension; ``negmerge.kernels``
falls back to a NumPy implementation when the compiled module is missing.
"""

from setuptools import Extension, setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "negmerge.kernels._consensus",
                ["src/negmerge/kernels/_consensus.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                optional=True,
            )
        ],
        language_level=3,
    )
except ImportError:
    pass

setup(ext_modules=ext_modules)
