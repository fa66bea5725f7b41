"""Build hook for the optional compiled gravity kernel.

The pure-Python fallback in ``snac.kernels._gravity_py`` is used whenever the
extension is missing, so a failed compile never breaks the install.
"""
import numpy
from setuptools import setup

try:
    from Cython.Build import cythonize
    from setuptools import Extension
except ImportError:  # pragma: no cover
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "snac.kernels._gravity_cy",
                ["src/snac/kernels/_gravity_cy.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
