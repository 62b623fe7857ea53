"""Build script for the optional compiled kernel extension.

The package works without the extension (a numpy fallback is selected at
import time); building it speeds up the elementwise training kernels.
`-ffp-contract=off` keeps the compiled arithmetic bit-compatible with the
unfused numpy expressions (no FMA contraction).
"""

from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "metabnn._kernels",
                ["src/metabnn/_kernels.pyx"],
                extra_compile_args=["-O3", "-ffp-contract=off"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules)
