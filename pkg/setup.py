"""Build script for the optional compiled kernel core.

The package works without the extension (a pure-Python twin of every kernel
is selected at import time); the extension only makes the hot loops fast.
Build failures therefore degrade to a warning instead of aborting install.
"""

import warnings

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    """Build the Cython core if a toolchain is present, else fall back."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # missing compiler, broken toolchain
            warnings.warn(f"compiled kernel core skipped ({exc}); "
                          "falling back to pure-Python kernels")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            warnings.warn(f"compiled kernel core skipped ({exc}); "
                          "falling back to pure-Python kernels")


def make_extensions():
    try:
        from Cython.Build import cythonize
    except ImportError:
        warnings.warn("Cython not available; installing with pure-Python kernels")
        return []
    ext = Extension(
        "moebius._kernels._core",
        ["src/moebius/_kernels/_core.pyx"],
        extra_compile_args=["-O3"],
    )
    return cythonize([ext], compiler_directives={"language_level": "3"})


setup(
    ext_modules=make_extensions(),
    cmdclass={"build_ext": OptionalBuildExt},
)
