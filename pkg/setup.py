"""Build script for the compiled kernel extension.

The extension is optional: if the build toolchain is unavailable the install
still succeeds and the package falls back to the pure-numpy kernels at import
time (see adnet.backend).
"""

import sys

from setuptools import setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    """Skip the extension (with a warning) when compilation fails."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # noqa: BLE001
            print(f"warning: compiled kernels not built ({exc}); "
                  "falling back to pure-numpy kernels", file=sys.stderr)

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:  # noqa: BLE001
            print(f"warning: failed to build {ext.name} ({exc}); "
                  "falling back to pure-numpy kernels", file=sys.stderr)


def make_extensions():
    import numpy
    from Cython.Build import cythonize
    from setuptools.extension import Extension

    # -ffp-contract=off keeps float32 mul-then-add rounding identical to
    # numpy's, so both backends produce bit-identical forward passes.
    ext = Extension(
        "adnet._ckernels",
        sources=["src/adnet/_ckernels.pyx"],
        include_dirs=[numpy.get_include()],
        extra_compile_args=["-O3", "-fopenmp", "-ffp-contract=off"],
        extra_link_args=["-fopenmp"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    return cythonize(
        [ext],
        compiler_directives={
            "language_level": 3,
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
            "initializedcheck": False,
        },
    )


try:
    extensions = make_extensions()
except ImportError as exc:
    print(f"warning: {exc}; building without compiled kernels", file=sys.stderr)
    extensions = []

setup(ext_modules=extensions, cmdclass={"build_ext": OptionalBuildExt})
