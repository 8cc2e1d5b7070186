"""Build script: compiles the optional Cython kernel core.

The package works without the extension (a pure-Python kernel backend is
selected at import time), so a failed compile downgrades to a warning
instead of aborting the install.
"""

import sys

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


# -ffp-contract=off keeps the compiled kernels bit-identical to the pure
# backend (no FMA contraction); -ffast-math would break IEEE semantics.
COMPILE_ARGS = ["-O3", "-ffp-contract=off"]


class optional_build_ext(build_ext):
    def run(self):
        try:
            super().run()
        except Exception as exc:  # missing compiler, etc.
            self._warn(exc)

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            self._warn(exc)

    @staticmethod
    def _warn(exc):
        print(
            f"WARNING: building the argscore._fast kernels failed ({exc}); "
            "falling back to the pure-Python backend",
            file=sys.stderr,
        )


def extensions():
    try:
        from Cython.Build import cythonize
    except ImportError:
        print("WARNING: Cython not available; skipping compiled kernels", file=sys.stderr)
        return []
    exts = [
        Extension(
            "argscore.engine.kernels._fast",
            sources=["src/argscore/engine/kernels/_fast.pyx"],
            extra_compile_args=COMPILE_ARGS,
        )
    ]
    return cythonize(exts, compiler_directives={"language_level": "3"})


setup(
    ext_modules=extensions(),
    cmdclass={"build_ext": optional_build_ext},
)
