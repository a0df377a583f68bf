"""Builds the optional compiled GRU kernel; the package works without it."""

import os

from setuptools import setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    def run(self):
        try:
            super().run()
        except Exception as exc:  # compiler missing etc.
            print(f"warning: compiled kernel not built ({exc}); using numpy fallback")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            print(f"warning: failed to build {ext.name} ({exc}); using numpy fallback")


def compile_args():
    # -ffast-math with -fopenmp-simd lets gcc call glibc's vectorized exp (libmvec)
    args = ["-O3", "-ffast-math", "-fopenmp-simd"]
    if os.environ.get("POIAUDIT_NATIVE", "1") != "0" and _host_has_avx2():
        args += ["-mavx2", "-mfma"]
    return args


def _host_has_avx2():
    try:
        with open("/proc/cpuinfo") as fh:
            flags = fh.read()
    except OSError:
        return False
    return " avx2" in flags and " fma" in flags


def _vector_math_libs():
    for d in ("/lib/x86_64-linux-gnu", "/usr/lib/x86_64-linux-gnu", "/usr/lib64", "/lib64"):
        if os.path.exists(os.path.join(d, "libmvec.so")):
            return ["mvec", "m"]
    return ["m"]


def extensions():
    if os.environ.get("POIAUDIT_NO_EXT"):
        return []
    try:
        import numpy as np
        from Cython.Build import cythonize
    except ImportError:
        return []
    from setuptools import Extension

    ext = Extension(
        "poiaudit.model._gru_ext",
        ["src/poiaudit/model/_gru_ext.pyx"],
        include_dirs=[np.get_include(), "src/poiaudit/model"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=compile_args(),
        libraries=_vector_math_libs(),
    )
    return cythonize([ext], language_level=3, quiet=True)


setup(ext_modules=extensions(), cmdclass={"build_ext": OptionalBuildExt})
