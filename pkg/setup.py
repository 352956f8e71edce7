import os

from setuptools import setup

ext_modules = []
if os.environ.get("MQARCH_NO_EXT", "") in ("", "0"):
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext = Extension(
            "mqarch._ckernels",
            ["src/mqarch/_ckernels.pyx"],
            include_dirs=[np.get_include()],
            define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            extra_compile_args=["-O3"],
        )
        ext_modules = cythonize([ext], language_level=3)
    except ImportError:
        # no Cython or numpy at build time: pure Python fallback only
        ext_modules = []

setup(ext_modules=ext_modules)
