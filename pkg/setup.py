import os
import sys

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

ext_modules = []
if cythonize is not None and not os.environ.get("GBTD_NO_EXTENSION"):
    compile_args = ["-O3", "-ffp-contract=off"]
    link_args = []
    if sys.platform != "darwin":
        compile_args.append("-fopenmp")
        link_args.append("-fopenmp")
    ext = Extension(
        "gbtd._ckernels",
        ["src/gbtd/_ckernels.pyx"],
        include_dirs=[np.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=compile_args,
        extra_link_args=link_args,
    )
    ext_modules = cythonize([ext], language_level=3)

setup(ext_modules=ext_modules)
