"""Build the optional compiled kernels.

The extension is marked optional: if it fails to compile, the package still
installs and :mod:`deskrl.kernels` falls back to the pure-Python route.
"""
import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

extensions = [
    Extension(
        "deskrl._ckernels",
        ["src/deskrl/_ckernels.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=["-O3"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        optional=True,
    )
]

try:
    ext_modules = cythonize(extensions, compiler_directives={"language_level": 3})
except Exception as exc:  # Cython missing or the .pyx fails to translate
    print(f"deskrl: skipping compiled kernels ({exc})")
    ext_modules = []

setup(ext_modules=ext_modules)
