"""Build script: compiles the Cython kernel core when the toolchain allows.

The package works without the extension (the numpy fallback backend is
selected at import), so any build failure here downgrades to a pure-Python
install instead of aborting.
"""

from setuptools import setup

ext_modules = []
try:
    import numpy as np
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [
            Extension(
                "nas_rt.backend._kernels_cy",
                ["src/nas_rt/backend/_kernels_cy.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3", "-fopenmp"],
                extra_link_args=["-fopenmp"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )
except Exception as exc:  # pragma: no cover - toolchain-dependent
    print(f"nas-rt: skipping compiled kernels ({exc}); numpy fallback will be used")

setup(ext_modules=ext_modules)
