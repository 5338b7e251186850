import os

from setuptools import Extension, setup

# SCAI_LAB_PORTABLE=1 builds without host-specific vector instructions
flags = ["-O3", "-ffast-math"]
if not os.environ.get("SCAI_LAB_PORTABLE"):
    flags.append("-march=native")

try:
    from Cython.Build import cythonize
except ImportError:  # pure-Python install; the numpy kernels are used
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "scai_lab.numerics._kernels",
                ["src/scai_lab/numerics/_kernels.pyx"],
                extra_compile_args=flags,
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
