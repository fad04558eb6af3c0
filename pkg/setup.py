import numpy
from setuptools import Extension, setup
from Cython.Build import cythonize

# -ffp-contract=off keeps the C arithmetic IEEE per-operation so the compiled
# kernels agree with the numpy fallback (and with the brute-force test oracles)
# to the last bit where the reduction order is the same.
extensions = [
    Extension(
        "splatlab.kernels._cy_backend",
        ["src/splatlab/kernels/_cy_backend.pyx"],
        extra_compile_args=["-O3", "-ffp-contract=off"],
        include_dirs=[numpy.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
]

setup(
    ext_modules=cythonize(extensions, compiler_directives={"language_level": "3"}),
)
