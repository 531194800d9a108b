from setuptools import Extension, setup
from Cython.Build import cythonize

extensions = [
    Extension(
        "fieldsched._kernels._gainkernel",
        ["src/fieldsched/_kernels/_gainkernel.pyx"],
        extra_compile_args=["-O3"],
    ),
]

setup(ext_modules=cythonize(extensions, language_level="3"))
