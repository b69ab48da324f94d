from Cython.Build import cythonize
from setuptools import Extension, setup

setup(
    ext_modules=cythonize(
        [Extension("vovc._rangecoder", ["src/vovc/_rangecoder.pyx"])],
        language_level=3,
    ),
)
