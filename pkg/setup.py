import os

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("PTKBENCH_PURE_PYTHON") != "1":
    try:
        from Cython.Build import cythonize
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            [Extension("ptkbench._bm25_ext", ["src/ptkbench/_bm25_ext.pyx"],
                       extra_compile_args=["-O3"], optional=True)],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
