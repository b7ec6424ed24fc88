from setuptools import Extension, setup

setup(
    ext_modules=[
        Extension("dds_sim._atomics", ["src/dds_sim/_atomics.c"], optional=True),
    ],
)
