from os.path import dirname, realpath, exists
from setuptools import setup, find_packages
import sys


author = u"bitleak developers"
authors = [author]
description = 'rowhammer weight-bit leakage simulator and substitute ' \
    + 'training with leaked bits'
name = 'bitleak'
year = "2026"

sys.path.insert(0, realpath(dirname(__file__)) + "/" + name)
from _version import version  # noqa: E402

setup(
    name=name,
    author=author,
    version=version,
    packages=find_packages(exclude=["tests"]),
    package_dir={name: name},
    license="MIT",
    description=description,
    long_description=open('README.rst').read() if exists('README.rst') else '',
    install_requires=[
        "h5py>=2.7.0",
        "lmfit",
        "numpy>=1.17.0",  # Generator API
        "scikit-learn>=0.24",
        "scipy>=1.7.0",  # stats.binomtest
        "torch>=1.9",
        ],
    python_requires='>=3.6, <4',
    entry_points={
        "console_scripts": ["bitleak = bitleak.cli:main"],
        },
    keywords=["rowhammer",
              "side channel",
              "memory massaging",
              "quantized neural networks",
              "model extraction",
              ],
    classifiers=[
        'Operating System :: OS Independent',
        'Programming Language :: Python :: 3',
        'Intended Audience :: Science/Research'
                 ],
    platforms=['ALL'],
    )
