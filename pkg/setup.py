from setuptools import setup
from setuptools import find_packages
import os
import breachcast

version = breachcast.__version__


def read_file(fname):
    return open(os.path.join(os.path.dirname(__file__), fname)).read()


setup(
    name="breachcast",
    version=version,
    description="Proactive forecasting of the breach step in multi-agent reasoning logs",
    url="",
    license="BSD",
    long_description=read_file("README.md"),
    long_description_content_type="text/markdown",
    packages=find_packages(exclude=["tests"]),
    python_requires=">=3.8",
    install_requires=["numpy>=1.20", "httpx", "pytest"],
    entry_points={
        "console_scripts": [
            "breachcast=breachcast.cli:main",
            "breachcast-monitor=breachcast.cli:monitor",
        ],
        "pytest11": ["pytest-breachcast = breachcast.plugin"],
    },
    platforms="any",
    classifiers=[
        "Programming Language :: Python :: 3",
        "License :: OSI Approved :: BSD License",
        "Topic :: Scientific/Engineering :: Artificial Intelligence",
    ],
)
