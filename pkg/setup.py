#!/usr/bin/env python

"""The setup script."""

from pkg_resources import parse_requirements
from setuptools import find_packages, setup

with open("README.md", "r", encoding="utf-8") as readme_file:
    readme = readme_file.read()

with open("requirements.txt") as requirements_file:
    requirements = [str(req) for req in parse_requirements(requirements_file.readlines())]

short_description = (
    "Train neural networks that call exact, non-differentiable black-box functions "
    "by learning a differentiable estimator and replacing it at inference."
)

setup(
    python_requires=">=3.8",
    classifiers=[
        "Development Status :: 2 - Pre-Alpha",
        "Intended Audience :: Science/Research",
        "License :: OSI Approved :: MIT License",
        "Natural Language :: English",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.8",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
    ],
    description=short_description,
    entry_points={
        "console_scripts": [
            "estinet=estinet.cli:cli",
        ],
    },
    install_requires=requirements,
    license="MIT license",
    long_description=readme,
    long_description_content_type="text/markdown",
    include_package_data=True,
    package_data={"estinet": ["data/*.txt"]},
    keywords="black-box functions,estimate and replace,interpretability,neural arithmetic",
    name="estinet",
    packages=find_packages(include=["estinet", "estinet.*"]),
    version="0.1.0",
    zip_safe=False,
)
