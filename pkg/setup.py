#!/usr/bin/env python3
"""
Setup script for jotrecon
"""

from setuptools import setup

with open("README.md", "r", encoding="utf-8") as fh:
    long_description = fh.read()

with open("requirements.txt", "r", encoding="utf-8") as fh:
    requirements = [line.strip() for line in fh if line.strip() and not line.startswith("#")]

setup(
    name="jotrecon",
    version="1.0.0",
    description="Image reconstruction from binary multi-threshold sensor exposures",
    long_description=long_description,
    long_description_content_type="text/markdown",
    py_modules=[
        "errors",
        "tensor_io",
        "formation",
        "likelihood",
        "synthesis",
        "solvers",
        "mlnet",
        "metrics",
        "scenes",
        "config_manager",
        "dataset_manager",
        "excel_exporter",
        "pipeline",
        "jotrecon_cli",
    ],
    classifiers=[
        "Development Status :: 4 - Beta",
        "Intended Audience :: Science/Research",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.8",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
        "Topic :: Scientific/Engineering :: Image Processing",
    ],
    python_requires=">=3.8",
    install_requires=requirements,
    entry_points={
        "console_scripts": [
            "jotrecon=jotrecon_cli:main",
        ],
    },
    keywords="image reconstruction, binary sensor, quanta image sensor, ista, fista, unrolled network",
)
