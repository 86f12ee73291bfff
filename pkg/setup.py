"""Setup configuration for mbfcn-cli package."""

from setuptools import find_packages, setup

setup(
    name="mbfcn-cli",
    version="0.3.0",
    packages=find_packages(exclude=["tests", "tests.*"]),
    install_requires=[
        "typer[all]>=0.9.0",
        "rich>=13.0.0",
        "pyyaml>=6.0",
        "numpy>=1.22",
        "Pillow>=9.1.0",
    ],
    entry_points={
        "console_scripts": [
            "mbfcn-cli=mbfcn_cli.cli:main",
        ],
    },
    python_requires=">=3.8",
)
