from setuptools import setup, find_packages

setup(
    name="advfusion",
    version="0.1",
    packages=find_packages(exclude=["tests", "examples*"]),
    install_requires=[
        "numpy",
        "scipy",
        "Pillow",
        "tqdm",
        "cryptography",
    ],
    entry_points={"console_scripts": ["advfusion=src.ui.cli:main"]},
)
