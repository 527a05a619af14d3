from setuptools import setup

setup(
    name="matnet",
    version="0.1.0",
    description="Hierarchical variational autoencoders with merge modules for image modeling and imputation",
    license="LGPL",
    packages=["matnet", "matnet.actions", "matnet.likelihood", "matnet.helpers"],
    entry_points={"console_scripts": ["matnet=matnet.main:main"]},
    python_requires=">=3.7",
    install_requires=["numpy>=1.20", "scipy>=1.5", "matplotlib>=3.3"],
)
