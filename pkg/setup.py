import setuptools

setuptools.setup(
    name="ttpk",
    version="0.1.0",
    author="NVIDIA",
    description="Test-time personalized keypoint estimation with a differentiable numpy core",
    long_description="",
    long_description_content_type="text/markdown",
    license="NVSCL",
    packages=setuptools.find_packages(include=["ttpk", "ttpk.*"]),
    classifiers=[
        "Programming Language :: Python :: 3.8",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
        "License :: Other/Proprietary License",
        "Operating System :: OS Independent",
    ],
    install_requires=["numpy", "scipy", "tomli; python_version<'3.11'"],
    extras_require={"vis": ["matplotlib"]},
    entry_points={"console_scripts": ["ttpk=ttpk.cli:main"]},
    python_requires=">=3.8"
)
