import pathlib
from setuptools import setup


# The directory containing this file
HERE = pathlib.Path(__file__).parent
README = (HERE / "README.md").read_text()

setup(
    name="otta",
    version="0.1.0.dev1",
    description="Differentiable 1D optimal-transport alignment for monotonic sequence-to-sequence tasks: "
                "sequence distance, OTTC loss, reference CTC and alignment metrics.",
    long_description=README,
    long_description_content_type="text/markdown",
    url="",
    author="",
    license="Apache-2.0 license",
    classifiers=[
        "Programming Language :: Python :: 3",
        "License :: OSI Approved :: Apache Software License",
        "Operating System :: OS Independent",
    ],
    package_dir={'': 'src'},
    packages=["otta"],
    include_package_data=True,
    install_requires=['numpy', 'scipy', 'PyYAML'],
    entry_points={
        "console_scripts": [
            "otta=otta.__main__:main",
        ]
    },
)
