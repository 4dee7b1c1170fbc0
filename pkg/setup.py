from setuptools import find_packages, setup

setup(
    name='flotempc',
    version='1.0.0',
    description='Economic model predictive control of a simulated froth flotation cell',
    packages=find_packages(exclude=['tests']),
    package_data={'flotempc': ['data/*.json']},
    python_requires='>=3.8',
    install_requires=[
        'numpy>=1.20',
        'scipy>=1.6',
        'matplotlib>=3.3',
        'Jinja2>=2.11',
        'jsonschema>=3.2',
    ],
    extras_require={'test': ['pytest>=6.0']},
    entry_points={'console_scripts': ['flotempc=flotempc.cli:main']},
)
