from setuptools import setup, find_packages

setup(
    name="autoencoder_dynamics",
    version="0.1.0",
    packages=find_packages(exclude=["tests"]),
    python_requires=">=3.10",
    install_requires=[
        'numpy>=1.26.0',
        'pandas>=2.2.0',
        'plotly>=5.18.0',
        'kaleido==0.2.1',
        'python-dotenv>=1.0.0',
        'python-json-logger>=2.0.7',
    ],
    extras_require={
        'dev': [
            'pytest>=8.0.0',
            'pytest-cov>=4.1.0',
            'hypothesis>=6.98.0',
            'scipy>=1.12.0',
        ],
    },
    entry_points={
        'console_scripts': [
            'autoencoder-dynamics=src.frontend.experiment_cli:main',
        ],
    },
)
