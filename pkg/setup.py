from setuptools import setup

setup(
    name="vlreward",
    version="0.1.0",
    description="Contrastive finetuning objectives for vision-language reward models, with a synthetic benchmark",
    packages=["vlreward"],
    python_requires=">=3.8",
    install_requires=["numpy", "scipy", "pyyaml", "pandas", "matplotlib", "tqdm"],
    extras_require={"test": ["pytest"]},
    entry_points={"console_scripts": ["vlreward=vlreward.cli:run"]},
)
