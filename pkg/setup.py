from setuptools import setup, find_packages
setup(
    name="clusterfl",
    version="1.0.0",
    packages=['clusterfl', 'clusterfl.utility'],
    package_data={'clusterfl': ['config/*.yaml', 'config/paper/*.yaml']},
    scripts=[],

    install_requires=['numpy', 'pyyaml', 'scipy>=1.7.0', 'pandas', 'matplotlib', 'torch>=1.12'],
    extras_require={'test': ['pytest']},
    entry_points={
        'console_scripts': ['clusterfl=clusterfl.simulate:main'],
    },

    # metadata to display on PyPI
    description="Cluster-aware wireless federated learning simulator with PPO resource allocation",
    license="MIT",
    keywords="federated learning affinity propagation wasserstein convergence bound ppo wireless",
)
