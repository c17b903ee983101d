"""Distributed sum-of-trees regression with a master/worker MCMC sampler.

Fits Bayesian additive regression tree models on data sharded across worker
processes that exchange only fixed-size sufficient statistics, plus posterior
prediction, Sobol sensitivity analysis, benchmark data generation, and a
scalability-measurement harness.
"""

__version__ = "0.1.0"
