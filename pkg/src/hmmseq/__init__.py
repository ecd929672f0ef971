"""Bayesian detection of differentially expressed genes from RNA-seq counts
using chromosome-ordered hidden Markov priors on latent expression states."""

__version__ = "0.1.0"
