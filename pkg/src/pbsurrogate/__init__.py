"""PAC-Bayesian Gibbs posteriors with convex surrogate losses for classification."""

__version__ = "0.1.0"
