"""Generative denoisers on exactly solvable targets.

The package trains a conditional generator to sample Gaussian denoising
posteriors at every noise level, verifies it against closed-form Gaussian
mixture oracles, and uses it (or the oracle itself) inside marginal-preserving
annealed samplers and a split Gibbs solver for noisy inverse problems.
"""

__version__ = "0.1.0"
