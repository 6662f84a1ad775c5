"""Sparse inducing-point training of deep Gaussian-process regression.

The package combines exact and sparse GP regression with a Monte-Carlo EM
loop: whitened pCN sampling of the hidden layers alternates with birth/death
updates of an inducing set drawn from the observations.
"""

__version__ = "0.1.0"
