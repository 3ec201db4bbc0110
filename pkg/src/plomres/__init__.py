"""Learning statistically consistent realizations of stochastic PDE solutions.

The package trains a small dataset of solver trajectories, reduces it with a
Karhunen-Loeve expansion and a PCA, samples new latent realizations with a
diffusion-maps projected Ito SDE, and optionally tilts the sampler so that
learned realizations satisfy the governing equations in mean square.
"""

__version__ = "0.1.0"
