"""Guided diffusion posterior sampling over analytic priors."""

__version__ = "0.1.0"
