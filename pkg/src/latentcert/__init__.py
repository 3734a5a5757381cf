"""Learn, check and certify discrete latent abstractions of continuous MDPs."""

__version__ = "0.1.0"
