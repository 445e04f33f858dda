"""Second-order meta-learning for spiking networks trained with surrogate gradients."""

__version__ = "0.1.0"
