"""Semi-amortized variational inference for latent-variable sequence models."""

__version__ = "0.1.0"
