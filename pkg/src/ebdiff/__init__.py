"""Early-bird and timestep-aware early-bird tickets for toy diffusion models."""

__version__ = "0.1.0"
