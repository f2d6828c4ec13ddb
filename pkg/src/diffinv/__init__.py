"""Score-based diffusion posterior sampling for PDE-constrained inverse problems."""
