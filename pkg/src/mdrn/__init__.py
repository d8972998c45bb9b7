"""MDRN single-image denoising toolkit."""
