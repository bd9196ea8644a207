"""Volumetric human capture: PVH construction, dual-loss 3D autoencoder, LSTM smoothing."""

__version__ = "0.1.0"
