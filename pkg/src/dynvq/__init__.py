"""Sequential VQ autoencoder for speech synthesis with a codebook that grows from unpaired data."""

__version__ = "0.1.0"
