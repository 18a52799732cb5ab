"""Masked-autoencoding audio spectrogram transformer pretraining at desk scale."""

__version__ = "0.1.0"
