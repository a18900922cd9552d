"""Spherical-convolution GAN for saliency prediction on equirectangular 360° video."""

__version__ = "0.1.0"
