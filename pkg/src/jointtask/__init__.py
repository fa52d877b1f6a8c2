"""Joint localization/segmentation networks trained with latent box adjustments."""

__version__ = "0.1.0"
