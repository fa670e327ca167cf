"""Dual-branch ConvLSTM attention segmentation of lung lesions in CT, with
preprocessing, training, quantification and agreement statistics."""

__version__ = "0.1.0"
