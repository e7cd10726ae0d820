"""HemCNN: hemispheric CNN for fNIRS hand-activity decoding, with the conventional baselines."""

__version__ = "0.1.0"
