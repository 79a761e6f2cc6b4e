"""Label-encoding intermediate supervision for object detector training."""

__version__ = "0.1.0"
