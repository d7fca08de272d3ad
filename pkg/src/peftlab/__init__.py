"""Parameter-efficient fine-tuning laboratory on a toy encoder-decoder transformer."""

__version__ = "0.1.0"
