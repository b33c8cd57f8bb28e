"""Search-space evolution and one-shot search for windowed vision transformers."""

__version__ = "0.1.0"
