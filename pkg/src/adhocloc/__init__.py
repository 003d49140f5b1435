"""2D multi-speaker localization with large ad-hoc microphone arrays."""

__version__ = "0.1.0"
