"""papyrion: binarization, scoring, augmentation, and writer retrieval for degraded manuscripts."""

__version__ = "0.1.0"
