"""Multi-label text classification with token attributions and their evaluation."""

__version__ = "0.1.0"
