"""Multi-dataset layer search, extraction, and variable-depth model growth."""

__version__ = "0.1.0"
