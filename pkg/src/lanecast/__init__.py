"""Lane-change classification and prediction from stacked visual cues."""

__version__ = "0.1.0"
