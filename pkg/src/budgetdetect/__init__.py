"""Budget-aware temporal activity detection with a recurrent
frame-selection policy trained by policy gradient."""

__version__ = "0.1.0"
