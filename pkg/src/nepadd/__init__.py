"""Entity-aware partial spoof detection on synthetic frame features."""

__version__ = "0.1.0"
