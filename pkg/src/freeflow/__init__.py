"""Free-flow speed estimation from overhead imagery and road metadata."""

__version__ = "0.1.0"
