"""statecap: capture, archive, and restore the absolute state of a computation."""

__version__ = "0.1.0"
