"""Few-shot object counting and detection."""
__version__ = "0.1.0"
