"""Height-sliced BEV feature construction with slice attention fusion."""

__version__ = "0.1.0"
