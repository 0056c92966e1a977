"""Character-level chemical language models for focused molecule generation."""

__version__ = "0.1.0"
