"""First-token-probability guided retrieval-augmented MCQA."""

__version__ = "0.1.0"
