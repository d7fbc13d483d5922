"""Source-free domain adaptation with rationale-consolidated pseudo labels."""

__version__ = "0.1.0"
