"""Multi-pose face representation, score fusion, and template evaluation."""

__version__ = "0.1.0"
