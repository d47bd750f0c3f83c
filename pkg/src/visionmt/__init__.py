"""Multi-task visual representation learning at toy scale."""

__version__ = "0.1.0"
