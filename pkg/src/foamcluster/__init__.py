"""Multimaterial soap-film energy minimization and stability analysis."""

__version__ = "0.1.0"
