"""Definition-driven interpretation workbench for toy NLP classifiers."""

__version__ = "0.1.0"
