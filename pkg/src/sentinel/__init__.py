"""Explainable detection of deviating sensors in virtual Ozone sensor arrays."""

__version__ = "0.1.0"
