"""Uncertainty-aware remaining-time prediction for process event logs."""
from remtime import models  # noqa

__version__ = "0.1.0"
