"""ALSFRS-R progression prediction from clinical visits and daily sensor series."""

__version__ = "0.1.0"
