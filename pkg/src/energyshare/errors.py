"""Base exception for the platform; concrete errors live next to their modules."""


class EnergyShareError(Exception):
    """Base class for all errors raised by this package."""
