"""Sound source localization (SRP-PHAT-HSDA) and multi-source Kalman tracking."""

__version__ = "0.1.0"
