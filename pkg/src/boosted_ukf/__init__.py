"""Boosted UKF: spacecraft inertia estimation with a learned virtual sensor."""

__version__ = "0.1.0"
