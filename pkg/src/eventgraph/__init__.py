"""Graph convolutional outcome prediction for event logs, with a built-in tuner."""

__version__ = "0.1.0"
