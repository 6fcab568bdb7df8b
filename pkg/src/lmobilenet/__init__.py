"""L-Mobilenet and baseline lightweight CNNs on a from-scratch numpy engine."""

__version__ = "0.1.0"
