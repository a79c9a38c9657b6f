"""Desk-scale quantum Monte Carlo with sparse AO kernels and a fault-tolerant runtime."""

__version__ = "0.1.0"
