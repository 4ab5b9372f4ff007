"""
Spiking networks trained for anytime inference: LIF dynamics on a small autodiff tape,
spatial-temporal regularisation, softmax cutoff and ensemble uncertainty.
"""

__version__ = "0.1.0"
