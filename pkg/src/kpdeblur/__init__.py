"""Kernel-prior-guided frequency-domain image deblurring on a numpy autodiff engine."""

__version__ = "0.1.0"
