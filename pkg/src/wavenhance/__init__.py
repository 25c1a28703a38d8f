"""Low-light image enhancement with a wavelet U-Net, built on a small numpy autodiff engine."""

__version__ = "0.1.0"
