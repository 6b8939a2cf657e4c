"""Two-stage latent forecasting of 2D flows: spectral data generation, a
disentangled reduced-order model, and a frozen-backbone temporal processor."""

__version__ = "0.1.0"
