"""Phase-noise impact on uplink spectral efficiency of OFDM cell-free massive MIMO."""

__version__ = "0.1.0"
