"""OFDM numerology and the CPE/ICI decomposition of phase noise.

Transforms use the unitary ``1/sqrt(N)`` normalization. The phase-noise
spectrum ``P`` uses ``1/N`` so that ``P[0]`` is the common phase error and
``sum |P|^2 == 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import circulant


@dataclass(frozen=True)
class Numerology:
    """5G NR FR1 numerology for one coherence block (defaults: mu = 0).

    ``n_cb`` and ``n_ct`` are derived from the coherence bandwidth and time.
    Pilots occupy the first OFDM symbol, so ``tau_p`` defaults to ``n_cb``.
    """

    delta_f: float = 15e3
    b_c: float = 180e3
    t_c: float = 1e-3
    t_ofdm: float = 71.4e-6
    pilot_symbols: int = 1

    def __post_init__(self):
        if min(self.delta_f, self.b_c, self.t_c, self.t_ofdm) <= 0:
            raise ValueError("numerology quantities must be positive")
        if self.n_cb < 1 or self.n_ct < 1:
            raise ValueError("coherence block holds no subcarrier or no symbol")
        if not 0 <= self.pilot_symbols <= self.n_ct:
            raise ValueError("pilot symbols must fit in the coherence time")

    @property
    def n_cb(self) -> int:
        return int(math.floor(self.b_c / self.delta_f + 1e-9))

    @property
    def n_ct(self) -> int:
        return int(math.floor(self.t_c / self.t_ofdm + 1e-9))

    @property
    def tau_c(self) -> int:
        return self.n_cb * self.n_ct

    @property
    def tau_p(self) -> int:
        return self.pilot_symbols * self.n_cb

    @property
    def data_symbols(self) -> int:
        return self.n_ct - self.pilot_symbols

    @property
    def symbol_rate(self) -> float:
        return 1.0 / self.t_ofdm

    def sample_rate(self, n: int | None = None) -> float:
        """Full-rate sampling frequency ``N * delta_f`` (``N`` defaults to ``n_cb``)."""
        return (self.n_cb if n is None else n) * self.delta_f

    def to_dict(self):
        return {"delta_f": self.delta_f, "b_c": self.b_c, "t_c": self.t_c,
                "t_ofdm": self.t_ofdm, "pilot_symbols": self.pilot_symbols}


@dataclass(frozen=True)
class OfdmSymbol:
    freq_symbols: np.ndarray
    power: float

    @classmethod
    def random(cls, n: int, power: float, rng) -> "OfdmSymbol":
        """Circular Gaussian symbols with average power ``power`` per subcarrier."""
        return cls(complex_normal(n, power, rng), power)

    def time_domain(self) -> np.ndarray:
        return idft(self.freq_symbols)


def complex_normal(shape, variance: float, rng) -> np.ndarray:
    """i.i.d. CN(0, variance) samples."""
    scale = math.sqrt(variance / 2.0)
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def idft(freq) -> np.ndarray:
    x = np.asarray(freq, dtype=complex)
    if x.size == 0:
        raise ValueError("empty input")
    return np.fft.ifft(x, norm="ortho")


def dft(time) -> np.ndarray:
    x = np.asarray(time, dtype=complex)
    if x.size == 0:
        raise ValueError("empty input")
    return np.fft.fft(x, norm="ortho")


def pn_freq_coeffs(theta) -> np.ndarray:
    """``P_i = (1/N) sum_n exp(j theta_n) exp(-j 2 pi n i / N)``."""
    theta = np.asarray(theta, dtype=float)
    return np.fft.fft(np.exp(1j * theta)) / theta.size


def received_with_ici(X, H, P, noise=None) -> np.ndarray:
    """Per-subcarrier received signal with CPE and ICI.

    ``Y_i = sum_l P[(i - l) mod N] H_l X_l + Z_i``; the ``l == i`` term is the
    CPE contribution ``P_0 H_i X_i``.
    """
    X = np.asarray(X, dtype=complex)
    H = np.asarray(H, dtype=complex)
    P = np.asarray(P, dtype=complex)
    n = X.size
    if H.size != n or P.size != n:
        raise ValueError("X, H and P must have equal length")
    Z = np.zeros(n, dtype=complex) if noise is None else np.asarray(noise, dtype=complex)
    if Z.size != n:
        raise ValueError("noise length mismatch")
    # circulant(P)[i, l] == P[(i - l) % N]
    return circulant(P) @ (H * X) + Z


def received_time_domain(X, h_time, theta, noise_time=None) -> np.ndarray:
    """Time-domain pipeline: rotate the circularly convolved symbol, then DFT.

    ``noise_time`` is added after the phase rotation; the result is returned
    in the frequency domain for comparison with :func:`received_with_ici`.
    """
    x = idft(X)
    h_time = np.asarray(h_time, dtype=complex)
    if h_time.size != x.size:
        h_time = np.concatenate([h_time, np.zeros(x.size - h_time.size, dtype=complex)])
    conv = np.fft.ifft(np.fft.fft(x) * np.fft.fft(h_time))
    y = np.exp(1j * np.asarray(theta, dtype=float)) * conv
    if noise_time is not None:
        y = y + noise_time
    return dft(y)


def ici_power(theta) -> dict:
    """CPE and ICI power of one symbol's phase trajectory; they sum to one."""
    P = pn_freq_coeffs(theta)
    cpe = float(abs(P[0]) ** 2)
    return {"cpe_power": cpe, "ici_power": float(np.sum(np.abs(P[1:]) ** 2))}
