"""Oscillator phase-noise models.

Two families of local-oscillator (LO) models are provided:

* a free-running oscillator whose phase is a discrete Wiener process, and
* a hardware-inspired LO (a VCO locked by a PLL to a crystal reference)
  described by its one-sided phase-noise PSD in dBc/Hz.

Phase trajectories for the second family are produced by frequency-domain
colored-noise synthesis and can be checked against the target PSD with a
Welch estimate (:func:`estimate_psd`).

Unit conventions
----------------
Tables hold the single-sideband level ``L(f)`` in dBc/Hz. The one-sided
phase PSD used for synthesis is ``S_phi(f) = 2 * 10**(L/10)`` rad^2/Hz, and
:func:`estimate_psd` reports back in the same dBc/Hz convention, so a
synthesis/analysis round trip is unit-consistent.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import signal

PsdFunction = Callable[[np.ndarray], np.ndarray]

DEVICE_FILES = {
    "b200": "b200.csv",
    "usrp2954r": "usrp2954r.csv",
    "instrumental": "instrumental.csv",
}


# ---------------------------------------------------------------------------
# PSD tables
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PsdTable:
    """One-sided phase-noise PSD samples, ``level`` in dBc/Hz at ``offset`` Hz."""

    offsets: np.ndarray
    levels: np.ndarray
    name: str = ""

    def __post_init__(self):
        offsets = np.asarray(self.offsets, dtype=float).copy()
        levels = np.asarray(self.levels, dtype=float).copy()
        if offsets.ndim != 1 or offsets.shape != levels.shape:
            raise ValueError("offsets and levels must be 1-D arrays of equal length")
        if offsets.size < 2:
            raise ValueError("a PSD table needs at least 2 points")
        if np.any(offsets <= 0) or np.any(np.diff(offsets) <= 0):
            raise ValueError("PSD offsets must be positive and strictly increasing")
        if np.any(np.isnan(levels)):
            raise ValueError("PSD levels must not be NaN")
        offsets.setflags(write=False)
        levels.setflags(write=False)
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "levels", levels)

    @classmethod
    def from_points(cls, points: Sequence[Tuple[float, float]], name: str = "") -> "PsdTable":
        pts = list(points)
        return cls(np.array([p[0] for p in pts]), np.array([p[1] for p in pts]), name)

    @classmethod
    def from_csv(cls, path: Union[str, Path], name: Optional[str] = None) -> "PsdTable":
        """Read a ``offset_hz,dbc_per_hz`` CSV file."""
        path = Path(path)
        with path.open(newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or not {"offset_hz", "dbc_per_hz"} <= set(reader.fieldnames):
                raise ValueError(f"{path}: expected header 'offset_hz,dbc_per_hz'")
            rows = [(float(r["offset_hz"]), float(r["dbc_per_hz"])) for r in reader]
        return cls.from_points(rows, name=name if name is not None else path.stem)

    def to_csv(self, path: Union[str, Path]) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["offset_hz", "dbc_per_hz"])
            for f, level in zip(self.offsets, self.levels):
                writer.writerow([f"{f:.9g}", f"{level:.9g}"])

    def points(self):
        return list(zip(self.offsets.tolist(), self.levels.tolist()))

    def __call__(self, f):
        return interpolate_psd(self, f)


def device_table(name: str) -> PsdTable:
    """Return the bundled PSD of a named device (``b200``, ``usrp2954r``, ``instrumental``)."""
    key = name.lower()
    if key not in DEVICE_FILES:
        raise KeyError(f"unknown device {name!r}; choose from {sorted(DEVICE_FILES)}")
    ref = resources.files("cfpn") / "data" / DEVICE_FILES[key]
    with resources.as_file(ref) as path:
        return PsdTable.from_csv(path, name=key)


def load_psd(spec: Union[str, Path]) -> PsdTable:
    """Load a PSD table from a bundled device name or a CSV path."""
    if isinstance(spec, str) and spec.lower() in DEVICE_FILES:
        return device_table(spec)
    return PsdTable.from_csv(spec)


def interpolate_psd(table: PsdTable, f):
    """Piecewise-linear interpolation in (log10 f, dB); constant beyond the endpoints."""
    f_arr = np.asarray(f, dtype=float)
    if np.any(f_arr <= 0):
        raise ValueError("frequency offsets must be > 0")
    out = np.interp(np.log10(f_arr), np.log10(table.offsets), table.levels)
    return out if out.ndim else float(out)


def scale_psd_to_carrier(xo_level, f_c: float, f_xo: float):
    """Multiply an XO PSD up to the carrier: ``L + 10 log10(f_c / f_xo)``."""
    if f_c <= 0 or f_xo <= 0:
        raise ValueError("f_c and f_xo must be > 0")
    return xo_level + 10.0 * math.log10(f_c / f_xo)


def dbc_to_rad2(level_dbc):
    """dBc/Hz (single sideband) to one-sided phase PSD in rad^2/Hz."""
    return 2.0 * np.power(10.0, np.asarray(level_dbc, dtype=float) / 10.0)


def rad2_to_dbc(s_phi):
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(np.asarray(s_phi, dtype=float) / 2.0)


# ---------------------------------------------------------------------------
# Model parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WienerParams:
    """Innovation variance of a free-running oscillator, in rad^2 per step."""

    sigma2: float

    def __post_init__(self):
        if not self.sigma2 >= 0:
            raise ValueError(f"innovation variance must be >= 0, got {self.sigma2}")

    @classmethod
    def from_oscillator(cls, fc: float, c: float, dt: float) -> "WienerParams":
        """``sigma2 = 4 pi^2 fc^2 c dt`` for oscillator constant ``c`` (s)."""
        return cls(4.0 * math.pi ** 2 * fc ** 2 * c * dt)


@dataclass(frozen=True)
class HardwareLoParams:
    xo: PsdTable
    pll_vco: PsdTable
    f_xo: float
    f_pll: float
    f_c: float

    def __post_init__(self):
        if self.f_xo <= 0 or self.f_pll <= 0:
            raise ValueError("f_xo and f_pll must be > 0")
        if self.f_c < self.f_xo:
            raise ValueError("carrier frequency must not be below the XO frequency")

    def __call__(self, f):
        return composite_lo_psd(self, f)


def composite_lo_psd(params: HardwareLoParams, f):
    """Closed-loop LO PSD in dBc/Hz.

    The XO contribution is scaled to the carrier and attenuated by the
    single-pole loop response ``1/sqrt(1 + (f/f_pll)^2)``; it is then added
    in linear power to the PLL+VCO closed-loop PSD.
    """
    f_arr = np.asarray(f, dtype=float)
    if np.any(f_arr <= 0):
        raise ValueError("frequency offsets must be > 0")
    vco = np.power(10.0, interpolate_psd(params.pll_vco, f_arr) / 10.0)
    xo_db = scale_psd_to_carrier(interpolate_psd(params.xo, f_arr), params.f_c, params.f_xo)
    xo = np.power(10.0, xo_db / 10.0) / np.sqrt(1.0 + (f_arr / params.f_pll) ** 2)
    out = 10.0 * np.log10(vco + xo)
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# Traces
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PhaseTrace:
    """Phase samples in radians at ``sample_rate`` Hz."""

    samples: np.ndarray
    sample_rate: float
    model_id: str = ""
    seed: Optional[int] = None

    def __post_init__(self):
        s = np.array(self.samples, dtype=float)
        if s.ndim != 1 or s.size < 1:
            raise ValueError("a phase trace needs at least one sample")
        if not np.all(np.isfinite(s)):
            raise ValueError("phase samples must be finite")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be > 0")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)

    def __len__(self):
        return self.samples.size

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.samples.size) / self.sample_rate

    def drift(self) -> np.ndarray:
        """Phase relative to the first sample."""
        return self.samples - self.samples[0]

    def max_drift(self) -> float:
        return float(np.max(np.abs(self.drift())))

    def increment_variance(self) -> float:
        if self.samples.size < 2:
            return 0.0
        return float(np.var(np.diff(self.samples)))


def _as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def wiener_increments(sigma2: float, shape, rng) -> np.ndarray:
    """Wiener phase paths of shape ``(..., n)`` starting at zero."""
    if not sigma2 >= 0:
        raise ValueError(f"innovation variance must be >= 0, got {sigma2}")
    shape = tuple(np.atleast_1d(shape))
    out = np.zeros(shape)
    if shape[-1] > 1 and sigma2 > 0:
        steps = rng.normal(0.0, math.sqrt(sigma2), size=shape[:-1] + (shape[-1] - 1,))
        out[..., 1:] = np.cumsum(steps, axis=-1)
    return out


def wiener_trace(params: WienerParams, n: int, rng, sample_rate: float = 1 / 71.4e-6,
                 seed: Optional[int] = None) -> PhaseTrace:
    """Wiener phase trace of ``n`` samples; ``samples[0] == 0``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if seed is None and not isinstance(rng, np.random.Generator):
        seed = rng
    gen = _as_generator(rng)
    path = wiener_increments(params.sigma2, (n,), gen)
    return PhaseTrace(path, sample_rate, model_id=f"wiener(sigma2={params.sigma2:g})", seed=seed)


# ---------------------------------------------------------------------------
# Colored-noise synthesis and Welch analysis
# ---------------------------------------------------------------------------


def _next_pow2(n: int) -> int:
    return 1 << max(0, int(n - 1).bit_length())


def _target_rad2(psd, freqs: np.ndarray, band) -> np.ndarray:
    """Target one-sided PSD (rad^2/Hz) on ``freqs`` (all > 0), zero outside ``band``."""
    if isinstance(psd, (int, float)):
        level = np.full(freqs.shape, float(psd))
    else:
        level = np.asarray(psd(freqs), dtype=float)
        level = np.broadcast_to(level, freqs.shape)
    s = dbc_to_rad2(level)
    if band is not None:
        lo, hi = band
        s = np.where((freqs >= lo) & (freqs <= hi), s, 0.0)
    return s


def synthesize_batch(psd, sample_rate: float, n: int, count: int, rng, band=None) -> np.ndarray:
    """Independent phase traces of shape ``(count, n)`` with one-sided PSD ``psd``.

    ``psd`` maps frequency offsets (Hz) to dBc/Hz; ``band=(lo, hi)`` zeroes the
    target outside ``[lo, hi]``. Non-power-of-two ``n`` is synthesized at the
    next power of two and truncated.
    """
    if sample_rate <= 0:
        raise ValueError("sample_rate must be > 0")
    if n < 1:
        raise ValueError("n must be >= 1")
    gen = _as_generator(rng)
    n_fft = max(2, _next_pow2(n))
    freqs = np.fft.rfftfreq(n_fft, d=1.0 / sample_rate)
    df = sample_rate / n_fft
    s = np.zeros(freqs.size)
    s[1:] = _target_rad2(psd, freqs[1:], band)
    # interior bins carry S*df of phase variance; the Nyquist bin half of that
    power = n_fft ** 2 * s * df / 2.0
    coeffs = (gen.standard_normal((count, freqs.size)) + 1j * gen.standard_normal((count, freqs.size)))
    coeffs *= np.sqrt(power / 2.0)
    coeffs[:, 0] = 0.0
    # Hermitian symmetry: the Nyquist coefficient must be real
    coeffs[:, -1] = gen.standard_normal(count) * np.sqrt(power[-1])
    traces = np.fft.irfft(coeffs, n=n_fft, axis=-1)
    return traces[:, :n]


def synthesize_pn(psd, sample_rate: float, n: int, rng, band=None,
                  model_id: str = "psd", seed: Optional[int] = None) -> PhaseTrace:
    """Synthesize a phase trace whose one-sided PSD follows ``psd`` (dBc/Hz).

    ``psd`` may be a callable (e.g. a :class:`PsdTable` or
    :class:`HardwareLoParams`), a constant level, or ``-inf`` for no noise.
    Each positive-frequency bin receives a circular complex Gaussian weight
    whose expected power is ``S(f_k) * df``; the DC bin is zero.
    """
    if seed is None and not isinstance(rng, np.random.Generator):
        seed = rng
    trace = synthesize_batch(psd, sample_rate, n, 1, rng, band=band)[0]
    return PhaseTrace(trace, sample_rate, model_id=model_id, seed=seed)


def welch_psd(samples: np.ndarray, sample_rate: float, segments: int):
    """Welch one-sided phase PSD in rad^2/Hz.

    Hann window, 50 % overlap, segment length ``len(samples) // segments``,
    mean removed per segment. The Nyquist bin is doubled like the interior
    bins so the result is a density at every positive frequency.
    """
    x = np.asarray(samples, dtype=float)
    if segments < 1:
        raise ValueError("segments must be >= 1")
    if x.size < 4 * segments:
        raise ValueError(f"trace too short: {x.size} samples for {segments} segments")
    nperseg = x.size // segments
    freqs, pxx = signal.welch(x, fs=sample_rate, window="hann", nperseg=nperseg,
                              noverlap=nperseg // 2, detrend="constant",
                              return_onesided=True, scaling="density")
    if nperseg % 2 == 0:
        pxx[-1] *= 2.0
    return freqs, pxx


def estimate_psd(trace: PhaseTrace, segments: int = 16) -> PsdTable:
    """Welch estimate of a trace's phase noise as a :class:`PsdTable` (DC dropped).

    Bins with zero power are reported as ``-inf`` dBc/Hz.
    """
    freqs, pxx = welch_psd(trace.samples, trace.sample_rate, segments)
    return PsdTable(freqs[1:], rad2_to_dbc(pxx[1:]), name=f"welch({trace.model_id})")


def cpe_sequence(ue_trace: PhaseTrace, ap_trace: PhaseTrace) -> np.ndarray:
    """Per-symbol CPE of a UE-AP link, referenced to symbol 0 (element 0 is exactly 1)."""
    ue = np.asarray(ue_trace.samples if isinstance(ue_trace, PhaseTrace) else ue_trace, dtype=float)
    ap = np.asarray(ap_trace.samples if isinstance(ap_trace, PhaseTrace) else ap_trace, dtype=float)
    if ue.shape != ap.shape:
        raise ValueError(f"trace length mismatch: {ue.shape} vs {ap.shape}")
    theta = (ue - ue[0]) + (ap - ap[0])
    out = np.exp(1j * theta)
    out[0] = 1.0
    return out


# ---------------------------------------------------------------------------
# Oscillator models used by the system simulator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoPhaseNoise:
    """An ideal oscillator."""

    kind = "none"

    @property
    def model_id(self) -> str:
        return "none"

    def symbol_phases(self, count: int, n_symbols: int, t_ofdm: float, rng) -> np.ndarray:
        return np.zeros((count, n_symbols))

    def to_dict(self):
        return {"kind": "none"}


@dataclass(frozen=True)
class WienerOscillator:
    """Free-running oscillator with ``sigma2`` rad^2 innovation per OFDM symbol.

    ``scope="oscillator"`` applies ``sigma2`` to every UE and AP oscillator;
    ``scope="link"`` splits it so the summed UE+AP link phase has ``sigma2``.
    """

    sigma2: float = 0.23
    scope: str = "oscillator"

    kind = "wiener"

    def __post_init__(self):
        WienerParams(self.sigma2)
        if self.scope not in ("oscillator", "link"):
            raise ValueError(f"scope must be 'oscillator' or 'link', got {self.scope!r}")

    @property
    def model_id(self) -> str:
        suffix = "" if self.scope == "oscillator" else "-link"
        return f"wiener-{self.sigma2:g}{suffix}"

    @property
    def per_oscillator_sigma2(self) -> float:
        return self.sigma2 if self.scope == "oscillator" else self.sigma2 / 2.0

    def symbol_phases(self, count: int, n_symbols: int, t_ofdm: float, rng) -> np.ndarray:
        return wiener_increments(self.per_oscillator_sigma2, (count, n_symbols), rng)

    def to_dict(self):
        return {"kind": "wiener", "sigma2": self.sigma2, "scope": self.scope}


@dataclass(frozen=True)
class DeviceOscillator:
    """Hardware-inspired LO driven by a PSD.

    ``psd`` is either a tabulated LO PSD (:class:`PsdTable`, used as is) or a
    :class:`HardwareLoParams` composite. Symbol-rate traces are synthesized
    over ``synth_length`` symbols with the target limited to
    ``[band_low, f_s/2]`` and the first ``n_symbols`` samples are kept.
    """

    psd: Union[PsdTable, HardwareLoParams]
    name: str = ""
    band_low: float = 100.0
    synth_length: int = 256
    source: dict = field(default_factory=dict, compare=False)

    kind = "device"

    def __post_init__(self):
        if self.band_low <= 0:
            raise ValueError("band_low must be > 0")
        if self.synth_length < 1:
            raise ValueError("synth_length must be >= 1")

    @property
    def model_id(self) -> str:
        if self.name:
            return self.name
        if isinstance(self.psd, PsdTable) and self.psd.name:
            return self.psd.name
        return "device"

    def symbol_phases(self, count: int, n_symbols: int, t_ofdm: float, rng) -> np.ndarray:
        fs = 1.0 / t_ofdm
        length = max(self.synth_length, n_symbols)
        traces = synthesize_batch(self.psd, fs, length, count, rng, band=(self.band_low, fs / 2.0))
        return traces[:, :n_symbols]

    def to_dict(self):
        out = {"kind": "device", "name": self.model_id, "band_low": self.band_low,
               "synth_length": self.synth_length}
        if isinstance(self.psd, PsdTable):
            out["lo_psd"] = self.psd.points()
        else:
            out.update({"xo_psd": self.psd.xo.points(), "pll_psd": self.psd.pll_vco.points(),
                        "f_xo": self.psd.f_xo, "f_pll": self.psd.f_pll, "f_c": self.psd.f_c})
        return out


OscillatorModel = Union[NoPhaseNoise, WienerOscillator, DeviceOscillator]


def oscillator_from_dict(spec: dict, base_dir: Optional[Path] = None) -> OscillatorModel:
    """Build an oscillator model from a config mapping.

    Recognised ``kind`` values: ``none``, ``wiener`` (``sigma2`` or
    ``fc``/``c``/``dt``, optional ``scope``) and ``device`` (either ``lo_psd``,
    a bundled device name or CSV path, or ``xo_psd``/``pll_psd`` with
    ``f_xo``, ``f_pll``, ``f_c``).
    """
    kind = spec.get("kind")
    if kind == "none":
        return NoPhaseNoise()
    if kind == "wiener":
        if "sigma2" in spec:
            sigma2 = float(spec["sigma2"])
        else:
            sigma2 = WienerParams.from_oscillator(float(spec["fc"]), float(spec["c"]), float(spec["dt"])).sigma2
        return WienerOscillator(sigma2, spec.get("scope", "oscillator"))
    if kind == "device":
        def _table(value):
            if isinstance(value, list):
                return PsdTable.from_points(value)
            if isinstance(value, str) and value.lower() in DEVICE_FILES:
                return device_table(value)
            p = Path(value)
            if base_dir is not None and not p.is_absolute():
                p = base_dir / p
            return PsdTable.from_csv(p)

        extra = {k: spec[k] for k in ("band_low", "synth_length") if k in spec}
        if "lo_psd" in spec:
            table = _table(spec["lo_psd"])
            return DeviceOscillator(table, name=spec.get("name", table.name), source=dict(spec), **extra)
        params = HardwareLoParams(_table(spec["xo_psd"]), _table(spec["pll_psd"]),
                                  float(spec["f_xo"]), float(spec["f_pll"]), float(spec["f_c"]))
        return DeviceOscillator(params, name=spec.get("name", "hardware-lo"), source=dict(spec), **extra)
    raise ValueError(f"unknown oscillator kind {kind!r}")


def log_band_average(freqs: np.ndarray, values: np.ndarray, lo: float, hi: float,
                     bands_per_decade: int = 5):
    """Average a linear PSD over log-spaced bands covering ``[lo, hi]``.

    Returns ``(centers, means, counts)``; ``centers`` are geometric band
    centres, empty bands are skipped. The last band is closed at ``hi``.
    """
    freqs = np.asarray(freqs, dtype=float)
    values = np.asarray(values, dtype=float)
    n_bands = max(1, int(math.ceil(bands_per_decade * math.log10(hi / lo) - 1e-9)))
    edges = lo * np.power(10.0, np.arange(n_bands + 1) / bands_per_decade)
    edges[-1] = hi
    centers, means, counts = [], [], []
    for i, (a, b) in enumerate(zip(edges[:-1], edges[1:])):
        upper = freqs <= b if i == n_bands - 1 else freqs < b
        mask = (freqs >= a) & upper
        if not mask.any():
            continue
        centers.append(math.sqrt(a * b))
        means.append(values[mask].mean())
        counts.append(int(mask.sum()))
    return np.array(centers), np.array(means), np.array(counts)
