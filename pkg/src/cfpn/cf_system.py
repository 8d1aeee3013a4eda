"""User-centric cell-free massive MIMO uplink with per-symbol phase noise.

Array layout conventions used throughout:

* ``h``: channels ``(E, K, M, L)`` for an ensemble of ``E`` realizations
  (UE ``k``, AP ``m``, antenna ``l``); a single realization drops ``E``.
* ``serving``: boolean ``(M, K)``; ``serving[m, k]`` means ``D_mk = I_L``.
* ``theta``: link phase ``(E, M, K, T)`` in radians, referenced to symbol 0.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from .ofdm import complex_normal

log = logging.getLogger(__name__)

PINV_RTOL = 1e-12
_CHUNK_ELEMS = 1 << 21


class CombinerKind(str, Enum):
    MR = "MR"
    MMSE = "MMSE"


@dataclass(frozen=True)
class PathlossModel:
    lambda0: float = -35.3
    eta: float = 3.76
    d0: float = 1.0
    sigma_sf: float = 10.0


@dataclass(frozen=True)
class NetworkConfig:
    """Deployment and radio parameters.

    ``area`` is the side of the square in metres. Noise power on one
    coherence block is ``noise_psd + 10 log10(bandwidth)`` dBm.
    ``cluster_top_n`` and ``cluster_threshold_db`` are alternative clustering
    rules; the threshold rule is used when it is set.
    """

    M: int = 100
    L: int = 4
    K: int = 40
    area: float = 400.0
    fc: float = 3.5e9
    p: float = 0.1
    noise_psd: float = -174.0
    bandwidth: float = 180e3
    pathloss: PathlossModel = field(default_factory=PathlossModel)
    cluster_top_n: int = 5
    cluster_threshold_db: Optional[float] = None
    correlation: str = "uncorrelated"
    angular_spread_deg: float = 10.0

    def __post_init__(self):
        for name in ("M", "L", "K"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.area <= 0 or self.p < 0 or self.bandwidth <= 0:
            raise ValueError("area and bandwidth must be > 0, p >= 0")
        if self.cluster_top_n < 1:
            raise ValueError("cluster_top_n must be >= 1")
        if self.correlation not in ("uncorrelated", "local_scattering"):
            raise ValueError(f"unknown correlation model {self.correlation!r}")

    @property
    def W(self) -> int:
        return self.M * self.L

    @property
    def noise_var(self) -> float:
        """Noise power in W over ``bandwidth``."""
        dbm = self.noise_psd + 10.0 * math.log10(self.bandwidth)
        return 10.0 ** ((dbm - 30.0) / 10.0)

    def to_dict(self):
        out = {k: getattr(self, k) for k in ("M", "L", "K", "area", "fc", "p", "noise_psd",
                                              "bandwidth", "cluster_top_n", "cluster_threshold_db",
                                              "correlation", "angular_spread_deg")}
        out["pathloss"] = {k: getattr(self.pathloss, k) for k in ("lambda0", "eta", "d0", "sigma_sf")}
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "NetworkConfig":
        data = dict(data)
        if "pathloss" in data:
            data["pathloss"] = PathlossModel(**data["pathloss"])
        return cls(**data)


@dataclass(frozen=True)
class NetworkRealization:
    ap_positions: np.ndarray
    ue_positions: np.ndarray
    beta: np.ndarray
    R: np.ndarray
    serving: np.ndarray

    @property
    def M(self) -> int:
        return self.beta.shape[0]

    @property
    def K(self) -> int:
        return self.beta.shape[1]

    @property
    def L(self) -> int:
        return self.R.shape[-1]

    def D(self, m: int, k: int) -> np.ndarray:
        return np.eye(self.L) if self.serving[m, k] else np.zeros((self.L, self.L))

    def collective_R(self, k: int) -> np.ndarray:
        """Block-diagonal ``W x W`` correlation matrix of UE ``k``."""
        W = self.M * self.L
        out = np.zeros((W, W), dtype=complex)
        for m in range(self.M):
            s = slice(m * self.L, (m + 1) * self.L)
            out[s, s] = self.R[m, k]
        return out

    def collective_D(self, k: int) -> np.ndarray:
        return np.diag(np.repeat(self.serving[:, k], self.L).astype(float))


def pathloss_db(d, cfg: NetworkConfig, shadow=0.0):
    """Large-scale gain in dB: ``lambda0 - 10 eta log10(max(d, d0)/d0) + shadow``."""
    d = np.asarray(d, dtype=float)
    if np.any(d <= 0):
        raise ValueError("distance must be > 0")
    pl = cfg.pathloss
    out = pl.lambda0 - 10.0 * pl.eta * np.log10(np.maximum(d, pl.d0) / pl.d0) + shadow
    return out if out.ndim else float(out)


def form_clusters(beta: np.ndarray, top_n: Optional[int] = None,
                  threshold_db: Optional[float] = None) -> np.ndarray:
    """User-centric AP clusters as a boolean ``(M, K)`` serving matrix.

    With ``threshold_db`` each UE is served by every AP whose gain is within
    ``threshold_db`` of its strongest AP; otherwise by its ``top_n``
    strongest APs. Each UE always keeps at least its strongest AP.
    """
    beta = np.asarray(beta, dtype=float)
    M, K = beta.shape
    serving = np.zeros((M, K), dtype=bool)
    if threshold_db is not None:
        beta_db = 10.0 * np.log10(beta)
        serving = beta_db >= beta_db.max(axis=0, keepdims=True) - threshold_db
    else:
        n = min(M, 5 if top_n is None else int(top_n))
        if n < 1:
            raise ValueError("top_n must be >= 1")
        # stable sort keeps ties deterministic
        order = np.argsort(-beta, axis=0, kind="stable")[:n]
        serving[order, np.arange(K)[None, :]] = True
    serving[np.argmax(beta, axis=0), np.arange(K)] = True
    return serving


def local_scattering_R(beta: float, L: int, azimuth: float, spread: float) -> np.ndarray:
    """Gaussian local-scattering correlation of a half-wavelength ULA (small-spread form)."""
    dist = np.arange(L)[:, None] - np.arange(L)[None, :]
    ph = np.exp(1j * math.pi * dist * math.sin(azimuth))
    amp = np.exp(-0.5 * (spread * math.pi * dist * math.cos(azimuth)) ** 2)
    return beta * ph * amp


def drop_network(cfg: NetworkConfig, rng) -> NetworkRealization:
    """Uniform AP/UE drop in the square, log-normal shadowing, clustering."""
    ap = rng.uniform(0.0, cfg.area, size=(cfg.M, 2))
    ue = rng.uniform(0.0, cfg.area, size=(cfg.K, 2))
    d = np.linalg.norm(ap[:, None, :] - ue[None, :, :], axis=-1)
    d = np.maximum(d, 1e-9)
    shadow = cfg.pathloss.sigma_sf * rng.standard_normal((cfg.M, cfg.K))
    beta = 10.0 ** (pathloss_db(d, cfg, shadow) / 10.0)
    if cfg.correlation == "uncorrelated":
        R = beta[:, :, None, None] * np.eye(cfg.L)[None, None]
        R = R.astype(complex)
    else:
        delta = ue[None, :, :] - ap[:, None, :]
        az = np.arctan2(delta[..., 1], delta[..., 0])
        spread = math.radians(cfg.angular_spread_deg)
        R = np.empty((cfg.M, cfg.K, cfg.L, cfg.L), dtype=complex)
        for m in range(cfg.M):
            for k in range(cfg.K):
                R[m, k] = local_scattering_R(beta[m, k], cfg.L, az[m, k], spread)
    serving = form_clusters(beta, top_n=cfg.cluster_top_n, threshold_db=cfg.cluster_threshold_db)
    return NetworkRealization(ap, ue, beta, R, serving)


def _psd_sqrt(R: np.ndarray) -> np.ndarray:
    """Hermitian square roots of a stack of correlation matrices."""
    R = np.asarray(R, dtype=complex)
    scale = np.abs(R).max() if R.size else 0.0
    if np.abs(R - np.conj(np.swapaxes(R, -1, -2))).max(initial=0.0) > 1e-12 * scale:
        raise ValueError("correlation matrix is not Hermitian")
    w, U = np.linalg.eigh(R)
    wmax = np.abs(w).max(axis=-1, keepdims=True)
    if np.any(w < -1e-10 * wmax):
        raise ValueError("correlation matrix is not positive semi-definite")
    w = np.clip(w, 0.0, None)
    return (U * np.sqrt(w)[..., None, :]) @ np.conj(np.swapaxes(U, -1, -2))


@dataclass(frozen=True)
class ChannelRealization:
    """Channel ensemble ``h`` of shape ``(E, K, M, L)`` and link phases ``theta`` ``(E, M, K, T)``."""

    h: np.ndarray
    theta: Optional[np.ndarray] = None

    def collective(self, e: int, k: int) -> np.ndarray:
        return self.h[e, k].reshape(-1)


def sample_channels(net: NetworkRealization, rng, size: Optional[int] = None) -> np.ndarray:
    """Correlated Rayleigh channels ``h_mk = R_mk^(1/2) g``, ``g ~ CN(0, I_L)``.

    Returns ``(size, K, M, L)``, or ``(K, M, L)`` when ``size`` is ``None``.
    """
    M, K, L = net.M, net.K, net.L
    E = 1 if size is None else size
    g = complex_normal((E, K, M, L), 1.0, rng)
    diag = net.R[..., np.arange(L), np.arange(L)]
    scaled_identity = (np.all(net.R[..., ~np.eye(L, dtype=bool)] == 0)
                       and np.all(diag == diag[..., :1]))
    if scaled_identity:
        amp = np.sqrt(np.clip(diag[..., 0].real, 0.0, None))  # (M, K)
        h = g * amp.T[None, :, :, None]
    else:
        root = _psd_sqrt(net.R)  # (M, K, L, L)
        h = np.einsum("mkab,ekmb->ekma", root, g)
    return h[0] if size is None else h


def apply_pn(h, theta) -> np.ndarray:
    """Rotate each AP block of ``h`` (``(..., M, L)``) by ``exp(j theta)`` (``(..., M)``)."""
    h = np.asarray(h, dtype=complex)
    return h * np.exp(1j * np.asarray(theta, dtype=float))[..., None]


def link_phases(ue_phase: np.ndarray, ap_phase: np.ndarray) -> np.ndarray:
    """Symbol-0-referenced link phases.

    ``ue_phase`` ``(..., K, T)`` and ``ap_phase`` ``(..., M, T)`` give
    ``theta`` ``(..., M, K, T)`` with ``theta[..., 0] == 0`` exactly.
    """
    ue = ue_phase - ue_phase[..., :1]
    ap = ap_phase - ap_phase[..., :1]
    theta = ap[..., :, None, :] + ue[..., None, :, :]
    theta[..., 0] = 0.0
    return theta


@dataclass
class CombinerResult:
    v: np.ndarray
    flagged: int = 0


def _hermitian_pinv(A: np.ndarray, rtol: float = PINV_RTOL):
    """Moore-Penrose inverse of Hermitian PSD matrices; returns (pinv, n_truncated)."""
    w, U = np.linalg.eigh(A)
    wmax = np.abs(w).max(axis=-1, keepdims=True)
    keep = np.abs(w) > rtol * wmax
    inv_w = np.where(keep, 1.0 / np.where(keep, w, 1.0), 0.0)
    pinv = (U * inv_w[..., None, :]) @ np.conj(np.swapaxes(U, -1, -2))
    return pinv, int(np.count_nonzero(~keep))


def combiner(kind, h: np.ndarray, net: NetworkRealization, p, noise_var: float) -> CombinerResult:
    """Centralized combining vectors ``v`` of shape ``(E, K, M, L)`` (zero off-cluster).

    MR is ``D_k h_k``. MMSE is
    ``p_k (sum_l p_l D_k h_l h_l^H D_k + D_k (sum_l p_l R_l + noise I) D_k)^+ D_k h_k``
    evaluated on the served-antenna subspace of each UE; the pseudo-inverse
    truncates eigenvalues below ``PINV_RTOL`` times the largest.
    """
    kind = CombinerKind(kind)
    h = np.asarray(h, dtype=complex)
    single = h.ndim == 3
    if single:
        h = h[None]
    E, K, M, L = h.shape
    p = np.broadcast_to(np.asarray(p, dtype=float), (K,))
    mask = net.serving.T[None, :, :, None]  # (1, K, M, 1)
    if kind is CombinerKind.MR:
        v = h * mask
        return CombinerResult(v[0] if single else v)

    v = np.zeros_like(h)
    flagged = 0
    R_sum = np.einsum("k,mkab->mab", p, net.R)  # (M, L, L)
    for k in range(K):
        aps = np.flatnonzero(net.serving[:, k])
        n = aps.size * L
        hs = h[:, :, aps, :].reshape(E, K, n)  # (E, K, n)
        A = np.einsum("l,eli,elj->eij", p, hs, np.conj(hs))
        Z = np.zeros((n, n), dtype=complex)
        for i, m in enumerate(aps):
            s = slice(i * L, (i + 1) * L)
            Z[s, s] = R_sum[m]
        A = A + Z[None] + noise_var * np.eye(n)[None]
        A = 0.5 * (A + np.conj(np.swapaxes(A, -1, -2)))
        pinv, trunc = _hermitian_pinv(A)
        flagged += trunc
        vk = p[k] * np.einsum("eij,ej->ei", pinv, hs[:, k])
        v[:, k, aps, :] = vk.reshape(E, aps.size, L)
    if flagged:
        log.warning("MMSE pseudo-inverse truncated %d eigenvalues", flagged)
    return CombinerResult(v[0] if single else v, flagged)


class SinrEstimateError(ArithmeticError):
    """Non-positive SINR denominator from the ensemble estimate."""


@dataclass
class SinrEstimate:
    """Ensemble estimates behind the per-symbol SINR, each ``(K, T)``."""

    sinr: np.ndarray
    desired: np.ndarray
    interference: np.ndarray
    noise: np.ndarray


def ensemble_sinr(h: np.ndarray, v: np.ndarray, theta: Optional[np.ndarray], serving: np.ndarray,
                  p, noise_var: float, n_symbols: Optional[int] = None) -> SinrEstimate:
    """Per-UE, per-symbol SINR with expectations replaced by ensemble means.

    ``SINR = p_k |E{g_kk}|^2 / (sum_l p_l E{|g_kl|^2} - p_k |E{g_kk}|^2 + noise E{||D_k v_k||^2})``
    with ``g_kl = v_k^H D_k h~_l`` and ``h~`` the phase-rotated channel of the
    symbol. ``theta`` of ``None`` means no phase noise (``n_symbols`` then
    sets the number of symbols, default 1).
    """
    E, K, M, L = h.shape
    p = np.broadcast_to(np.asarray(p, dtype=float), (K,))
    T = (1 if n_symbols is None else n_symbols) if theta is None else theta.shape[-1]
    idx = np.arange(K)
    sum_g = np.zeros((K, T), dtype=complex)
    sum_g2 = np.zeros((K, K, T))
    sum_v2 = np.zeros(K)
    # fixed chunking keeps the reduction order independent of the caller
    chunk = max(1, _CHUNK_ELEMS // max(1, K * K * M * T))
    for start in range(0, E, chunk):
        sl = slice(start, min(E, start + chunk))
        vm = v[sl] * serving.T[None, :, :, None]
        # a[e, k, l, m] = v_mk^H D_mk h_ml
        a = np.einsum("ekma,elma->eklm", np.conj(vm), h[sl])
        if theta is None:
            g = np.repeat(a.sum(axis=-1)[..., None], T, axis=-1)
        else:
            g = np.einsum("eklm,emlt->eklt", a, np.exp(1j * theta[sl]))
        sum_g += g[:, idx, idx, :].sum(axis=0)
        sum_g2 += (np.abs(g) ** 2).sum(axis=0)
        sum_v2 += (np.abs(vm) ** 2).sum(axis=(0, 2, 3))
    desired = np.abs(sum_g / E) ** 2  # (K, T)
    second = sum_g2 / E  # (K, K, T)
    noise = noise_var * sum_v2 / E  # (K,)
    interference = np.einsum("l,klt->kt", p, second) - p[:, None] * desired
    denom = interference + noise[:, None]
    if np.any(denom <= 0):
        raise SinrEstimateError("non-positive SINR denominator; enlarge the ensemble")
    sinr = p[:, None] * desired / denom
    return SinrEstimate(sinr, desired, interference, np.broadcast_to(noise[:, None], (K, T)))


def sinr_per_symbol(k: int, t: int, v: np.ndarray, ensemble: ChannelRealization,
                    net: NetworkRealization, p, noise_var: float) -> float:
    """SINR of UE ``k`` at symbol ``t`` for an ensemble of channel realizations."""
    theta = ensemble.theta
    theta_t = None if theta is None else theta[..., t:t + 1]
    est = ensemble_sinr(ensemble.h, v, theta_t, net.serving, p, noise_var)
    return float(est.sinr[k, 0])


def se_per_symbol(sinr):
    """Spectral efficiency ``log2(1 + sinr)`` in bit/s/Hz."""
    s = np.asarray(sinr, dtype=float)
    if np.any(s < 0):
        raise ValueError("SINR must be >= 0")
    out = np.log2(1.0 + s)
    return out if out.ndim else float(out)
