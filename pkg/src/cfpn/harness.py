"""Monte-Carlo experiments: per-symbol average SE under different oscillators.

Every drop ``d`` draws from independent substreams of the master seed:
``(d, 0)`` geometry and shadowing, ``(d, 1)`` small-scale fading and
``(d, 2)`` phase noise. Geometry and channels therefore do not depend on
the oscillator model, so results of different models are paired, and a
drop's result does not depend on how many worker processes run the sweep.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np

from . import __version__
from .cf_system import (CombinerKind, NetworkConfig, SinrEstimateError, combiner, drop_network,
                        ensemble_sinr, link_phases, sample_channels, se_per_symbol)
from .ofdm import Numerology
from .pn_models import DeviceOscillator, NoPhaseNoise, OscillatorModel, WienerOscillator, oscillator_from_dict

log = logging.getLogger(__name__)

STREAM_GEOMETRY, STREAM_CHANNEL, STREAM_PN = 0, 1, 2

PROFILES = {
    "desk": {"network": {"M": 25, "L": 2, "K": 8, "area": 200.0}, "drops": 50, "ensemble": 200},
    "paper": {"network": {"M": 100, "L": 4, "K": 40, "area": 400.0}, "drops": 50, "ensemble": 500},
}

# "joint": phase noise redrawn for every ensemble member, so SINR expectations
# run over channels and phase noise; "fixed": one phase-noise draw per drop.
PN_EXPECTATIONS = ("joint", "fixed")

CSV_FIELDS = ["model", "symbol_index", "mean_se", "q05", "q50", "q95"]


class ConfigError(ValueError):
    """Invalid experiment configuration; ``errors`` lists every problem found."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass(frozen=True)
class ExperimentConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    numerology: Numerology = field(default_factory=Numerology)
    oscillator: OscillatorModel = field(default_factory=NoPhaseNoise)
    combiner: CombinerKind = CombinerKind.MMSE
    drops: int = 50
    ensemble: int = 200
    master_seed: int = 0
    pn_expectation: str = "joint"

    def __post_init__(self):
        object.__setattr__(self, "combiner", CombinerKind(self.combiner))
        errors = []
        if self.pn_expectation not in PN_EXPECTATIONS:
            errors.append(f"pn_expectation must be one of {PN_EXPECTATIONS}")
        if self.drops < 1:
            errors.append("drops must be >= 1")
        if self.ensemble < 2:
            errors.append("ensemble must be >= 2")
        if self.master_seed < 0:
            errors.append("master_seed must be >= 0")
        if errors:
            raise ConfigError(errors)

    @classmethod
    def profile(cls, name: str, **overrides) -> "ExperimentConfig":
        prof = PROFILES[name]
        return cls(network=NetworkConfig(**prof["network"]), drops=prof["drops"],
                   ensemble=prof["ensemble"], **overrides)

    def with_oscillator(self, oscillator: OscillatorModel) -> "ExperimentConfig":
        return replace(self, oscillator=oscillator)

    def to_dict(self, include_oscillator: bool = True) -> dict:
        out = {"network": self.network.to_dict(), "numerology": self.numerology.to_dict(),
               "combiner": self.combiner.value, "drops": self.drops, "ensemble": self.ensemble,
               "master_seed": self.master_seed, "pn_expectation": self.pn_expectation}
        if include_oscillator:
            out["oscillator"] = self.oscillator.to_dict()
        return out

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class ResultsRecord:
    """Per-symbol SE statistics of one oscillator model.

    ``mean_se`` averages over UEs, then drops. Quantiles are over all
    (drop, UE) pairs. ``drop_se`` holds the UE-averaged SE of each
    successful drop, shape ``(drops, n_ct)``.
    """

    model: str
    mean_se: np.ndarray
    q05: np.ndarray
    q50: np.ndarray
    q95: np.ndarray
    drop_se: np.ndarray
    metadata: dict = field(default_factory=dict)

    @property
    def n_symbols(self) -> int:
        return self.mean_se.size

    def degradation(self, symbol: int = -1) -> float:
        """Relative SE loss at ``symbol`` with respect to symbol 0."""
        return float(1.0 - self.mean_se[symbol] / self.mean_se[0])

    def __eq__(self, other):
        if not isinstance(other, ResultsRecord):
            return NotImplemented
        arrays = ("mean_se", "q05", "q50", "q95", "drop_se")
        return (self.model == other.model and self.metadata == other.metadata
                and all(np.array_equal(getattr(self, a), getattr(other, a)) for a in arrays))

    def to_dict(self) -> dict:
        return {"model": self.model, "mean_se": self.mean_se.tolist(), "q05": self.q05.tolist(),
                "q50": self.q50.tolist(), "q95": self.q95.tolist(), "drop_se": self.drop_se.tolist(),
                "metadata": self.metadata}

    @classmethod
    def from_dict(cls, data: dict) -> "ResultsRecord":
        arr = {k: np.asarray(data[k], dtype=float) for k in ("mean_se", "q05", "q50", "q95")}
        drop_se = np.asarray(data["drop_se"], dtype=float).reshape(-1, arr["mean_se"].size)
        return cls(model=data["model"], drop_se=drop_se, metadata=data["metadata"], **arr)


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=key))


def simulate_drop(cfg: ExperimentConfig, drop_index: int) -> np.ndarray:
    """Per-UE SE of one drop, shape ``(K, n_ct)``."""
    net_cfg, num = cfg.network, cfg.numerology
    T, E = num.n_ct, cfg.ensemble
    net = drop_network(net_cfg, _rng(cfg.master_seed, drop_index, STREAM_GEOMETRY))
    h = sample_channels(net, _rng(cfg.master_seed, drop_index, STREAM_CHANNEL), size=E)
    comb = combiner(cfg.combiner, h, net, net_cfg.p, net_cfg.noise_var)
    if comb.flagged:
        log.info("drop %d: %d eigenvalues truncated in MMSE", drop_index, comb.flagged)
    rng_pn = _rng(cfg.master_seed, drop_index, STREAM_PN)
    n_pn = E if cfg.pn_expectation == "joint" else 1
    ue = cfg.oscillator.symbol_phases(n_pn * net.K, T, num.t_ofdm, rng_pn).reshape(n_pn, net.K, T)
    ap = cfg.oscillator.symbol_phases(n_pn * net.M, T, num.t_ofdm, rng_pn).reshape(n_pn, net.M, T)
    theta = np.broadcast_to(link_phases(ue, ap), (E, net.M, net.K, T))
    est = ensemble_sinr(h, comb.v, theta, net.serving, net_cfg.p, net_cfg.noise_var)
    return se_per_symbol(est.sinr)


def _drop_task(args):
    cfg, d = args
    try:
        return d, simulate_drop(cfg, d), None
    except (SinrEstimateError, np.linalg.LinAlgError, FloatingPointError) as exc:
        return d, None, f"{type(exc).__name__}: {exc}"


def provenance(cfg: ExperimentConfig) -> str:
    return f"cfpn {__version__} config:{cfg.config_hash()[:12]} seed:{cfg.master_seed}"


def _map_drops(cfg: ExperimentConfig, workers: int):
    tasks = [(cfg, d) for d in range(cfg.drops)]
    if workers <= 1:
        return [_drop_task(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_drop_task, tasks, chunksize=max(1, len(tasks) // (4 * workers))))


def run_experiment(cfg: ExperimentConfig, workers: int = 1) -> ResultsRecord:
    """Run all drops of ``cfg`` and aggregate per-symbol SE.

    ``workers > 1`` spreads drops over processes (``0`` means one per CPU);
    results are reduced in drop order so the record does not depend on it.
    Failing drops are logged and listed in ``metadata["failed_drops"]``.
    """
    if workers == 0:
        workers = os.cpu_count() or 1
    outcomes = _map_drops(cfg, workers)
    per_ue, failed = [], []
    for d, se, err in sorted(outcomes, key=lambda o: o[0]):
        if se is None:
            log.warning("drop %d failed: %s", d, err)
            failed.append({"drop": d, "error": err})
        else:
            per_ue.append(se)
    if not per_ue:
        raise RuntimeError("every drop failed")
    se = np.stack(per_ue)  # (drops, K, T)
    drop_se = se.mean(axis=1)
    flat = se.reshape(-1, se.shape[-1])
    q05, q50, q95 = np.quantile(flat, [0.05, 0.5, 0.95], axis=0)
    meta = {"config": cfg.to_dict(), "config_hash": cfg.config_hash(), "master_seed": cfg.master_seed,
            "provenance": provenance(cfg), "failed_drops": failed}
    return ResultsRecord(cfg.oscillator.model_id, drop_se.mean(axis=0), q05, q50, q95, drop_se, meta)


# ---------------------------------------------------------------------------
# Model comparison
# ---------------------------------------------------------------------------


def link_drift(oscillator: OscillatorModel, numerology: Numerology, seed: int) -> np.ndarray:
    """Drift of one UE-AP link phase over a coherence time, referenced to symbol 0."""
    rng = np.random.default_rng(seed)
    phases = oscillator.symbol_phases(2, numerology.n_ct, numerology.t_ofdm, rng)
    total = phases[0] + phases[1]
    return total - total[0]


def max_drift(oscillator: OscillatorModel, numerology: Numerology, seeds: Iterable[int]) -> np.ndarray:
    return np.array([np.max(np.abs(link_drift(oscillator, numerology, s))) for s in seeds])


@dataclass
class Comparison:
    records: List[ResultsRecord]
    summary: List[dict]
    drift: dict  # model -> (trace of first seed, max |drift| per seed)


def compare_models(cfgs: Sequence[ExperimentConfig], workers: int = 1, drift_trials: int = 100) -> Comparison:
    """Paired comparison of configs that differ only in their oscillator."""
    if not cfgs:
        raise ValueError("no configurations to compare")
    base = cfgs[0].to_dict(include_oscillator=False)
    for c in cfgs[1:]:
        if c.to_dict(include_oscillator=False) != base:
            raise ConfigError(["configs differ beyond the oscillator model"])
    records, summary, drift = [], [], {}
    for c in cfgs:
        rec = run_experiment(c, workers=workers)
        seeds = [c.master_seed * drift_trials + i for i in range(drift_trials)]
        md = max_drift(c.oscillator, c.numerology, seeds)
        trace = link_drift(c.oscillator, c.numerology, seeds[0])
        drift[rec.model] = (trace, md)
        records.append(rec)
        summary.append({"model": rec.model, "se_first": float(rec.mean_se[0]),
                        "se_last": float(rec.mean_se[-1]), "degradation": rec.degradation(),
                        "q05_first": float(rec.q05[0]), "q05_last": float(rec.q05[-1]),
                        "median_max_drift_rad": float(np.median(md)),
                        "mean_max_drift_rad": float(np.mean(md))})
    return Comparison(records, summary, drift)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def _rows(record: ResultsRecord):
    for t in range(record.n_symbols):
        yield [record.model, str(t), _fmt(record.mean_se[t]), _fmt(record.q05[t]),
               _fmt(record.q50[t]), _fmt(record.q95[t])]


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def persist(record: ResultsRecord, path) -> Path:
    """Write ``record`` as CSV plus a full-precision JSON sidecar next to it."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_FIELDS)
            writer.writerows(_rows(record))
        with sidecar_path(path).open("w") as fh:
            json.dump(record.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise OSError(f"cannot write results to {path}: {exc}") from exc
    return path


def read_results_csv(path) -> List[dict]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_FIELDS:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        rows = []
        for r in reader:
            rows.append({"model": r["model"], "symbol_index": int(r["symbol_index"]),
                         **{k: float(r[k]) for k in CSV_FIELDS[2:]}})
    return rows


def load_results(path) -> ResultsRecord:
    """Load a record written by :func:`persist` (values from the sidecar)."""
    path = Path(path)
    try:
        with sidecar_path(path).open() as fh:
            record = ResultsRecord.from_dict(json.load(fh))
        rows = read_results_csv(path)
    except OSError as exc:
        raise OSError(f"cannot read results from {path}: {exc}") from exc
    if len(rows) != record.n_symbols:
        raise ValueError(f"{path}: {len(rows)} rows for {record.n_symbols} symbols")
    return record


def write_comparison(comparison: Comparison, path) -> Path:
    """One CSV with ``n_ct`` rows per model, plus ``*_summary.csv`` and, when drift
    traces are present, ``*_drift.csv``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_FIELDS)
        for rec in comparison.records:
            writer.writerows(_rows(rec))
    summary_path = path.with_name(path.stem + "_summary.csv")
    keys = list(comparison.summary[0])
    with summary_path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(keys)
        for row in comparison.summary:
            writer.writerow([row[k] if isinstance(row[k], str) else _fmt(row[k]) for k in keys])
    if not comparison.drift:
        return path
    drift_path = path.with_name(path.stem + "_drift.csv")
    with drift_path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["model", "symbol_index", "t_s", "drift_rad"])
        for rec in comparison.records:
            trace, _ = comparison.drift[rec.model]
            t_ofdm = rec.metadata["config"]["numerology"]["t_ofdm"]
            for t, val in enumerate(trace):
                writer.writerow([rec.model, t, _fmt(t * t_ofdm), _fmt(val)])
    return path


# ---------------------------------------------------------------------------
# Config files
# ---------------------------------------------------------------------------

_TOP_KEYS = {"profile", "network", "numerology", "oscillator", "oscillators", "combiner",
             "drops", "ensemble", "master_seed", "seed", "pn_expectation"}


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def configs_from_dict(data: dict, profile: Optional[str] = None, overrides: Optional[dict] = None,
                      base_dir: Optional[Path] = None) -> List[ExperimentConfig]:
    """Build one :class:`ExperimentConfig` per configured oscillator.

    Precedence, lowest first: built-in defaults, the file's ``profile``, the
    file's own values, the ``profile`` argument, then ``overrides``. All
    problems are collected and raised together as a :class:`ConfigError`.
    """
    errors = []
    unknown = set(data) - _TOP_KEYS
    if unknown:
        errors.append(f"unknown keys: {sorted(unknown)}")
    merged: dict = {}
    for prof in (data.get("profile"),):
        if prof is not None:
            if prof not in PROFILES:
                errors.append(f"unknown profile {prof!r}")
            else:
                merged = _merge(merged, PROFILES[prof])
    merged = _merge(merged, {k: v for k, v in data.items() if k in _TOP_KEYS and k != "profile"})
    if profile is not None:
        if profile not in PROFILES:
            errors.append(f"unknown profile {profile!r}")
        else:
            merged = _merge(merged, PROFILES[profile])
    merged = _merge(merged, {k: v for k, v in (overrides or {}).items() if v is not None})
    if "seed" in merged:
        merged["master_seed"] = merged.pop("seed")

    network = numerology = None
    try:
        network = NetworkConfig.from_dict(merged.get("network", {}))
    except (TypeError, ValueError) as exc:
        errors.append(f"network: {exc}")
    try:
        numerology = Numerology(**merged.get("numerology", {}))
    except (TypeError, ValueError) as exc:
        errors.append(f"numerology: {exc}")
    osc_specs = merged.get("oscillators")
    if osc_specs is None:
        osc_specs = [merged.get("oscillator", {"kind": "none"})]
    oscillators = []
    for i, spec in enumerate(osc_specs):
        try:
            oscillators.append(oscillator_from_dict(spec, base_dir=base_dir))
        except (KeyError, TypeError, ValueError, OSError) as exc:
            errors.append(f"oscillators[{i}]: {exc}")
    scalars = {}
    for key, cast in (("drops", int), ("ensemble", int), ("master_seed", int)):
        if key in merged:
            try:
                scalars[key] = cast(merged[key])
            except (TypeError, ValueError):
                errors.append(f"{key}: expected an integer, got {merged[key]!r}")
    try:
        scalars["combiner"] = CombinerKind(merged.get("combiner", "MMSE"))
    except ValueError:
        errors.append(f"combiner: expected MR or MMSE, got {merged.get('combiner')!r}")
    pn_exp = merged.get("pn_expectation", "joint")
    if pn_exp not in PN_EXPECTATIONS:
        errors.append(f"pn_expectation: expected one of {PN_EXPECTATIONS}, got {pn_exp!r}")
    scalars["pn_expectation"] = pn_exp
    if scalars.get("drops", 1) < 1:
        errors.append("drops must be >= 1")
    if scalars.get("ensemble", 2) < 2:
        errors.append("ensemble must be >= 2")
    if scalars.get("master_seed", 0) < 0:
        errors.append("master_seed must be >= 0")
    ids = [o.model_id for o in oscillators]
    if len(set(ids)) != len(ids):
        errors.append(f"oscillator names must be unique, got {ids}")
    if errors:
        raise ConfigError(errors)
    return [ExperimentConfig(network=network, numerology=numerology, oscillator=o, **scalars)
            for o in oscillators]


def load_config(path, profile: Optional[str] = None, overrides: Optional[dict] = None) -> List[ExperimentConfig]:
    path = Path(path)
    with path.open() as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ConfigError(["config file must contain a JSON object"])
    return configs_from_dict(data, profile=profile, overrides=overrides, base_dir=path.parent)


__all__ = [
    "ConfigError", "ExperimentConfig", "ResultsRecord", "Comparison", "PROFILES",
    "run_experiment", "simulate_drop", "compare_models", "link_drift", "max_drift",
    "persist", "load_results", "read_results_csv", "write_comparison",
    "configs_from_dict", "load_config", "DeviceOscillator", "WienerOscillator", "NoPhaseNoise",
]
