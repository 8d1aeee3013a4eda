"""Command-line interface: ``cfpn {pn-gen,pn-psd,sim,compare}``.

Exit status is 0 on success, 1 on invalid arguments or configuration and
2 on I/O errors.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .harness import (PROFILES, Comparison, ConfigError, compare_models, load_config, configs_from_dict, persist,
                      run_experiment, write_comparison)
from .ofdm import Numerology
from .pn_models import (DEVICE_FILES, HardwareLoParams, PhaseTrace, WienerParams,
                        estimate_psd, load_psd, synthesize_pn, wiener_trace)

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _fmt(x: float) -> str:
    return f"{x:.9g}"


# ---------------------------------------------------------------------------
# Trace files
# ---------------------------------------------------------------------------


def write_trace(trace: PhaseTrace, path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["t_s", "phase_rad"])
        for t, ph in zip(trace.times, trace.samples):
            writer.writerow([_fmt(t), _fmt(ph)])


def read_trace(path) -> PhaseTrace:
    """Read a ``t_s,phase_rad`` CSV; the sample rate comes from the time column."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"t_s", "phase_rad"} <= set(reader.fieldnames):
            raise UsageError(f"{path}: expected header 't_s,phase_rad'")
        try:
            rows = [(float(r["t_s"]), float(r["phase_rad"])) for r in reader]
        except (TypeError, ValueError) as exc:
            raise UsageError(f"{path}: malformed row ({exc})") from exc
    if len(rows) < 2:
        raise UsageError(f"{path}: trace needs at least 2 samples, found {len(rows)}")
    t = np.array([r[0] for r in rows])
    dt = np.diff(t)
    if np.any(dt <= 0):
        raise UsageError(f"{path}: time column must be strictly increasing")
    rate = (len(t) - 1) / (t[-1] - t[0])
    try:
        return PhaseTrace(np.array([r[1] for r in rows]), rate, model_id=path.stem)
    except ValueError as exc:
        raise UsageError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _device_psd(args):
    if args.xo_psd or args.pll_psd:
        missing = [n for n in ("xo_psd", "pll_psd", "f_xo", "f_pll", "f_c") if getattr(args, n) is None]
        if missing:
            raise UsageError(f"composite LO needs --{' --'.join(m.replace('_', '-') for m in missing)}")
        return HardwareLoParams(load_psd(args.xo_psd), load_psd(args.pll_psd), args.f_xo, args.f_pll, args.f_c)
    if not args.psd:
        raise UsageError("--model device needs --psd (device name or CSV) or --xo-psd/--pll-psd")
    return load_psd(args.psd)


def cmd_pn_gen(args) -> int:
    rate = args.rate if args.rate is not None else Numerology().symbol_rate
    if args.samples < 1:
        raise UsageError("--samples must be >= 1")
    if rate <= 0:
        raise UsageError("--rate must be > 0")
    rng = np.random.default_rng(args.seed)
    if args.model == "wiener":
        if args.sigma2 is not None:
            params = WienerParams(args.sigma2)
        elif None not in (args.fc, args.c):
            params = WienerParams.from_oscillator(args.fc, args.c, 1.0 / rate)
        else:
            raise UsageError("--model wiener needs --sigma2 or --fc and --c")
        trace = wiener_trace(params, args.samples, rng, sample_rate=rate, seed=args.seed)
    elif args.model == "device":
        psd = _device_psd(args)
        length = max(args.samples, args.synth_length)
        band = (args.band_low, rate / 2.0) if args.band_low else None
        full = synthesize_pn(psd, rate, length, rng, band=band, model_id="device", seed=args.seed)
        trace = PhaseTrace(full.samples[:args.samples], rate, model_id="device", seed=args.seed)
    else:
        trace = PhaseTrace(np.zeros(args.samples), rate, model_id="none", seed=args.seed)
    write_trace(trace, args.out)
    print(f"samples={len(trace)} rate_hz={_fmt(rate)} max_drift_rad={_fmt(trace.max_drift())} "
          f"increment_var={_fmt(trace.increment_variance())}")
    return EXIT_OK


def cmd_pn_psd(args) -> int:
    trace = read_trace(args.input)
    if len(trace) < 4 * args.segments:
        raise UsageError(f"trace of {len(trace)} samples is too short for {args.segments} segments")
    table = estimate_psd(trace, args.segments)
    table.to_csv(args.out)
    print(f"bins={table.offsets.size} resolution_hz={_fmt(table.offsets[0])}")
    return EXIT_OK


def _load_cfgs(args):
    overrides = {"drops": args.drops, "ensemble": args.ensemble, "master_seed": args.seed,
                 "combiner": args.combiner}
    if args.config:
        return load_config(args.config, profile=args.profile, overrides=overrides)
    default = {"oscillators": [{"kind": "none"}, {"kind": "wiener", "sigma2": 0.23},
                               {"kind": "device", "lo_psd": "b200"}]}
    return configs_from_dict(default, profile=args.profile or "desk", overrides=overrides)


def cmd_sim(args) -> int:
    cfgs = _load_cfgs(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for cfg in cfgs:
        rec = run_experiment(cfg, workers=args.workers)
        persist(rec, out / f"{rec.model}.csv")
        records.append(rec)
        print(f"{rec.model}: se[0]={_fmt(rec.mean_se[0])} se[{rec.n_symbols - 1}]={_fmt(rec.mean_se[-1])} "
              f"delta={_fmt(100.0 * rec.degradation())}%")
    summary = [{"model": r.model, "se_first": float(r.mean_se[0]), "se_last": float(r.mean_se[-1]),
                "degradation": r.degradation()} for r in records]
    write_comparison(Comparison(records, summary, {}), out / "comparison.csv")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfgs = _load_cfgs(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    comp = compare_models(cfgs, workers=args.workers, drift_trials=args.drift_trials)
    for rec in comp.records:
        persist(rec, out / f"{rec.model}.csv")
    write_comparison(comp, out / "comparison.csv")
    for row in comp.summary:
        print(f"{row['model']}: delta={_fmt(100.0 * row['degradation'])}% "
              f"median_max_drift_rad={_fmt(row['median_max_drift_rad'])}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cfpn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    gen = sub.add_parser("pn-gen", help="generate a phase-noise trace")
    gen.add_argument("--model", choices=["wiener", "device", "none"], required=True)
    gen.add_argument("--sigma2", type=float, help="Wiener innovation variance (rad^2 per sample)")
    gen.add_argument("--c", type=float, help="Wiener oscillator constant (s); needs --fc")
    gen.add_argument("--psd", help=f"LO PSD: CSV path or one of {sorted(DEVICE_FILES)}")
    gen.add_argument("--xo-psd", help="XO PSD for the composite PLL model")
    gen.add_argument("--pll-psd", help="closed-loop PLL+VCO PSD for the composite model")
    gen.add_argument("--f-xo", type=float, help="XO frequency (Hz)")
    gen.add_argument("--f-pll", type=float, help="PLL loop cut-off (Hz)")
    gen.add_argument("--fc", "--f-c", dest="f_c", type=float, help="carrier frequency (Hz)")
    gen.add_argument("--band-low", type=float, default=None,
                     help="zero the target PSD below this offset (Hz); default none")
    gen.add_argument("--synth-length", type=int, default=0,
                     help="synthesize at least this many samples, then truncate")
    gen.add_argument("--samples", type=int, required=True)
    gen.add_argument("--rate", type=float, default=None, help="sample rate (Hz); default 1/T_OFDM")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=cmd_pn_gen)

    psd = sub.add_parser("pn-psd", help="Welch PSD of a trace")
    psd.add_argument("--in", dest="input", required=True)
    psd.add_argument("--segments", type=int, default=16)
    psd.add_argument("--out", required=True)
    psd.set_defaults(func=cmd_pn_psd)

    for name, func, helptext in (("sim", cmd_sim, "run SE experiments"),
                                 ("compare", cmd_compare, "paired model comparison with drift traces")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--profile", choices=sorted(PROFILES), default=None)
        p.add_argument("--drops", type=int)
        p.add_argument("--ensemble", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--combiner", choices=["MR", "MMSE"])
        p.add_argument("--workers", type=int, default=1, help="worker processes; 0 = one per CPU")
        p.add_argument("--out", required=True, help="output directory")
        if name == "compare":
            p.add_argument("--drift-trials", type=int, default=100)
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    # the fc flag is shared between the Wiener and composite models
    if hasattr(args, "f_c"):
        args.fc = args.f_c
    try:
        return args.func(args)
    except ConfigError as exc:
        for err in exc.errors:
            print(f"config error: {err}", file=sys.stderr)
        return EXIT_INVALID
    except (UsageError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
