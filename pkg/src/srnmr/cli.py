"""Command-line entry point: ``srnmr <subcommand> ...``.

Every failure prints a single ``error: <ExceptionType>: <message>`` line on
stderr and exits with a nonzero status, so batch scripts can parse it.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__, geometry
from .scenarios import collect_records, load_scenario, report, run_scenario, run_sweep
from .signal import ConfigurationError
from .spectral import fit_peaks, periodogram, preprocess, spectrum_svg
from .sr import SRTimeSeries
from .stabilization import broadening_from_noise

GEOMETRY_CALCS = {
    "thermal-prefactor": geometry.thermal_prefactor,
    "thermal-field-scale": geometry.thermal_field_scale,
    "noise-std": geometry.statistical_noise_std,
    "crossover-depth": geometry.crossover_depth,
    "min-volume": geometry.min_thermal_volume,
    "detection-volume": geometry.detection_volume,
    "backaction-prefactor": geometry.back_action_prefactor,
    "ac-zeeman": geometry.ac_zeeman_broadening,
    "diffusion-rate": geometry.diffusion_rate,
    "scaling-projection": geometry.scaling_projection,
    "geometric-factor": geometry.geometric_factor,
    "hemisphere-asymptote": geometry.hemisphere_asymptote,
    "mean-signal": geometry.mean_signal,
    "kappa": geometry.kappa_from_curve,
    "noise-broadening": broadening_from_noise,
}


def _parse_value(text):
    try:
        return float(text)
    except ValueError:
        return text


def _parse_params(items):
    params = {}
    for item in items:
        if "=" not in item:
            raise ConfigurationError(f"parameter {item!r}: expected key=value")
        key, value = item.split("=", 1)
        params[key.strip().replace("-", "_")] = _parse_value(value.strip())
    return params


def _print_record(rec):
    print(f"{rec['scenario']}: {rec['run_dir']}")
    for c in rec.get("checks", []):
        status = "PASS" if c["passed"] else "FAIL"
        print(f"  {status} {c['label']}: value={c['value']} target={c['target']} tol={c['tolerance']}")


def cmd_simulate(args):
    rec = run_scenario(args.config, args.out_dir, args.seed, args.paper_scale, args.plots, args.workers)
    _print_record(rec)


def cmd_lock(args):
    scn = load_scenario(args.config, args.seed, args.paper_scale)
    if scn.kind != "lock":
        raise ConfigurationError(f"kind: lock subcommand needs a lock scenario, got {scn.kind!r}")
    rec = run_scenario(scn, args.out_dir, None, args.paper_scale, args.plots, args.workers)
    _print_record(rec)


def cmd_sweep(args):
    rec, points = run_sweep(args.config, args.out_dir, args.seed, args.paper_scale, args.plots, args.workers)
    _print_record(rec)
    print(f"  {len(points)} point(s) completed; summary at {Path(rec['run_dir']) / 'summary.csv'}")


def cmd_analyze(args):
    series = SRTimeSeries.from_csv(args.series)
    pre = preprocess(series, args.discard)
    spec = periodogram(pre, zero_pad=args.zero_pad)
    fit = fit_peaks(spec, args.n_peaks, fit_range=tuple(args.fit_range) if args.fit_range else None,
                    coherent=not args.incoherent)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec.to_csv(out / "spectrum.csv")
    (out / "fit.txt").write_text(fit.report(), encoding="utf-8")
    if args.plots:
        (out / "spectrum.svg").write_text(spectrum_svg(spec, fit, fit_range=args.fit_range), encoding="utf-8")
    print(fit.report(), end="")


def cmd_geometry(args):
    func = GEOMETRY_CALCS[args.calc]
    params = _parse_params(args.params)
    try:
        value = func(**params)
    except TypeError as exc:
        raise ConfigurationError(f"{args.calc}: {exc}") from None
    if isinstance(value, float):
        print(f"{args.calc} = {value:.9g}")
    elif isinstance(value, dict):
        print(json.dumps(value, indent=2, sort_keys=True, default=float))
    else:
        print(f"{args.calc} = {value}")


def cmd_report(args):
    records = collect_records(args.dirs)
    text, csv = report(records)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(text, encoding="utf-8")
    (out / "report.csv").write_text(csv, encoding="utf-8")
    print(text, end="")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    common.add_argument("--out-dir", default="runs", help="output root (default: runs)")
    common.add_argument("--paper-scale", action="store_true", help="use full paper-scale sizes")
    common.add_argument("--plots", action="store_true", help="also write SVG spectra")
    common.add_argument("--workers", type=int, default=1, help="parallel workers for averages")

    parser = argparse.ArgumentParser(prog="srnmr", description="Synchronized-readout NV NMR simulator")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="run one scenario")
    p.add_argument("config", help="YAML file or bundled scenario name")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", parents=[common], help="run a scenario sweep")
    p.add_argument("config")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("lock", parents=[common], help="run a field-lock scenario")
    p.add_argument("config")
    p.set_defaults(func=cmd_lock)

    p = sub.add_parser("analyze", parents=[common], help="fit a saved series.csv")
    p.add_argument("series")
    p.add_argument("--n-peaks", type=int, default=1)
    p.add_argument("--fit-range", type=float, nargs=2, metavar=("LO_HZ", "HI_HZ"))
    p.add_argument("--discard", type=int, default=20)
    p.add_argument("--zero-pad", type=int, default=1)
    p.add_argument("--incoherent", action="store_true", help="sum peak magnitudes instead of amplitudes")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("geometry", parents=[common], help="closed-form and quadrature calculators")
    p.add_argument("calc", choices=sorted(GEOMETRY_CALCS))
    p.add_argument("params", nargs="*", help="key=value arguments in SI units")
    p.set_defaults(func=cmd_geometry)

    p = sub.add_parser("report", parents=[common], help="summarize run directories")
    p.add_argument("dirs", nargs="+")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except ConfigurationError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - the CLI reports every failure on one line
        msg = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
