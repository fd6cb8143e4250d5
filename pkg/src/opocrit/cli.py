"""Command-line front end: ``opocrit <subcommand> [flags]``.

Configuration layers, lowest to highest: built-in defaults, ``--preset``,
``--config`` JSON file, individual flags. Every output file starts with a
manifest line from which the run can be repeated exactly; outputs carry no
timestamps, so reruns with the same configuration are byte-identical.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .dynamics import NumericalFailure
from .grid import write_snapshot
from .experiments import (
    SUBCOMMANDS,
    ConfigError,
    RunConfig,
    resolve_config,
    run_lifshitz,
    run_mcmc_check,
    run_nongaussian,
    run_scan,
    run_selfcheck,
    run_spectrum,
)

__all__ = ["main", "build_parser", "parse_config", "config_from_args", "EXIT_OK", "EXIT_CONFIG", "EXIT_NUMERICAL",
           "EXIT_SELFCHECK"]

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_SELFCHECK = 0, 1, 2, 3

# flags handled separately, or not part of the physics configuration
_SPECIAL = {"seed", "workers"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _flag_type(tp):
    tp = str(tp)
    if "int" in tp:
        return int
    if "float" in tp:
        return float
    return str


def _u64(text):
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid seed {text!r}")
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="opocrit", description="Critical-point simulations of the reduced OPO equation.")
    parser.add_argument("--version", action="version", version=f"opocrit {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="JSON file with configuration keys")
        p.add_argument("--seed", type=_u64)
        p.add_argument("--workers", type=int, help="FFT threads (default: $OPO_NUM_WORKERS or 1)")
        p.add_argument("--preset", choices=("desk", "paper"), default="desk")
        p.add_argument("--out", type=Path, help=f"output directory (default: ./out/{name})")
        for f in fields(RunConfig):
            if f.name in _SPECIAL:
                continue
            opts = [f"--{f.name.replace('_', '-')}"]
            if "_" in f.name:
                opts.append(f"--{f.name}")
            p.add_argument(*opts, dest=f.name, type=_flag_type(f.type), default=None)
    return parser


def _load_file(path: Path) -> dict:
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e.strerror}")
    if not text.strip():
        return {}
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}")
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    return data


def parse_config(subcommand, path=None, flags=None, preset="desk") -> RunConfig:
    """Resolve a configuration from an optional JSON file and a dict of flag values."""
    file_values = _load_file(Path(path)) if path is not None else {}
    return resolve_config(subcommand, preset, file_values, flags or {})


def config_from_args(args) -> RunConfig:
    file_values = _load_file(args.config) if args.config is not None else {}
    flags = {f.name: getattr(args, f.name) for f in fields(RunConfig)
             if f.name not in _SPECIAL and getattr(args, f.name, None) is not None}
    if args.seed is not None:
        flags["seed"] = args.seed
    workers = args.workers
    if workers is None and "workers" not in file_values:
        env = os.environ.get("OPO_NUM_WORKERS")
        if env:
            try:
                workers = int(env)
            except ValueError:
                raise ConfigError(f"OPO_NUM_WORKERS must be an integer, got {env!r}")
    if workers is not None:
        flags["workers"] = workers
    return resolve_config(args.subcommand, args.preset, file_values, flags)


# ---------------------------------------------------------------------------
# output


def _fmt(v) -> str:
    return format(float(v), ".17g")


def _manifest(subcommand, preset, cfg: RunConfig) -> dict:
    conf = cfg.to_dict()
    conf.pop("workers")  # does not affect results
    return {"program": "opocrit", "version": __version__, "subcommand": subcommand,
            "preset": preset, "config": conf}


def _write_csv(path: Path, manifest: dict, columns, rows):
    with open(path, "w", newline="\n") as fh:
        fh.write("# manifest " + json.dumps(manifest, sort_keys=True, separators=(",", ":")) + "\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _series_rows(series, key="X", minus=None):
    pts = series.pointwise(key, minus)
    for tau, value, etas, p in zip(series.tau, series.value, series.etas, pts):
        yield (tau, value, p.mean, p.stderr, *etas)


_TS_COLS = ("tau", "param_value", "mean_intensity", "stderr", "eta1", "eta2", "eta3")


def _spectrum_rows(spec):
    kx = np.fft.fftshift(spec.grid.kx)
    ky = np.fft.fftshift(spec.grid.ky)
    S = np.fft.fftshift(spec.S)
    for i in range(kx.size):
        for j in range(ky.size):
            yield (kx[i], ky[j], S[i, j])


def _radial_rows(rad):
    return zip(rad.k, rad.S, rad.stderr)


def _write_spectra(out: Path, manifest, spec, suffix=""):
    from .observables import radial_average

    _write_csv(out / f"spectrum{suffix}.csv", manifest, ("kx", "ky", "S"), _spectrum_rows(spec))
    _write_csv(out / f"radial{suffix}.csv", manifest, ("k", "S", "stderr"),
               _radial_rows(radial_average(spec)))


def _est(e) -> dict:
    return {"mean": e.mean, "stderr": e.stderr, "n": e.n}


def _execute(subcommand, cfg: RunConfig, manifest: dict, out: Path):
    """Run one experiment, write its files, return (results dict, summary lines)."""
    results: dict = {}
    lines: list[str] = []
    if subcommand in ("scan-pump", "scan-detuning"):
        r = run_scan(cfg, kx_profile=subcommand == "scan-detuning")
        _write_csv(out / "timeseries.csv", manifest, _TS_COLS, _series_rows(r.series))
        if r.profile:
            rows = ((t, v, k, s) for t, v, prof in zip(r.profile_tau, r.profile_value, r.profile)
                    for k, s in zip(r.profile_kx, prof))
            _write_csv(out / "kx_profile.csv", manifest, ("tau", "param_value", "kx", "S"), rows)
        last = r.points()[-1]
        results.update(final=_est(last), discard_fraction=r.discard_fraction)
        lines.append(f"{cfg.scan_parameter} = {r.series.value[-1]:.6g}: <|X|^2> = {last.mean:.6g} +- {last.stderr:.2g}")
    elif subcommand in ("lifshitz", "spectrum"):
        r = run_lifshitz(cfg) if subcommand == "lifshitz" else run_spectrum(cfg)
        _write_csv(out / "timeseries.csv", manifest, _TS_COLS, _series_rows(r.series))
        _write_spectra(out, manifest, r.spectrum)
        rad = r.radial
        peak = int(np.argmax(rad.S[1:])) + 1
        results.update(intensity=_est(r.intensity), radial_peak_k=float(rad.k[peak]),
                       discard_fraction=r.discard_fraction)
        if subcommand == "spectrum":
            lines.append(f"radial spectrum peaks at k = {rad.k[peak]:.6g} (k > 0)")
        lines.append(f"<|X|^2> = {r.intensity.mean:.6g} +- {r.intensity.stderr:.2g}")
    elif subcommand == "nongaussian":
        r = run_nongaussian(cfg)
        s = r.series
        _write_csv(out / "timeseries.csv", manifest, _TS_COLS, _series_rows(s, "X"))
        _write_csv(out / "timeseries_gaussian.csv", manifest, _TS_COLS, _series_rows(s, "Xg"))
        _write_csv(out / "timeseries_difference.csv", manifest, _TS_COLS, _series_rows(s, "X", "Xg"))
        _write_spectra(out, manifest, r.spectrum)
        _write_spectra(out, manifest, r.spectrum_gaussian, "_gaussian")
        _write_spectra(out, manifest, r.spectrum_difference, "_difference")
        results.update(gaussian=_est(r.gaussian), difference=_est(r.difference), direct=_est(r.direct),
                       corrected=_est(r.corrected), variance_ratio=r.variance_ratio,
                       discard_fraction=r.discard_fraction)
        lines.append(f"<|Xg|^2> = {r.gaussian.mean:.6g} +- {r.gaussian.stderr:.2g}")
        lines.append(f"<|X|^2> - <|Xg|^2> = {r.difference.mean:.6g} +- {r.difference.stderr:.2g}"
                     f" (variance ratio {r.variance_ratio:.3g})")
        lines.append(f"<|X|^2> = {r.corrected.mean:.6g} +- {r.corrected.stderr:.2g}")
    elif subcommand == "mcmc-check":
        r = run_mcmc_check(cfg)
        results.update(mcmc=_est(r.mcmc), sde=_est(r.sde), mcmc_quartic=_est(r.mcmc_quartic),
                       sde_quartic=_est(r.sde_quartic), z_score=r.z_score,
                       acceptance=[float(a) for a in r.acceptance])
        lines.append(f"MCMC <|X|^2> = {r.mcmc.mean:.6g} +- {r.mcmc.stderr:.2g}")
        lines.append(f"SDE  <|X|^2> = {r.sde.mean:.6g} +- {r.sde.stderr:.2g} ({r.z_score:.2f} combined stderr)")
    snap = getattr(r, "fields", None)
    if snap is not None:
        write_snapshot(out / "snapshot.opof", snap, cfg.grid)
    return results, lines


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = config_from_args(args)
    except ConfigError as e:
        print(f"opocrit: configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    if args.subcommand == "selfcheck":
        checks = run_selfcheck()
        for c in checks:
            print(f"{'PASS' if c.passed else 'FAIL'} {c.name}: {c.value:.17g} (expected {c.expected:.17g})")
        return EXIT_OK if all(c.passed for c in checks) else EXIT_SELFCHECK

    out = args.out if args.out is not None else Path("out") / args.subcommand
    manifest = _manifest(args.subcommand, args.preset, cfg)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        print(f"opocrit: cannot create output directory {out}: {e.strerror}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        results, lines = _execute(args.subcommand, cfg, manifest, out)
    except ConfigError as e:
        print(f"opocrit: configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalFailure, FloatingPointError) as e:
        print(f"opocrit: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    manifest = dict(manifest, results=results)
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True, allow_nan=True, default=_json_default) + "\n")
    for line in lines:
        print(line)
    return EXIT_OK


def _json_default(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    raise TypeError(type(v))


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
