"""Command line front end: ``ftqk run``, ``ftqk compare`` and ``ftqk presets``.

A run is described by one INI file. Worker count, output directory
overrides and overlap caching are command-line flags so they never change
what a config file means.
"""
from __future__ import annotations

import argparse
import configparser
import io
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .krylov_core import DEFAULT_EPS_GRID, KrylovError, RegularizationConfig, write_samples
from .lanczos import LanczosError
from .pipeline import clean_overlaps, reconstruct
from .propagator import PropagationError, read_overlaps_json, write_overlaps_json
from .reference_oracles import FtlmConfig, ed_spectra, ed_thermo, ftlm_samples
from .spin_model import ChainSpec, build_model, sector_dims
from .thermo import OBSERVABLES, TemperatureGrid, ThermoCurve, ThermoError, observables

log = logging.getLogger("ftqk")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
METHODS = ("ftqk", "ed", "ftlm")
# ``D = full`` in a config: Krylov depth equal to each sector's dimension
FULL_DEPTH = -1


class ConfigError(ValueError):
    """Invalid run configuration; ``problems`` holds one message per field."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass(frozen=True)
class RunConfig:
    N: int
    J: float = 1.0
    method: str = "ftqk"
    R: int = 100
    D: int = 20
    seed: int = 0
    M: int = 100
    sigma: tuple[float, ...] = (0.0,)
    noise_seed: int = 0
    eps_grid: tuple[float, ...] = DEFAULT_EPS_GRID
    lambda_clamp_tol: float = 1e-6
    weight_cap_tol: float | None = None
    bound_slack: float = 0.5
    gap_merge_tol: float | None = None
    stabilize: bool = True
    T_min: float = 0.02
    T_max: float = 100.0
    points: int = 200
    directory: str = "."
    curve: str = "curve.csv"
    samples: str = "samples.jsonl"
    diagnostics: str = "diagnostics.json"

    def validate(self) -> "RunConfig":
        problems = []
        try:
            ChainSpec(self.N, self.J)
        except ValueError as exc:
            problems.append(f"model: {exc}")
        if self.method not in METHODS:
            problems.append(f"run.method: expected one of {', '.join(METHODS)}, got {self.method!r}")
        if self.D < 1 and self.D != FULL_DEPTH:
            problems.append("sampling.D: must be >= 1 or 'full'")
        for name in ("R", "M", "points"):
            if getattr(self, name) < 1:
                problems.append(f"{_SECTION_OF[name]}.{name}: must be >= 1")
        if not self.sigma or any(s < 0 for s in self.sigma):
            problems.append("noise.sigma: needs one or more non-negative values")
        if len(set(self.sigma)) != len(self.sigma):
            problems.append("noise.sigma: duplicate values")
        if not 0 < self.T_min < self.T_max:
            problems.append("temperature: need 0 < T_min < T_max")
        if self.method == "ed" and self.N > 16:
            problems.append(f"model.N: exact diagonalization limited to N <= 16 (got {self.N}); use method = ftlm")
        try:
            self.regularization(self.sigma[0] if self.sigma else 0.0)
        except ValueError as exc:
            problems.append(f"regularization: {exc}")
        if problems:
            raise ConfigError(problems)
        return self

    @property
    def spec(self) -> ChainSpec:
        return ChainSpec(self.N, self.J)

    @property
    def grid(self) -> TemperatureGrid:
        return TemperatureGrid.log(self.T_min, self.T_max, self.points)

    def regularization(self, sigma: float) -> RegularizationConfig:
        kw = dict(
            eps_grid=self.eps_grid,
            lambda_clamp_tol=self.lambda_clamp_tol,
            bound_slack=self.bound_slack,
            gap_merge_tol=self.gap_merge_tol,
            stabilize=self.stabilize,
        )
        if self.weight_cap_tol is not None:
            kw["weight_cap_tol"] = self.weight_cap_tol
        return RegularizationConfig.for_noise(sigma, **kw)


# INI layout: section -> keys, in serialization order
_LAYOUT = {
    "model": ("N", "J"),
    "run": ("method",),
    "sampling": ("R", "D", "seed"),
    "ftlm": ("M",),
    "noise": ("sigma", "noise_seed"),
    "regularization": ("eps_grid", "lambda_clamp_tol", "weight_cap_tol", "bound_slack", "gap_merge_tol", "stabilize"),
    "temperature": ("T_min", "T_max", "points"),
    "output": ("directory", "curve", "samples", "diagnostics"),
}
_SECTION_OF = {k: s for s, keys in _LAYOUT.items() for k in keys}
_TYPES = {f.name: f.type for f in fields(RunConfig)}
_OPTIONAL = {"weight_cap_tol", "gap_merge_tol"}


def _parse_value(name: str, raw: str):
    kind = _TYPES[name]
    raw = raw.strip()
    if name in _OPTIONAL:
        return None if raw.lower() == "auto" else float(raw)
    if name == "D" and raw.lower() == "full":
        return FULL_DEPTH
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind == "bool":
        low = raw.lower()
        if low in ("true", "yes", "on", "1"):
            return True
        if low in ("false", "no", "off", "0"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind.startswith("tuple"):
        return tuple(float(x) for x in raw.replace(",", " ").split())
    return raw


def _format_value(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse INI text into a validated ``RunConfig``; unknown keys are errors."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keys are case sensitive (N vs n)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError([f"{source}: {exc}"]) from exc
    problems, values = [], {}
    for section in parser.sections():
        if section not in _LAYOUT:
            problems.append(f"[{section}]: unknown section")
            continue
        for key, raw in parser.items(section):
            if key not in _LAYOUT[section]:
                problems.append(f"{section}.{key}: unknown key")
                continue
            try:
                values[key] = _parse_value(key, raw)
            except ValueError as exc:
                problems.append(f"{section}.{key}: {exc}")
    if "N" not in values and not any(p.startswith("model.N") for p in problems):
        problems.append("model.N: required")
    if problems:
        raise ConfigError(problems)
    try:
        return RunConfig(**values).validate()
    except TypeError as exc:
        raise ConfigError([str(exc)]) from exc


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError([f"{path}: {exc.strerror}"]) from exc
    return parse_config(text, str(path))


def serialize_config(cfg: RunConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    data = asdict(cfg)
    if data["D"] == FULL_DEPTH:
        data["D"] = "full"
    for section, keys in _LAYOUT.items():
        parser[section] = {k: _format_value(data[k]) for k in keys}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


PRESETS = {
    "fig1_n14": RunConfig(N=14, method="ftqk", R=100, D=20),
    "fig1_n24": RunConfig(N=24, method="ftqk", R=100, D=60),
    "fig1_n24_ref": RunConfig(N=24, method="ftlm", R=400, M=100),
    "fig2_noise": RunConfig(N=14, method="ftqk", R=200, D=50, sigma=(1e-4, 1e-3)),
}
_PRESET_NOTES = {
    "fig1_n14": "noiseless N=14 curves (minutes)",
    "fig1_n24": "noiseless N=24 curves (long running, large memory)",
    "fig1_n24_ref": "FTLM reference for fig1_n24 (long running)",
    "fig2_noise": "N=14 with Gaussian overlap noise at two levels",
}


def _tagged(name: str, sigma: float, multi: bool) -> str:
    if not multi:
        return name
    stem, dot, ext = name.rpartition(".")
    return f"{stem}_sigma{sigma:g}.{ext}" if dot else f"{name}_sigma{sigma:g}"


def _overlap_cache(cfg: RunConfig, out: Path) -> Path:
    depth = "full" if cfg.D == FULL_DEPTH else cfg.D
    return out / f"overlaps_N{cfg.N}_J{cfg.J:g}_R{cfg.R}_D{depth}_seed{cfg.seed}.json"


def execute(cfg: RunConfig, out: Path, workers: int = 1, cache_overlaps: bool = False) -> dict:
    """Run one configuration, write its artifacts and return the diagnostics."""
    out.mkdir(parents=True, exist_ok=True)
    spec, grid = cfg.spec, cfg.grid
    start = time.perf_counter()
    report = {"method": cfg.method, "N": cfg.N, "config": serialize_config(cfg)}

    if cfg.method == "ed":
        curve = ed_thermo(spec, grid, ed_spectra(spec))
        curve.to_csv(out / cfg.curve)
    elif cfg.method == "ftlm":
        samples = ftlm_samples(spec, FtlmConfig(cfg.R, cfg.M, cfg.seed))
        curve = observables(samples, sector_dims(spec), spec.N, grid, provenance="ftlm")
        curve.to_csv(out / cfg.curve)
        write_samples(samples, out / cfg.samples)
    else:
        model = build_model(spec)
        depth = sector_dims(spec) if cfg.D == FULL_DEPTH else cfg.D
        cache = _overlap_cache(cfg, out)
        if cache_overlaps and cache.exists():
            log.info("reusing overlaps from %s", cache)
            seqs = read_overlaps_json(cache)
        else:
            log.info("propagating %d vectors in %d sectors", cfg.R, len(model))
            seqs = clean_overlaps(model, cfg.R, depth, cfg.seed, workers=workers)
            if cache_overlaps:
                write_overlaps_json(seqs, cache)
        multi = len(cfg.sigma) > 1
        report["runs"] = {}
        for sigma in cfg.sigma:
            samples, diag = reconstruct(seqs, model, depth, cfg.regularization(sigma), sigma, cfg.noise_seed)
            curve = observables(samples, sector_dims(spec), spec.N, grid, provenance="ftqk")
            curve.to_csv(out / _tagged(cfg.curve, sigma, multi))
            write_samples(samples, out / _tagged(cfg.samples, sigma, multi))
            report["runs"][f"{sigma:g}"] = diag.summary()
    report["wall_time_s"] = round(time.perf_counter() - start, 3)
    (out / cfg.diagnostics).write_text(json.dumps(report, indent=2) + "\n")
    return report


def compare_curves(a: ThermoCurve, b: ThermoCurve, T_min: float | None = None, T_max: float | None = None) -> dict:
    """Per-observable maximum absolute and RMS deviations with their locations."""
    if a.T.shape != b.T.shape or not np.allclose(a.T, b.T, rtol=1e-12, atol=0):
        raise ConfigError(["temperature grids differ"])
    sel = np.ones(a.T.size, dtype=bool)
    if T_min is not None:
        sel &= a.T >= T_min
    if T_max is not None:
        sel &= a.T <= T_max
    if not sel.any():
        raise ConfigError(["no temperatures inside the requested window"])
    T = a.T[sel]
    report = {}
    for name in OBSERVABLES:
        d = np.abs(a.observable(name)[sel] - b.observable(name)[sel])
        i = int(np.argmax(d))
        report[name] = {"max_abs": float(d[i]), "T_at_max": float(T[i]), "rms": float(np.sqrt(np.mean(d**2)))}
    return report


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.output_dir or cfg.directory)
    report = execute(cfg, out, args.workers, args.cache_overlaps)
    for sigma, diag in report.get("runs", {}).items():
        if diag["rejected"]:
            log.warning("sigma=%s: rejected samples (r, q): %s", sigma, diag["rejected_samples"])
    print(f"wrote {out / cfg.curve} ({report['wall_time_s']} s)")
    return EXIT_OK


def _cmd_compare(args) -> int:
    try:
        a, b = ThermoCurve.from_csv(args.a), ThermoCurve.from_csv(args.b)
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError([f"cannot read curve: {exc}"]) from exc
    report = compare_curves(a, b, args.T_min, args.T_max)
    if args.json:
        print(json.dumps(report, indent=2))
    else:
        print(f"{'observable':<12}{'max_abs':>14}{'T_at_max':>12}{'rms':>14}")
        for name, r in report.items():
            print(f"{name:<12}{r['max_abs']:>14.6e}{r['T_at_max']:>12.5g}{r['rms']:>14.6e}")
    return EXIT_OK


def _cmd_presets(args) -> int:
    if args.action == "list":
        for name in PRESETS:
            print(f"{name:<14}{_PRESET_NOTES[name]}")
        return EXIT_OK
    if args.name not in PRESETS:
        raise ConfigError([f"unknown preset {args.name!r}; available: {', '.join(PRESETS)}"])
    sys.stdout.write(serialize_config(PRESETS[args.name]))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ftqk", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute a run configuration")
    run.add_argument("config")
    run.add_argument("--workers", type=int, default=1)
    run.add_argument("--output-dir")
    run.add_argument("--cache-overlaps", action="store_true", help="store and reuse noiseless overlap sequences")
    run.set_defaults(func=_cmd_run)

    cmp_ = sub.add_parser("compare", help="deviations between two curve CSV files")
    cmp_.add_argument("a")
    cmp_.add_argument("b")
    cmp_.add_argument("--T-min", type=float)
    cmp_.add_argument("--T-max", type=float)
    cmp_.add_argument("--json", action="store_true")
    cmp_.set_defaults(func=_cmd_compare)

    pre = sub.add_parser("presets", help="list or print shipped configurations")
    pre.add_argument("action", choices=("list", "show"))
    pre.add_argument("name", nargs="?")
    pre.set_defaults(func=_cmd_presets)
    return p


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("FTQK_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    args = build_parser().parse_args(argv)
    if getattr(args, "workers", 1) < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "presets" and args.action == "show" and not args.name:
        print("error: presets show needs a preset name", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_CONFIG
    except (ThermoError, KrylovError, LanczosError, PropagationError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
