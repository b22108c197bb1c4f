"""Command-line entry point.

Exit codes: 0 success (flagged partial failures included), 2 configuration or
validation error, 3 every computational point failed.
"""
from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
import tempfile
import time
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, MuxprError
from .experiments import (
    SPIKE_RULES,
    FocusConfig,
    SweepConfig,
    default_schedule,
    run_focusing,
    run_spectrum,
    run_sweep,
    write_focus_csv,
    write_pgm,
    write_sweep_csv,
)
from .spectral import count_spikes, write_spectrum_csv

EXIT_OK, EXIT_CONFIG, EXIT_FAILED = 0, 2, 3
MANIFEST = "manifest.json"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def parse_number(text: str) -> float:
    """Float or fraction literal such as ``5/12``."""
    try:
        return float(Fraction(text.strip()))
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"cannot parse number {text!r}") from exc


def parse_list(text: str) -> list[float]:
    if isinstance(text, (list, tuple)):
        return [float(v) if not isinstance(v, str) else parse_number(v) for v in text]
    return [parse_number(t) for t in str(text).split(",") if t.strip()]


def _common(p: argparse.ArgumentParser, d_default=None, weights_default=None):
    p.add_argument("--config", help="JSON file with parameters; inline flags take precedence")
    p.add_argument("--d", type=int, default=d_default)
    p.add_argument("--weights", default=weights_default, help="comma list, fractions allowed (5/12,4/12,3/12)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--noise-sigma", type=float, default=None)
    p.add_argument("--spike-rule", choices=SPIKE_RULES, default=None)
    p.add_argument("--threads", type=int, default=None, help="worker pool size (default $MPR_THREADS or 1)")
    p.add_argument("--force", action="store_true", help="overwrite an existing manifest")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="muxpr", description="Multiplexed phase retrieval experiments")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("sweep", help="cosine similarity versus oversampling ratio")
    _common(p)
    p.add_argument("--alphas", default=None, help="comma list of oversampling ratios")
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--kind", choices=["gaussian", "phase"], default=None)

    p = sub.add_parser("spectrum", help="eigenvalues of one weighted covariance matrix")
    _common(p)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--kind", choices=["gaussian", "phase"], default=None)
    p.add_argument("--subtract-identity", action="store_true", default=None)

    p = sub.add_parser("focus", help="simulated two-target focusing through a scattering medium")
    _common(p)
    p.add_argument("--n-max", type=int, default=None)
    p.add_argument("--grid", type=int, default=None)
    return parser


DEFAULTS = {
    "sweep": {"trials": 10, "kind": "gaussian", "seed": 0, "noise_sigma": 0.0, "spike_rule": "mp-edge", "out": "sweep-out"},
    "spectrum": {"kind": "gaussian", "seed": 0, "noise_sigma": 0.0, "spike_rule": "mp-edge",
                 "subtract_identity": False, "out": "spectrum-out"},
    "focus": {"d": 256, "weights": "1,0.7", "n_max": 10000, "grid": 32, "seed": 0, "noise_sigma": 0.0,
              "spike_rule": "mp-edge", "out": "focus-out"},
}
_SKIP = {"command", "config", "force", "threads"}


def merge_config(args: argparse.Namespace) -> dict:
    """Defaults < JSON config file < inline flags."""
    merged = dict(DEFAULTS[args.command])
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"--config: cannot read {args.config}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("--config: expected a JSON object")
        merged.update({k.replace("-", "_"): v for k, v in loaded.items()})
    for k, v in vars(args).items():
        if k not in _SKIP and v is not None:
            merged[k] = v
    return merged


def _require(cfg: dict, *keys):
    for k in keys:
        if cfg.get(k) is None:
            raise ConfigError(f"--{k.replace('_', '-')} is required")


def _threads(args) -> int:
    if args.threads is not None:
        t = args.threads
    else:
        try:
            t = int(os.environ.get("MPR_THREADS", "1"))
        except ValueError as exc:
            raise ConfigError("MPR_THREADS must be an integer") from exc
    if t < 1:
        raise ConfigError("--threads must be >= 1")
    return t


class OutputDir:
    """Files are staged in a temporary sibling directory; ``commit`` moves them
    into place, creating the target directory with a single rename when it
    does not exist yet."""

    def __init__(self, path, force: bool):
        self.path = Path(path)
        if (self.path / MANIFEST).exists() and not force:
            raise ConfigError(f"{self.path / MANIFEST} exists; pass --force to overwrite")
        if self.path.exists() and not self.path.is_dir():
            raise ConfigError(f"--out: {self.path} is not a directory")
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.stage = Path(tempfile.mkdtemp(prefix=f".{self.path.name}.", dir=self.path.parent))

    def file(self, name: str) -> Path:
        return self.stage / name

    def commit(self) -> None:
        if not self.path.exists():
            os.rename(self.stage, self.path)
            return
        for f in sorted(self.stage.iterdir()):
            os.replace(f, self.path / f.name)
        self.stage.rmdir()

    def abort(self) -> None:
        shutil.rmtree(self.stage, ignore_errors=True)


def _manifest(command, cfg, extra, started) -> dict:
    return {
        "subcommand": command,
        "version": __version__,
        "master_seed": cfg.get("seed"),
        "config": cfg,
        "output_dir": str(cfg.get("out")),
        "wall_clock_seconds": time.perf_counter() - started,
        **extra,
    }


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def cmd_sweep(args) -> int:
    cfg = merge_config(args)
    _require(cfg, "d", "weights", "alphas")
    config = SweepConfig(
        d=int(cfg["d"]),
        weights=tuple(parse_list(cfg["weights"])),
        alphas=tuple(parse_list(cfg["alphas"])),
        trials=int(cfg["trials"]),
        kind=cfg["kind"],
        noise_sigma=float(cfg["noise_sigma"]),
        spike_rule=cfg["spike_rule"],
        seed=int(cfg["seed"]),
    )
    workers = _threads(args)
    out = OutputDir(cfg["out"], args.force)
    started = time.perf_counter()
    try:
        records = run_sweep(config, workers=workers)
        rows = write_sweep_csv(out.file("sweep.csv"), records)
        failed = [{"alpha": r.alpha, "trial": r.trial, "error": r.error} for r in records if r.failed]
        _write_json(out.file(MANIFEST), _manifest("sweep", {**cfg, **config.to_dict()},
                                                  {"rows": rows, "failed_points": failed}, started))
        out.commit()
    except BaseException:
        out.abort()
        raise
    for f in failed:
        print(f"warning: alpha={f['alpha']} trial={f['trial']} failed: {f['error']}", file=sys.stderr)
    print(f"wrote {rows} rows to {Path(cfg['out']) / 'sweep.csv'}")
    return EXIT_FAILED if len(failed) == len(records) else EXIT_OK


def cmd_spectrum(args) -> int:
    cfg = merge_config(args)
    _require(cfg, "d", "weights", "alpha")
    weights = parse_list(cfg["weights"])
    config = SweepConfig(
        d=int(cfg["d"]),
        weights=tuple(weights),
        alphas=(float(cfg["alpha"]),),
        trials=1,
        kind=cfg["kind"],
        noise_sigma=float(cfg["noise_sigma"]),
        spike_rule=cfg["spike_rule"],
        seed=int(cfg["seed"]),
    )
    out = OutputDir(cfg["out"], args.force)
    started = time.perf_counter()
    try:
        rec = run_spectrum(config, subtract_identity=bool(cfg["subtract_identity"]))
        if not rec.failed:
            write_spectrum_csv(out.file("spectrum.csv"), rec.eigenvalues)
        summary = {
            "spike_count": rec.spike_count,
            "bulk_edge_spike_count": None if rec.failed else count_spikes(rec.eigenvalues),
            "top_eigenvalues": [] if rec.failed else [float(v) for v in rec.eigenvalues[:10]],
            "rho": rec.rho,
            "failed": rec.failed,
            "error": rec.error,
        }
        _write_json(out.file("summary.json"), summary)
        _write_json(out.file(MANIFEST), _manifest("spectrum", {**cfg, **config.to_dict()}, {}, started))
        out.commit()
    except BaseException:
        out.abort()
        raise
    if rec.failed:
        print(f"error: {rec.error}", file=sys.stderr)
        return EXIT_FAILED
    print(f"wrote {rec.eigenvalues.size} eigenvalues to {Path(cfg['out']) / 'spectrum.csv'}")
    return EXIT_OK


def cmd_focus(args) -> int:
    cfg = merge_config(args)
    n_max = int(cfg["n_max"])
    if n_max < 1:
        raise ConfigError("--n-max must be >= 1")
    config = FocusConfig(
        d=int(cfg["d"]),
        grid=int(cfg["grid"]),
        weights=tuple(parse_list(cfg["weights"])),
        n_schedule=default_schedule(n_max),
        seed=int(cfg["seed"]),
        noise_sigma=float(cfg["noise_sigma"]),
        spike_rule=cfg["spike_rule"],
    )
    out = OutputDir(cfg["out"], args.force)
    started = time.perf_counter()
    try:
        rec = run_focusing(config)
        write_focus_csv(out.file("focusing.csv"), rec)
        images = rec.sbr["images"] or []
        for k, img in enumerate(images):
            write_pgm(out.file(f"focus_target{k}.pgm"), img)
        extra = {"targets": [list(t) for t in config.targets], "flags": rec.sbr["flags"], "error": rec.error}
        _write_json(out.file(MANIFEST), _manifest("focus", {**cfg, **config.to_dict()}, extra, started))
        out.commit()
    except BaseException:
        out.abort()
        raise
    if rec.failed and not rec.sbr["sbr"]:
        print(f"error: {rec.error}", file=sys.stderr)
        return EXIT_FAILED
    final = rec.sbr["sbr"][-1]
    print("final SBR: " + ", ".join(f"target {k}: {v:.1f}" for k, v in enumerate(final)))
    return EXIT_OK


COMMANDS = {"sweep": cmd_sweep, "spectrum": cmd_spectrum, "focus": cmd_focus}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except MuxprError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG if isinstance(exc, ConfigError) else EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
