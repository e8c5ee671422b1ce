"""Command-line entry point: ``fplab {run,validate,calibrate,report,schema}``.

Exit codes: 0 ok, 1 checksum mismatch (``report``), 2 config invalid,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__, io
from .errors import AliasingError, CalibrationError, ConfigError, DivergentMomentError, NumericalBlowUp

EXIT_OK, EXIT_MISMATCH, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2, 3


def _load(args):
    from .experiment import load_config, validate_config

    if args.config is None:
        raise ConfigError(["[cli] --config is required"])
    try:
        cfg = load_config(args.config)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError([f"[cli] cannot read {args.config}: {exc}"]) from exc
    if args.seed is not None:
        raw = cfg.resolved()
        raw["seed"] = args.seed
        cfg = validate_config(raw)
    return cfg


def cmd_validate(args) -> int:
    cfg = _load(args)
    print(json.dumps({"valid": True, "example": cfg.example, "n_v": cfg.n_v, "n_z": cfg.n_z,
                      "refine": cfg.refine}, sort_keys=True))
    return EXIT_OK


def cmd_run(args) -> int:
    from .experiment import run_experiment

    cfg = _load(args)
    out = Path(args.out or "fplab-out")
    man = run_experiment(cfg, out, threads=args.threads)
    print(json.dumps({"out": str(out), **man.summary}, sort_keys=True, default=float))
    return EXIT_OK


def cmd_calibrate(args) -> int:
    from .experiment import resolve_lambda

    cfg = _load(args)
    if cfg.lam_policy["policy"] != "calibrate":
        cfg.lam_policy = {**cfg.lam_policy, "policy": "calibrate", "grid": cfg.lam_policy.get(
            "grid", [0, 0.5, 1, 2, 5, 10, 20, 50, 100, 200, 500, 1000, 2000, 5000]), "M": 1000, "event": "norm"}
    lam, rec = resolve_lambda(cfg, threads=args.threads)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        io.dump_json(rec, Path(args.out) / "calibration.json")
    print(json.dumps({"lambda": lam, "K": rec["K"], "r": rec["r"]}, sort_keys=True))
    return EXIT_OK


def cmd_report(args) -> int:
    from .experiment import RunManifest

    root = Path(args.out or ".")
    man = RunManifest.load(root / "manifest.json")
    checks = man.verify(root)
    print(json.dumps({"version": man.version, "files": checks, "summary": man.summary}, sort_keys=True,
                     default=float))
    return EXIT_OK if all(checks.values()) else EXIT_MISMATCH


def cmd_schema(args) -> int:
    from .experiment import CONFIG_SCHEMA

    text = json.dumps(CONFIG_SCHEMA, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fplab", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"fplab {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, fn, hlp in [("run", cmd_run, "run the full pipeline"),
                          ("validate", cmd_validate, "check a config against schema and hypotheses"),
                          ("calibrate", cmd_calibrate, "calibrate the shift lambda only"),
                          ("report", cmd_report, "verify a run directory against its manifest"),
                          ("schema", cmd_schema, "print the config JSON schema")]:
        p = sub.add_parser(name, help=hlp)
        p.add_argument("--config", help="JSON config or manifest.json")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output directory (file for 'schema')")
        p.add_argument("--threads", type=int, default=1, help="worker threads (results do not depend on it)")
        p.set_defaults(func=fn)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        for p in exc.problems:
            print(f"config error: {p}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalBlowUp, CalibrationError, DivergentMomentError, AliasingError, FloatingPointError) as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
