"""Command-line entry point: ``funmixed {fit,test,fpca,simulate,all}``.

Settings come from RunConfig defaults, then the ``[run]`` section of an
optional INI file (``--config``), then explicit flags. On failure a JSON
error summary is written to stderr and the exit code is nonzero.
"""

import argparse
import configparser
import dataclasses
import json
import logging
import sys

from .pipeline import RunConfig, fmt, run, write_simulated_input

STAGES = {"fit": ("fit",), "test": ("test",), "fpca": ("fpca",), "all": ("fit", "test", "fpca")}

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def _add_run_flags(p):
    for f in dataclasses.fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        p.add_argument(flag, dest=f.name, type=f.type, default=None, help=f"default: {f.default!r}")


def build_parser():
    parser = argparse.ArgumentParser(prog="funmixed", description="Functional mixed-effects analysis of short time series.")
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (
        ("fit", "select smoothing parameters and fit every gene"),
        ("test", "pooled permutation tests with FDR (reuses fits.csv)"),
        ("fpca", "functional PCA of the fitted mean curves (reuses fits.csv)"),
        ("all", "fit, test and fpca in one run"),
    ):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="INI file with a [run] section")
        _add_run_flags(p)
    p = sub.add_parser("simulate", help="write a synthetic input table")
    p.add_argument("--config", help="INI file with a [simulate] section")
    p.add_argument("--output", dest="output")
    p.add_argument("--n-genes", dest="n_genes", type=int)
    p.add_argument("--n-planted", dest="n_planted", type=int)
    p.add_argument("--effect", choices=("gender", "age"))
    p.add_argument("--effect-scale", dest="effect_scale", type=float)
    p.add_argument("--sigma2", dest="sigma2_true", type=float)
    p.add_argument("--seed", type=int)
    return parser


_SIM_DEFAULTS = {
    "output": "simulated.csv",
    "n_genes": 100,
    "n_planted": 0,
    "effect": "gender",
    "effect_scale": 5.0,
    "sigma2_true": 0.25,
    "seed": 0,
}


def _simulate(args):
    values = dict(_SIM_DEFAULTS)
    if args.config:
        parser = configparser.ConfigParser()
        if not parser.read(args.config):
            raise FileNotFoundError(args.config)
        if parser.has_section("simulate"):
            for k, v in parser["simulate"].items():
                if k not in values:
                    raise ValueError(f"unknown simulate key {k!r}")
                values[k] = type(values[k])(v)
    for k in values:
        v = getattr(args, k, None)
        if v is not None:
            values[k] = v
    output = values.pop("output")
    planted = write_simulated_input(output, **values)
    return {"output": output, "n_genes": values["n_genes"], "planted": planted}


def _config(args):
    overrides = {f.name: getattr(args, f.name) for f in dataclasses.fields(RunConfig)}
    if args.config:
        return RunConfig.from_file(args.config, **overrides)
    return RunConfig.from_mapping({}, **overrides)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING))
    try:
        if args.command == "simulate":
            summary = _simulate(args)
        else:
            config = _config(args)
            if not config.input:
                raise ValueError("an input table is required (--input or [run] input)")
            summary = run(config, STAGES[args.command])
    except Exception as exc:  # noqa: BLE001 - reported as JSON, never a traceback
        err = {"status": "error", "command": args.command, "error": type(exc).__name__, "message": str(exc)}
        json.dump(err, sys.stderr, sort_keys=True)
        sys.stderr.write("\n")
        return EXIT_USAGE if isinstance(exc, (ValueError, FileNotFoundError)) else EXIT_FAILURE
    json.dump({"status": "ok", "command": args.command, "summary": summary}, sys.stdout, indent=2, sort_keys=True, default=fmt)
    sys.stdout.write("\n")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
