"""Command-line entry point: ``drum {simulate,run,fit,predict,evaluate,grid,report}``.

Every subcommand accepts ``--config FILE`` (YAML), ``--seed`` and ``--threads``.
For ``run`` and ``grid`` the file is an experiment config (see
:mod:`drum.harness.config`); for the other subcommands its keys are flag names
(``source``, ``target``, ``out``...) and act as defaults. Explicit flags win.
The default output root is ``$DRUM_OUTPUT_ROOT`` (``drum-out`` when unset).

Exit status: 0 on success, 2 for configuration or input errors, 1 for
failures during training or solving.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import yaml

from ..errors import ConfigError, InputError
from ..simgen import SCALES
from . import commands as C
from .config import default_output_root, load_config

log = logging.getLogger("drum")


def _floats(text: str) -> list:
    return [float(t) for t in text.split(",") if t.strip()]


def _ints(text: str) -> list:
    return [int(t) for t in text.split(",") if t.strip()]


def _names(text: str) -> list:
    return [t.strip() for t in text.split(",") if t.strip()]


def _mapping(text: str | None) -> dict | None:
    """Inline JSON/YAML mapping, or a path to a YAML/JSON file."""
    if text is None:
        return None
    if os.path.exists(text):
        with open(text, encoding="utf-8") as fh:
            blob = yaml.safe_load(fh)
    else:
        blob = yaml.safe_load(text)
    if not isinstance(blob, dict):
        raise ConfigError("--hp must be a mapping")
    return blob


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML file with defaults for this subcommand")
    common.add_argument("--seed", type=int, help="run seed (default 0)")
    common.add_argument("--threads", type=int, help="worker threads (default 1)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="drum", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="write a simulated dataset as CSV")
    s.add_argument("--setting", choices=("I", "II", "III"))
    s.add_argument("--d-a", dest="d_A", type=int)
    s.add_argument("--mc", type=int, help="test sets per scale (default 100)")
    s.add_argument("--scales", type=_floats)
    s.add_argument("--out")

    r = sub.add_parser("run", parents=[common], help="train methods and run the Monte-Carlo evaluation")
    r.add_argument("--setting", choices=("I", "II", "III"))
    r.add_argument("--d-a", dest="d_A", type=_ints)
    r.add_argument("--methods", type=_names, help="comma-separated method names")
    r.add_argument("--scales", type=_floats)
    r.add_argument("--mc", type=int)
    r.add_argument("--seeds", type=_ints, help="comma-separated seeds (overrides --seed)")
    r.add_argument("--profile")
    r.add_argument("--parallel-methods", dest="parallel_methods", action="store_true", default=None)
    r.add_argument("--out", dest="output_dir")

    f = sub.add_parser("fit", parents=[common], help="fit one method on CSV data")
    f.add_argument("--source")
    f.add_argument("--target")
    f.add_argument("--schema")
    f.add_argument("--method")
    f.add_argument("--profile")
    f.add_argument("--hp", help="hyperparameter overrides: inline YAML/JSON mapping or a file")
    f.add_argument("--out")

    pr = sub.add_parser("predict", parents=[common], help="predict with a fitted model bundle")
    pr.add_argument("--model")
    pr.add_argument("--data")
    pr.add_argument("--out")

    e = sub.add_parser("evaluate", parents=[common], help="metrics with bootstrap CIs on a labeled file")
    e.add_argument("--model")
    e.add_argument("--data")
    e.add_argument("--reference", help="second model bundle for paired comparisons")
    e.add_argument("--bootstrap", dest="B", type=int, help="bootstrap replicates (default 2000)")
    e.add_argument("--out")

    g = sub.add_parser("grid", parents=[common], help="validation grid search")
    g.add_argument("--out", dest="output_dir")

    rp = sub.add_parser("report", parents=[common], help="merge run manifests into tables and plot data")
    rp.add_argument("manifests", nargs="*")
    rp.add_argument("--out")
    return p


_REQUIRED = {
    "simulate": ("setting",),
    "fit": ("source", "target", "schema", "method"),
    "predict": ("model", "data", "out"),
    "evaluate": ("model", "data"),
}


def _file_defaults(args: argparse.Namespace) -> argparse.Namespace:
    """Fill unset flags from ``--config`` for the CSV-level subcommands."""
    if not args.config:
        return args
    with open(args.config, encoding="utf-8") as fh:
        blob = yaml.safe_load(fh) or {}
    if not isinstance(blob, dict):
        raise ConfigError(f"{args.config}: config must be a mapping")
    for key, value in blob.items():
        attr = key.replace("-", "_")
        if attr == "d_a":
            attr = "d_A"
        if not hasattr(args, attr) or attr in ("command", "config"):
            raise ConfigError(f"{args.config}: unknown key {key!r} for '{args.command}'")
        if getattr(args, attr) is None:
            setattr(args, attr, value)
    return args


def _out(path: str | None, default: str) -> str:
    return path or os.path.join(default_output_root(), default)


def dispatch(args: argparse.Namespace) -> object:
    cmd = args.command
    threads = args.threads or 1
    if cmd in ("run", "grid"):
        cli = {k: getattr(args, k, None) for k in (
            "setting", "d_A", "methods", "scales", "mc", "seeds", "profile", "output_dir", "parallel_methods"
        )}
        if cli["seeds"] is None and args.seed is not None:
            cli["seeds"] = [args.seed]
        cli["threads"] = args.threads
        cfg = load_config(args.config, **cli)
        if cmd == "run":
            man = C.cmd_run(cfg)
            print(json.dumps({"output_dir": cfg.out_dir(), "metrics": man.metrics, "errors": man.errors}, indent=2))
            return man
        res = C.cmd_grid(cfg)
        print(json.dumps({"best": res["best"], "output_dir": cfg.out_dir()}, indent=2))
        return res

    args = _file_defaults(args)
    for key in _REQUIRED.get(cmd, ()):
        if getattr(args, key) is None:
            raise ConfigError(f"'{cmd}' needs --{key.replace('_', '-').lower()}")
    seed = args.seed if args.seed is not None else 0
    if cmd == "simulate":
        tag = f"simulate-setting{args.setting}-seed{seed}"
        files = C.cmd_simulate(
            args.setting, seed, _out(args.out, tag), args.d_A, args.scales or SCALES, args.mc if args.mc is not None else 100
        )
        print(f"wrote {len(files)} files under {_out(args.out, tag)}")
        return files
    if cmd == "fit":
        out = _out(args.out, f"fit-{C.slug(args.method)}-seed{seed}")
        hp = args.hp if isinstance(args.hp, dict) else _mapping(args.hp)
        man = C.cmd_fit(args.source, args.target, args.schema, args.method, out, seed, args.profile or "realdata", hp)
        print(json.dumps(man, indent=2))
        return man
    if cmd == "predict":
        preds = C.cmd_predict(args.model, args.data, args.out)
        print(f"wrote {len(preds)} predictions to {args.out}")
        return preds
    if cmd == "evaluate":
        out = _out(args.out, "evaluate")
        rep = C.cmd_evaluate(args.model, args.data, out, args.reference, args.B or 2000, seed)
        print(rep.to_text() if rep.kind == "classification" else rep.to_json())
        return rep
    if cmd == "report":
        written = C.cmd_report(args.manifests, _out(args.out, "report"))
        print(json.dumps(written, indent=2))
        return written
    raise ConfigError(f"unknown command {cmd!r}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        dispatch(args)
    except (ConfigError, InputError, OSError) as exc:
        print(f"drum {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except RuntimeError as exc:
        print(f"drum {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
