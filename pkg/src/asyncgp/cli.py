"""Command line entry point: ``asyncgp run|compare|kernels``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import AsyncGPError, InputError
from .experiment import PRESETS, compare_report, format_table, preset, run_experiment
from .kernels import KernelSpec, lipschitz_constant, lipschitz_closed_form, lipschitz_oracle, rq_lipschitz_corrected


def _parse_params(text: str) -> dict:
    """``"sigma_f=1,sigma_l=0.5,lengthscales=1;2"`` -> keyword dict (``;`` separates vector entries)."""
    out = {}
    if not text:
        return out
    for item in text.split(","):
        if not item.strip():
            continue
        if "=" not in item:
            raise InputError(f"expected key=value, got {item!r}")
        key, val = (s.strip() for s in item.split("=", 1))
        try:
            out[key] = [float(v) for v in val.split(";")] if ";" in val else float(val)
        except ValueError:
            raise InputError(f"parameter {key} is not numeric: {val!r}") from None
    if "dim" in out:
        out["dim"] = int(out["dim"])
    return out


def load_config(args) -> dict:
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise InputError(f"cannot read config {args.config}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise InputError(f"{args.config}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    else:
        cfg = preset(args.preset)
    if args.aggregator is not None:
        cfg["aggregator"] = args.aggregator
    if args.ibar is not None:
        cfg["info_capacity"] = args.ibar
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.duration is not None:
        cfg["duration_s"] = args.duration
    if args.interval is not None:
        cfg["broadcast_interval_s"] = args.interval
    if args.dataset:
        cols = [c.strip() for c in (args.inputs or "").split(",") if c.strip()]
        if not cols or not args.target:
            raise InputError("--dataset needs --inputs and --target")
        cfg["stream"] = {"type": "csv", "path": args.dataset, "inputs": cols, "target": args.target,
                         "warmup": args.warmup}
        kern = dict(cfg.get("kernel", {}))
        kern.pop("lengthscales", None)
        kern.pop("center", None)
        kern["dim"] = len(cols)
        cfg["kernel"] = kern
    return cfg


def cmd_run(args) -> int:
    cfg = load_config(args)
    dirs = run_experiment(cfg, out=args.out, runs=args.runs)
    for d in dirs:
        print(d)
    return 0


def cmd_compare(args) -> int:
    rows = compare_report(args.run_dirs)
    if args.json:
        print(json.dumps(rows, indent=2, sort_keys=True))
    else:
        print(format_table(rows))
    return 0


def cmd_lipschitz(args) -> int:
    spec = KernelSpec.from_params(args.family, **_parse_params(args.params))
    if args.oracle:
        report = lipschitz_oracle(spec)
        out = report.to_json()
    else:
        out = {"family": spec.family.value, "lipschitz": lipschitz_constant(spec)}
        try:
            out["closed_form"] = lipschitz_closed_form(spec)
        except AsyncGPError as exc:
            out["closed_form"] = None
            out["closed_form_error"] = str(exc)
        if spec.family.value == "rq":
            out["corrected_closed_form"] = rq_lipschitz_corrected(spec)
    if args.json:
        print(json.dumps(out, sort_keys=True))
    else:
        for key, val in out.items():
            print(f"{key}: {val}")
    if args.oracle and not out.get("agrees", True) and out["family"] not in ("periodic", "rq"):
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="asyncgp", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a regression or control experiment")
    src = r.add_mutually_exclusive_group()
    src.add_argument("--preset", choices=PRESETS, default="table2")
    src.add_argument("--config", help="scenario JSON file")
    r.add_argument("--aggregator", help="asyncdgp|bcm|rbcm|poe|gpoe|moe|all")
    r.add_argument("--ibar", type=int, help="information set capacity")
    r.add_argument("--seed", type=int)
    r.add_argument("--duration", type=float, help="simulated seconds")
    r.add_argument("--interval", type=float, help="broadcast interval in seconds")
    r.add_argument("--runs", type=int, help="Monte-Carlo repetitions (control mode)")
    r.add_argument("--dataset", help="CSV file to stream instead of the synthetic source")
    r.add_argument("--inputs", help="comma separated input columns of --dataset")
    r.add_argument("--target", help="target column of --dataset")
    r.add_argument("--warmup", type=int, default=0, help="dataset rows preloaded at t=0")
    r.add_argument("--out", help="output root (default $ASYNCGP_OUT or ./runs)")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="tabulate metrics of runs sharing a prediction stream")
    c.add_argument("run_dirs", nargs="+")
    c.add_argument("--json", action="store_true")
    c.set_defaults(func=cmd_compare)

    k = sub.add_parser("kernels", help="kernel utilities")
    ksub = k.add_subparsers(dest="kernel_command", required=True)
    lip = ksub.add_parser("lipschitz", help="Lipschitz constant of a kernel")
    lip.add_argument("--family", required=True)
    lip.add_argument("--params", default="", help="k=v pairs, e.g. sigma_f=1,sigma_l=0.5")
    lip.add_argument("--oracle", action="store_true", help="also run the numerical oracle")
    lip.add_argument("--json", action="store_true")
    lip.set_defaults(func=cmd_lipschitz)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except AsyncGPError as exc:
        print(f"asyncgp: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
