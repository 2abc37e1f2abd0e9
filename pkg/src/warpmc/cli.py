"""Command line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _set_threads(n):
    if n:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(n)


def _override(values):
    """Parse ``key.sub=value`` pairs; values are read as YAML scalars."""
    import yaml

    from .config import ConfigError

    out = {}
    for item in values or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        k, v = item.split("=", 1)
        out[k] = yaml.safe_load(v)
    return out


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="warpmc", description="Learned large-timestep proposals: data, training, sampling, analysis.")
    p.add_argument("--threads", type=int, default=0, help="cap on BLAS threads (default: all cores)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp):
        sp.add_argument("config", help="run config (YAML or JSON)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", default=[],
                        help="override a config entry, e.g. training.lr=1e-3 (flags win over the file)")
        sp.add_argument("--output-dir", help="override output_dir")
        sp.add_argument("--seed", type=int, help="override seed")
        return sp

    with_config(sub.add_parser("gen-data", help="simulate trajectories and build the pair dataset"))
    t = with_config(sub.add_parser("train", help="train the flow (likelihood, then acceptance stage)"))
    t.add_argument("--stage", choices=["likelihood", "acceptance"], default="likelihood")
    t.add_argument("--dry-run", action="store_true", help="build the model, print parameter count, exit")
    s = with_config(sub.add_parser("sample", help="MH-corrected sampling with the trained flow"))
    s.add_argument("--steps", type=int, help="chain length M")
    s.add_argument("--batch", type=int, help="proposals per iteration B")
    s.add_argument("--system", help="system name (default: first held-out system)")
    s.add_argument("--checkpoint", help="checkpoint file (default: latest)")
    e = with_config(sub.add_parser("explore", help="fast biased exploration"))
    e.add_argument("--chains", type=int, help="parallel chains")
    e.add_argument("--steps", type=int, help="steps per chain")
    e.add_argument("--system")
    e.add_argument("--checkpoint")
    a = sub.add_parser("analyze", help="TICA, ESS/s and speed-up of a chain against a reference")
    a.add_argument("chain", help="model chain or trajectory file")
    a.add_argument("reference", help="reference (MD) trajectory or chain file")
    a.add_argument("--out", default="reports", help="report directory")
    a.add_argument("--lag", type=int, default=10)
    a.add_argument("--bins", type=int, default=50)
    a.add_argument("--component", type=int, default=0)
    a.add_argument("--temperature", type=float, default=1.0)
    a.add_argument("--model-time", type=float, help="override model wall-clock seconds")
    a.add_argument("--reference-time", type=float, help="override reference wall-clock seconds")
    c = with_config(sub.add_parser("eval-conditional", help="compare flow samples with an MD ensemble"))
    c.add_argument("--samples", type=int, default=1000)
    c.add_argument("--system")
    c.add_argument("--checkpoint")
    c.add_argument("--self-check", action="store_true", help="compare the MD oracle against itself")
    return p


def _load(args):
    from .config import load_config

    ov = _override(args.set)
    if args.output_dir:
        ov["output_dir"] = args.output_dir
    if args.seed is not None:
        ov["seed"] = args.seed
    return load_config(args.config, ov)


def run(args) -> dict:
    from . import pipeline

    if args.command == "analyze":
        return pipeline.analyze(args.chain, args.reference, args.out, args.lag, args.bins, args.component,
                                args.temperature, args.model_time, args.reference_time)
    cfg = _load(args)
    if args.command == "gen-data":
        return pipeline.gen_data(cfg)
    if args.command == "train":
        return pipeline.run_train(cfg, args.stage, args.dry_run)
    if args.command == "sample":
        return pipeline.run_sample(cfg, args.steps, args.batch, args.system, args.checkpoint)
    if args.command == "explore":
        return pipeline.run_explore(cfg, args.chains, args.steps, args.system, args.checkpoint)
    if args.command == "eval-conditional":
        return pipeline.eval_conditional(cfg, args.samples, args.system, args.checkpoint,
                                         self_check=args.self_check)
    raise ValueError(f"unknown command {args.command}")


def main(argv=None) -> int:
    from .config import ConfigError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    _set_threads(args.threads)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        result = run(args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        kind = "usage" if isinstance(exc, (ConfigError, FileNotFoundError)) else "error"
        print(f"warpmc: {exc}", file=sys.stderr)
        return EXIT_USAGE if kind == "usage" else EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001
        print(f"warpmc: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if args.command == "train" and args.dry_run:
        print(f"parameters: {result['parameters']}")
    print(json.dumps(result, indent=2, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
