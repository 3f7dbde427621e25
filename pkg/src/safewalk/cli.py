"""Command-line entry point for the walking-safety pipeline."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys

from .pipeline import Pipeline, PipelineConfig, PipelineError

log = logging.getLogger("safewalk")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="safewalk",
        description="Fit, certify, and simulate the guaranteed-safe "
                    "walking controller.")
    parser.add_argument("--config", help="pipeline config file (JSON)")
    parser.add_argument("--seed", type=int, help="override the pipeline seed")
    parser.add_argument("--out-dir", help="override the artifact directory")
    parser.add_argument("--log-level", default="info",
                        choices=["debug", "info", "warning", "error"])
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("fit", help="fit and validate the polynomial bundle")
    sub.add_parser("synthesize",
                   help="run the alternation and write the certificate")
    p = sub.add_parser("verify", help="re-verify a persisted certificate")
    p.add_argument("--samples", type=int, default=100000)

    p = sub.add_parser("simulate", help="run a tracking experiment")
    p.add_argument("--mode", choices=["naive", "safe"], required=True)
    p.add_argument("--reference", default="constant:0.0",
                   help="constant:<alpha>, ramp:<alpha>:<rise_time>, "
                        "or a reference file")
    p.add_argument("--theta-dot0", type=float,
                   help="initial phase rate (on-manifold start); "
                        "defaults to the nominal stride start")
    p.add_argument("--strides", type=int)
    p.add_argument("--out", help="trace output path")

    p = sub.add_parser("export-slice",
                       help="export the barrier slice on the phase plane")
    p.add_argument("--alpha", type=float, default=0.0)
    p.add_argument("--alpha-dot", type=float, default=0.0)
    p.add_argument("--resolution", type=int, default=101)
    p.add_argument("--out")

    p = sub.add_parser("serve", help="run the live steering session service")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    return parser


def load_config(args) -> PipelineConfig:
    config = (PipelineConfig.load(args.config) if args.config
              else PipelineConfig())
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out_dir is not None:
        overrides["out_dir"] = args.out_dir
    if getattr(args, "host", None):
        overrides["host"] = args.host
    if getattr(args, "port", None):
        overrides["port"] = args.port
    return dataclasses.replace(config, **overrides) if overrides else config


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(),
                        format="%(levelname)s %(message)s")
    config = load_config(args)
    pipe = Pipeline(config, log=log.info)
    try:
        if args.command == "fit":
            pipe.cmd_fit()
        elif args.command == "synthesize":
            pipe.cmd_synthesize()
        elif args.command == "verify":
            report = pipe.cmd_verify(n_random=args.samples)
            for name, entry in report["checks"].items():
                log.info("%s: %s", name,
                         "pass" if entry["passed"] else "FAIL")
            if not report["passed"]:
                log.error("verification FAILED; report at %s", report["path"])
                return 1
            log.info("verification passed; report at %s", report["path"])
        elif args.command == "simulate":
            trace = pipe.cmd_simulate(
                args.mode, args.reference, theta_dot0=args.theta_dot0,
                n_strides=args.strides, out_path=args.out)
            return 0 if trace.outcome == "completed" else 2
        elif args.command == "export-slice":
            pipe.cmd_export_slice(alpha=args.alpha, alpha_dot=args.alpha_dot,
                                  n=args.resolution, out_path=args.out)
        elif args.command == "serve":
            from .service import run_service
            run_service(config)
    except PipelineError as exc:
        log.error("%s", exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
