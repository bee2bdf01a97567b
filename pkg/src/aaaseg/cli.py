"""Command-line entry point: ``python -m aaaseg <verb> --config run.json``.

Exit codes: 0 success, 2 configuration error, 3 missing prerequisite stage,
4 failed check.
"""
import argparse
import logging
import sys
from pathlib import Path

from . import gradcheck, pipeline
from .errors import ConfigError, FormatError, PipelineError, ValidationError

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_CHECK = 0, 2, 3, 4

STAGES = {
    "phantom": pipeline.cmd_phantom,
    "resample": pipeline.cmd_resample,
    "augment": pipeline.cmd_augment,
    "train": pipeline.cmd_train,
    "predict": pipeline.cmd_predict,
    "postprocess": pipeline.cmd_postprocess,
    "reconstruct": pipeline.cmd_reconstruct,
    "evaluate": pipeline.cmd_evaluate,
    "crossval": pipeline.cmd_crossval,
}


def build_parser():
    ap = argparse.ArgumentParser(prog="aaaseg", description=__doc__.splitlines()[0])
    ap.add_argument("verb", choices=sorted(STAGES) + ["gradcheck"])
    ap.add_argument("--config", type=Path, help="run configuration (JSON)")
    ap.add_argument("--seed", type=int, help="override the master seed")
    ap.add_argument("--out", type=Path, help="output directory (default: <config dir>/out)")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.verb == "gradcheck":
        results = gradcheck.run_all(seed=args.seed or 0)
        for r in results:
            print(r.line())
        return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK
    if args.config is None:
        print("error: --config is required", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = pipeline.RunConfig.load(args.config, seed=args.seed)
        out = args.out or args.config.parent / "out"
        result = STAGES[args.verb](cfg, pipeline.Workspace(out))
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ConfigError, ValidationError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.verb == "crossval":
        print(pipeline.format_table(result["rows"]), end="")
    elif args.verb == "evaluate":
        d = result["dsc"]
        print(f"DSC {d['mean']:.3f} +- {d['std']:.3f}")
    return EXIT_OK
