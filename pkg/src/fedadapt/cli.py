"""Command line entry point: ``fedadapt {run,sweep,compare,invert,generate-data}``.

Exit codes: 0 success, 1 invalid configuration or input, 2 a pipeline stage
failed (partial artifacts are kept and the manifest names the stage).
"""

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import data, harness, nn, synthetic
from .config import load_config
from .errors import ComparisonError, ConfigurationError, DataError, StageError

EXIT_OK, EXIT_INVALID, EXIT_STAGE = 0, 1, 2


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def build_parser():
    parser = argparse.ArgumentParser(prog="fedadapt", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("config", help="experiment TOML file")
            p.add_argument("--seed", type=int, default=None, help="override the top-level seed")
            p.add_argument("--threads", type=int, default=1, help="worker threads for client training")
        p.add_argument("--out", default=None, help="artifact directory")

    p = sub.add_parser("run", help="full pipeline plus baselines")
    common(p)
    p.add_argument("--no-figures", action="store_true", help="skip PNG figures")

    p = sub.add_parser("sweep", help="anchor distances over ReLU indices and q values")
    common(p)
    p.add_argument("--relu", type=_int_list, default=None, help="ReLU indices, e.g. 1,2,3")
    p.add_argument("--q", type=_int_list, default=None, help="channel counts, e.g. 10,30")
    p.add_argument("--checkpoint", default=None, help="reuse a federated model instead of training")

    p = sub.add_parser("invert", help="inversion attacks on feature maps and sparsity properties")
    common(p)
    p.add_argument("--checkpoint", default=None, help="reuse a federated model instead of training")

    p = sub.add_parser("compare", help="comparison table from a run directory")
    p.add_argument("artifact_dir")

    p = sub.add_parser("generate-data", help="write the synthetic digit set as IDX files")
    p.add_argument("--samples-per-class", type=int, default=600)
    p.add_argument("--size", type=int, default=12)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="data")
    return parser


def _federated(args):
    if getattr(args, "checkpoint", None):
        return nn.load_model(args.checkpoint), []
    return None


def _out(args, default):
    return Path(args.out or default)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return _dispatch(args)
    except (ConfigurationError, DataError, ComparisonError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE


def _dispatch(args):
    if args.command == "generate-data":
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        images, labels = synthetic.make_glyphs(args.samples_per_class, args.size, seed=args.seed)
        data.write_idx(out / "glyphs-images.idx", images)
        data.write_idx(out / "glyphs-labels.idx", labels)
        print(f"wrote {len(labels)} samples to {out}")
        return EXIT_OK

    if args.command == "compare":
        summary = harness.compare_methods(args.artifact_dir)
        print(json.dumps(summary["mean_accuracy"], sort_keys=True))
        if summary["absent"]:
            print(f"absent methods: {', '.join(summary['absent'])}")
        return EXIT_OK

    config = load_config(args.config, seed=args.seed)
    out = _out(args, Path("runs") / f"{Path(args.config).stem}-{config.config_hash}")

    if args.command == "run":
        if args.no_figures:
            config = dataclasses.replace(config, figures=False)
        result = harness.run_experiment(config, out, threads=args.threads)
        if result.status:
            print(f"error: stage '{result.failed_stage}' failed: {result.error}", file=sys.stderr)
            print(f"partial artifacts in {out}", file=sys.stderr)
            return EXIT_STAGE
        for method, acc in result.accuracy.items():
            print(f"{method:>10}  mean accuracy {100 * sum(acc.values()) / len(acc):6.2f}%")
        print(f"groups: {result.assignment.partition()}")
        print(f"artifacts in {out}")
        return EXIT_OK

    if args.command == "sweep":
        relus = args.relu or list(config.sweep.relu_indices)
        qs = args.q or list(config.sweep.q_values)
        result = harness.sweep_extraction(config, relus, qs, out, threads=args.threads, federated=_federated(args))
        for (relu, q), ratio in sorted(result.summary.items()):
            print(f"relu {relu}  q {q:>3}  separation ratio {ratio:.3f}")
        for relu, q, msg in result.warnings:
            print(f"warning: relu {relu} q {q}: {msg}", file=sys.stderr)
        print(f"artifacts in {out}")
        return EXIT_OK

    if args.command == "invert":
        reports = harness.invert_experiment(config, out, threads=args.threads, federated=_federated(args))
        for row in harness.summarize_inversion(reports):
            print(f"relu {row['relu_index']}  {row['kind']:>5}  mse {row['mean_mse']:.4f}  ssim {row['mean_ssim']:.3f}")
        print(f"artifacts in {out}")
        return EXIT_OK
    raise AssertionError(args.command)


if __name__ == "__main__":
    sys.exit(main())
