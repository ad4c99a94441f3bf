"""Command-line entry point: ``uqshift {run,split,shift,synth}``."""
import argparse
import logging
import os
import sys

from .dataio import DEFAULT_FP_LEN, AssaySpec, TemporalSplit, parse_dataset, write_dataset
from .errors import ConfigError, UqShiftError
from .harness import ExperimentConfig, emit_report, run_experiment, tomllib
from .shift import shift_report
from .synth import SynthParams, synth_generate

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL, EXIT_IO = 0, 1, 2, 3


def _read_toml(path):
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def load_spec(path):
    """Assay spec from a TOML file, either top-level keys or an ``[assay]`` table."""
    doc = _read_toml(path)
    block = doc.get("assay", doc)
    try:
        return AssaySpec.from_mapping(block)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def cmd_run(args):
    config = ExperimentConfig.from_toml(args.config)
    changes = {}
    if args.out is not None:
        changes["output_dir"] = args.out
    if args.seed is not None:
        changes["master_seed"] = args.seed
    if args.strict:
        changes["strict"] = True
    if changes:
        config = config.replace(**changes)
    report = run_experiment(config, jobs=args.jobs)
    for path in emit_report(report, config.output_dir):
        print(path)
    if report.failures:
        print(f"{len(report.failures)} cell failure(s); see failures.csv", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_split(args):
    spec = load_spec(args.spec)
    data = parse_dataset(args.data, spec, fp_len=args.fp_len, strict=args.strict)
    split = TemporalSplit.build(data, 1)
    print("fold,n,first_date,last_date")
    for k, idx in enumerate(split.folds, start=1):
        dates = data.dates[idx]
        print(f"{k},{len(idx)},{dates.min()},{dates.max()}")
    for s in (1, 2, 3):
        print(f"# setting {s}: train folds 1-{s}, calibration fold {s + 1}, test fold {s + 2}")
    return EXIT_OK


def cmd_shift(args):
    spec = load_spec(args.spec) if args.spec else AssaySpec("assay")
    train = parse_dataset(args.train, spec, fp_len=args.fp_len, strict=args.strict)
    test = parse_dataset(args.test, spec, fp_len=args.fp_len, strict=args.strict)
    rep = shift_report(train, test)
    print(f"n_train      {rep.n_train}")
    print(f"n_test       {rep.n_test}")
    print(f"label_shift  {rep.label_shift!r}")
    print(f"mmd_sq       {rep.mmd_sq!r}")
    print(f"mmd_norm     {rep.mmd_norm!r}")
    return EXIT_OK


def cmd_synth(args):
    doc = _read_toml(args.params)
    doc = doc.get("synth", doc)
    try:
        params = SynthParams.from_mapping(doc)
        params.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{args.params}: {exc}") from exc
    data = synth_generate(params, args.seed)
    write_dataset(args.out, data, fp_format=args.fp_format)
    print(f"wrote {len(data)} records to {args.out}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="uqshift", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment grid and write reports")
    p.add_argument("--config", required=True, help="experiment TOML file")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes (results do not depend on it)")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--strict", action="store_true", help="abort on the first malformed data row")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("split", help="print chronological fold boundaries")
    p.add_argument("--data", required=True)
    p.add_argument("--spec", required=True, help="assay spec TOML")
    p.add_argument("--fp-len", type=int, default=DEFAULT_FP_LEN)
    p.add_argument("--strict", action="store_true")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("shift", help="label shift and MMD between two datasets")
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--spec", help="assay spec TOML (default: identity, threshold 6, above)")
    p.add_argument("--fp-len", type=int, default=DEFAULT_FP_LEN)
    p.add_argument("--strict", action="store_true")
    p.set_defaults(func=cmd_shift)

    p = sub.add_parser("synth", help="generate a synthetic drifting assay")
    p.add_argument("--params", required=True, help="synth parameter TOML")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fp-format", choices=("hex", "bits"), default="hex")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except UqShiftError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
