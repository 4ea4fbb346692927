"""Command-line front end.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric or
convergence error. ``ARCCAP_LOG`` sets the log level (error, warn, info,
debug).
"""

import argparse
from dataclasses import dataclass, field, fields
import json
import logging
import os
import sys

from .arcgame import ArcConfig
from .decode import DecodeConfig
from .errors import ArcCapError, ValidationError

log = logging.getLogger("arccap")

COMMANDS = ("ingest", "train-captioner", "train-arc", "decode", "eval", "selfcheck")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


@dataclass
class RunConfig:
    annotations: str = None
    regions: str = None
    split: str = None
    out: str = "work"
    predictions: str = None
    beam: int = 2
    lam: float = 0.3
    epsilon: float = 1e-6
    seed: int = 0
    threads: int = field(default_factory=lambda: os.cpu_count() or 1)
    min_count: int = 5
    ratios: tuple = (0.8, 0.1, 0.1)
    steps: int = 500
    lr: float = 0.05
    batch_size: int = 16
    model: dict = field(default_factory=dict)
    epochs: int = 50
    eta: float = 0.1
    tol: float = 1e-6
    max_iter: int = 200

    def validate(self):
        if self.beam < 1:
            raise UsageError("--beam must be >= 1")
        if self.tol <= 0 or self.epsilon <= 0:
            raise UsageError("tolerances must be positive")
        if self.lam < 0:
            raise UsageError("--lambda must be >= 0")
        if self.threads < 1:
            raise UsageError("--threads must be >= 1")

    def arc(self):
        return ArcConfig(self.epochs, self.eta, self.tol, self.max_iter, self.threads)

    def decode(self):
        return DecodeConfig(beam_size=self.beam, fusion_lambda=self.lam, fusion_epsilon=self.epsilon)


# config-file keys that differ from the attribute names
_ALIASES = {"lambda": "lam"}


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc.msg})") from None
    known = {f.name for f in fields(RunConfig)}
    out = {}
    for key, value in doc.items():
        name = _ALIASES.get(key, key.replace("-", "_"))
        if name not in known:
            raise UsageError(f"unknown config key '{key}' in {path}")
        out[name] = tuple(value) if name == "ratios" else value
    return out


def build_parser():
    parser = _Parser(prog="arccap", description="Structured-prediction image captioning toolkit.")
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run configuration; flags override it")
    common.add_argument("--out", help="work directory (default: work)")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="worker cap (default: available cores)")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    p = sub.add_parser("ingest", parents=[common], help="load annotations and regions, split, build vocab")
    p.add_argument("--annotations")
    p.add_argument("--regions")
    p.add_argument("--split", help="split file (explicit lists or Karpathy dataset_coco.json)")
    p.add_argument("--min-count", type=int, dest="min_count")

    p = sub.add_parser("train-captioner", parents=[common], help="train the convolutional captioner")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int, dest="batch_size")

    p = sub.add_parser("train-arc", parents=[common], help="learn ARC potentials on the region graphs")
    p.add_argument("--epochs", type=int)
    p.add_argument("--eta", type=float)
    p.add_argument("--tol", type=float)
    p.add_argument("--max-iter", type=int, dest="max_iter")

    p = sub.add_parser("decode", parents=[common], help="beam-search captions for the test split")
    p.add_argument("--beam", type=int)
    p.add_argument("--lambda", type=float, dest="lam")
    p.add_argument("--epsilon", type=float)

    p = sub.add_parser("eval", parents=[common], help="score predictions (B1..B4, R, C)")
    p.add_argument("--beam", type=int)
    p.add_argument("--predictions", help="score this predictions file instead of the work directory")
    p.add_argument("--annotations")

    sub.add_parser("selfcheck", parents=[common], help="run the built-in oracle suites")
    return parser


def resolve_config(args):
    values = {}
    if getattr(args, "config", None):
        if not os.path.exists(args.config):
            raise ValidationError(f"config file {args.config} does not exist")
        values.update(load_config(args.config))
    for name, value in vars(args).items():
        if name not in ("command", "config") and value is not None:
            values[name] = value
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


def _require_inputs(*paths):
    for p in paths:
        if p is not None and not os.path.exists(p):
            raise ValidationError(f"input path {p} does not exist")


def run(argv=None, stdout=None):
    """Execute one command; returns the process exit code."""
    from . import pipeline

    stdout = stdout or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().strip())
        cfg = resolve_config(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:
        # --help
        return 0 if exc.code in (0, None) else 1
    except ArcCapError as exc:
        print(f"arccap: {exc}", file=sys.stderr)
        return exc.exit_code

    try:
        if args.command == "ingest":
            if not (cfg.annotations and cfg.regions):
                print("arccap ingest: --annotations and --regions are required", file=sys.stderr)
                return 1
            _require_inputs(cfg.annotations, cfg.regions, cfg.split)
            parts, vocab = pipeline.ingest(cfg.annotations, cfg.regions, cfg.out, cfg.split,
                                           cfg.min_count, cfg.seed, cfg.ratios)
            train, val, test = parts.sizes()
            print(f"images train={train} val={val} test={test} vocab={len(vocab)}", file=stdout)
        elif args.command == "train-captioner":
            train = pipeline.TrainConfig(cfg.steps, cfg.lr, cfg.batch_size)
            _, initial, final = pipeline.train_captioner(cfg.out, cfg.model, train, cfg.seed)
            print(f"token cross-entropy {initial:.4f} -> {final:.4f}", file=stdout)
        elif args.command == "train-arc":
            weights = pipeline.train_arc(cfg.out, cfg.arc())
            gaps = weights.gap_history
            if gaps:
                print(f"feature-matching gap {gaps[0]:.4f} -> {gaps[-1]:.4f}", file=stdout)
        elif args.command == "decode":
            paths = pipeline.decode(cfg.out, cfg.decode(), cfg.arc())
            for path in paths.values():
                print(path, file=stdout)
        elif args.command == "eval":
            if cfg.predictions:
                if not cfg.annotations:
                    print("arccap eval: --predictions needs --annotations", file=sys.stderr)
                    return 1
                _require_inputs(cfg.predictions, cfg.annotations)
                reports, table = pipeline.evaluate_files(cfg.predictions, cfg.annotations,
                                                         args.out)
            else:
                reports, table = pipeline.evaluate_work(cfg.out, cfg.beam)
            doc = {name: rep.to_dict() for name, rep in reports.items()}
            print(json.dumps(doc if len(doc) > 1 else next(iter(doc.values())), indent=2), file=stdout)
            print(table, file=stdout)
        elif args.command == "selfcheck":
            from .selfcheck import run_all
            ok = run_all(stdout)
            return 0 if ok else 3
    except ArcCapError as exc:
        print(f"arccap {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"arccap {args.command}: {exc}", file=sys.stderr)
        return 2
    return 0


def configure_logging():
    level = os.environ.get("ARCCAP_LOG", "warn").lower()
    levels = {"error": logging.ERROR, "warn": logging.WARNING, "warning": logging.WARNING,
              "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main():
    configure_logging()
    sys.exit(run())


if __name__ == "__main__":
    main()
