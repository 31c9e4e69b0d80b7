"""Command line entry point: ``diffsid <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import trainer


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--variant", choices=trainer.VARIANTS)
    p.add_argument("--seed", type=int)
    p.add_argument("--lambda", dest="lam", type=float, help="SDUD offset")
    p.add_argument("--ratio-r", dest="ratio_r", type=float, help="FrqUD threshold ratio")
    p.add_argument("--beta", type=float, help="FrqUD frequency EMA weight")
    p.add_argument("--tau", type=float, help="Gumbel-Softmax temperature")
    p.add_argument("--beam-width", dest="beam_width", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="any other config key")
    p.add_argument("-v", "--verbose", action="store_true")


def _config(args) -> trainer.TrainConfig:
    extra = {}
    for item in args.set:
        if "=" not in item:
            raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        extra[key] = value
    overrides = trainer.parse_overrides(extra)
    for name in ("variant", "seed", "lam", "ratio_r", "beta", "tau", "beam_width", "epochs", "out"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    return trainer.load_config(args.config, **overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffsid", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="pretrain the residual-quantization tokenizer")
    _common(p)

    p = sub.add_parser("train", help="joint training of tokenizer and recommender")
    _common(p)

    p = sub.add_parser("eval", help="evaluate a trained checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("valid", "test"), default="test")
    p.add_argument("--k", default="5,10", help="comma-separated cutoffs")
    p.add_argument("--unconstrained", action="store_true", help="do not restrict decoding to known SIDs")

    p = sub.add_parser("matrix", help="run several variants and seeds, write comparison.csv")
    _common(p)
    p.add_argument("--variants", help="comma-separated variants")
    p.add_argument("--seeds", help="comma-separated seeds")

    p = sub.add_parser("demo-mismatch", help="two-stage vs joint optimum on the quadratic construction")
    p.add_argument("--M", type=float, default=1.0)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--steps", type=int, default=2000)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "demo-mismatch":
            if not args.M > 0:
                parser.error("--M must be positive")
            print(trainer.run_demo_mismatch(args.M, args.lr, args.steps))
            return 0
        if args.command == "matrix":
            if args.variants:
                args.set.append(f"variants={args.variants}")
            if args.seeds:
                args.set.append(f"seeds={args.seeds}")
        cfg = _config(args)
        if args.command == "pretrain":
            print(trainer.run_pretrain(cfg))
        elif args.command == "train":
            res = trainer.run_train(cfg)
            print(json.dumps({"checkpoint": str(res.best_checkpoint), "best_epoch": res.best_epoch, "test": res.test}))
        elif args.command == "eval":
            ks = tuple(int(k) for k in args.k.split(","))
            cfg_override = cfg if args.config else None
            out = trainer.run_eval(
                args.checkpoint, args.split, ks, args.beam_width, False if args.unconstrained else None, cfg_override
            )
            print(json.dumps(out))
        elif args.command == "matrix":
            print(trainer.run_matrix(cfg))
    except (OSError, ValueError, KeyError, trainer.DivergenceError) as exc:
        print(f"diffsid {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
