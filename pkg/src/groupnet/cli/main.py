"""``groupnet`` command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 model-format
error, 5 numeric failure.
"""

from __future__ import annotations

import argparse
import sys

from ..errors import GroupNetError
from . import commands


def build_parser():
    p = argparse.ArgumentParser(prog="groupnet", description="Train, evaluate, benchmark and inspect structured binary networks.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train from a YAML config")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    t.add_argument("--init", help="checkpoint to initialise weights from")

    e = sub.add_parser("eval", help="score a model file on a test split")
    e.add_argument("--model", required=True)
    e.add_argument("--data", help="dataset directory (not needed for synthetic shapes)")

    b = sub.add_parser("bench", help="binary vs float convolution timing")
    for flag in ("cin", "cout", "kh", "kw", "hin", "win", "k"):
        b.add_argument(f"--{flag}", type=int, required=True)
    b.add_argument("--dilation", type=int, default=1)
    b.add_argument("--repeat", type=int, default=3)

    x = sub.add_parser("export", help="lower a checkpoint to a model file")
    x.add_argument("--in", dest="src", required=True)
    x.add_argument("--out", dest="dst", required=True)

    i = sub.add_parser("inspect", help="summarise a model file")
    i.add_argument("--model", required=True)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "train":
            commands.cmd_train(args.config, args.seed, args.override, init=args.init)
        elif args.command == "eval":
            commands.cmd_eval(args.model, args.data)
        elif args.command == "bench":
            for name in ("cin", "cout", "kh", "kw", "hin", "win", "k", "dilation", "repeat"):
                if getattr(args, name) < 1:
                    raise commands.ConfigError({f"--{name}": "must be >= 1"})
            commands.cmd_bench(args.cin, args.cout, args.kh, args.kw, args.hin, args.win, args.k, args.dilation, repeat=args.repeat)
        elif args.command == "export":
            commands.cmd_export(args.src, args.dst)
        else:
            commands.cmd_inspect(args.model)
    except GroupNetError as exc:
        print(f"groupnet {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
