"""Command line exporter: dump a built-in demo model for the adabet toolkit.

Exit codes: 0 success, 1 usage, 2 bad data/plan, 3 unexpected failure.
Errors land on stderr as one JSON line; stdout carries the resolved
configuration followed by a summary of what was written.
"""

import argparse
import json
import sys

import torch

from .export import ExportError, ExportPlan, export
from .models import MODELS

from . import __version__


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser():
    p = _Parser(prog="adabet-export",
                description="Dump demo-model activations as NPY batches plus meta.json")
    p.add_argument("--version", action="version",
                   version="adabet-export %s" % __version__)
    p.add_argument("--model", required=True, choices=sorted(MODELS),
                   help="which built-in demo model to export")
    p.add_argument("--out", required=True, help="dump directory to create")
    p.add_argument("--batches", type=int, default=5)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--grads", action="store_true",
                   help="also write per-batch loss-gradient companions")
    p.add_argument("--seed", type=int, default=0,
                   help="seeds both the model weights and the input batches")
    p.add_argument("--group", action="append", default=None,
                   metavar="PATTERN=GROUP_ID",
                   help="override the model's grouping rules; repeatable")
    return p


def _parse_group_flags(values):
    if values is None:
        return None
    rules = []
    for value in values:
        pattern, sep, gid = value.partition("=")
        if not sep or not pattern or not gid:
            raise UsageError("--group needs PATTERN=GROUP_ID, got %r" % value)
        rules.append((pattern, gid))
    return tuple(rules)


def _demo_batches(input_shape, classes, batch_size, seed, with_labels):
    gen = torch.Generator().manual_seed(seed)
    while True:
        x = torch.randn((batch_size,) + tuple(input_shape), generator=gen)
        if with_labels:
            yield x, torch.randint(0, classes, (batch_size,), generator=gen)
        else:
            yield x


def run(argv):
    args = _build_parser().parse_args(argv)
    override = _parse_group_flags(args.group)
    print(json.dumps({k: v for k, v in sorted(vars(args).items())}))
    torch.manual_seed(args.seed)
    model, input_shape, classes, default_rules = MODELS[args.model]()
    plan = ExportPlan(
        model=model,
        batches=_demo_batches(input_shape, classes, args.batch_size,
                              args.seed, args.grads),
        n_batches=args.batches,
        batch_size=args.batch_size,
        dump_grads=args.grads,
        group_rules=default_rules if override is None else override,
    )
    out = export(plan, args.out)
    names = sorted(p.name for p in out.iterdir())
    summary = {
        "activation_files": sum(1 for n in names if n.endswith(".npy")
                                and not n.endswith(".grad.npy")),
        "gradient_files": sum(1 for n in names if n.endswith(".grad.npy")),
        "layers": len(json.loads((out / "meta.json").read_text())),
        "out": str(out),
    }
    print(json.dumps(summary, sort_keys=True))
    return 0


def _fail(kind, exc):
    message = " ".join(str(exc).split())
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)


def main(argv=None):
    try:
        return run(sys.argv[1:] if argv is None else argv)
    except UsageError as exc:
        _fail("usage", exc)
        return 1
    except ExportError as exc:
        _fail("data", exc)
        return 2
    except Exception as exc:  # anything else is a bug worth flagging loudly
        _fail("internal", exc)
        return 3


if __name__ == "__main__":
    sys.exit(main())
