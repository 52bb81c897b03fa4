"""Command-line interface.

Subcommands: homology (persistence diagram of a point cloud), rank
(loop-count layer selection over an activation dump), fisher-rank (the
gradient-based baseline over the same dump plus gradient companions),
diagnose (PCA + DBSCAN cross-check), demo (pre-train, dump, rank,
selectively retrain on a synthetic task), and export-meta-template.

Every run prints its resolved configuration as one JSON line on stdout
before doing anything.  Artifacts are byte-identical across runs on
identical inputs.  Exit codes: 0 success, 1 usage error, 2 data error,
3 internal error; failures emit a single machine-parsable JSON line on
stderr.  The ADABET_THREADS environment variable caps per-layer
parallelism; results are always merged in ascending layer order.
"""

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .diagnostics import dbscan_count, pca_reduce, spearman
from .errors import AdabetError, DataError, InternalError, UsageError
from .fisher import FisherScore, fisher_delta
from .homology import rips_persistence
from .ingest import (
    DEFAULT_POOL_CAP,
    load_layer_batches,
    load_layer_pool,
    read_meta_file,
    read_npy,
    tensor_from_array,
    validate_dump_dir,
    write_npy,
)
from .jsonutil import dumps_canonical
from .selection import SelectionConfig, build_units, rank_and_select, score_layer
from .tinynet import (
    DenseNet,
    TrainConfig,
    forward_capture,
    make_synthetic,
    relabel,
    train,
    train_selective,
)

DEMO_DIMS = [2, 32, 32, 32, 32, 32, 2]
DEMO_PRETRAIN_EPOCHS = 20
DEMO_TAU = 0.4  # robust-loop cutoff; keeps the selection stable across pool sizes
DEMO_BATCHES = 5
DEMO_BATCH_SIZE = 8


class _Parser(argparse.ArgumentParser):
    """argparse reports usage problems via exit code 2; we want 1."""

    def error(self, message):
        raise UsageError(message)


def thread_cap():
    """Worker cap for per-layer fan-out, from ADABET_THREADS."""
    raw = os.environ.get("ADABET_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        value = int(raw)
    except ValueError:
        raise UsageError("ADABET_THREADS must be an integer, got %r" % raw)
    if value < 1:
        raise UsageError("ADABET_THREADS must be >= 1, got %d" % value)
    return value


def _map_layers(fn, items):
    """Apply fn over per-layer work items, capped by ADABET_THREADS.

    Items must already be in ascending layer order; ThreadPoolExecutor.map
    preserves it, so the merge is deterministic regardless of scheduling.
    """
    workers = min(thread_cap(), max(len(items), 1))
    if workers == 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _warn(messages):
    for message in messages:
        print("warning: %s" % message, file=sys.stderr)


def _write_artifact(path, text):
    Path(path).write_text(text)


def _print_config(command, options):
    resolved = {"command": command}
    resolved.update(options)
    print(dumps_canonical(resolved))


def _build_parser():
    parser = _Parser(prog="adabet", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version="adabet %s" % __version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("homology", help="persistence diagram of a point cloud")
    p.add_argument("--points", required=True, help="NPY file with an (N, D) cloud")
    p.add_argument("--max-dim", type=int, default=1, choices=(0, 1))
    p.add_argument("--threshold", type=float, default=None,
                   help="filtration cap; defaults to the enclosing radius")
    p.add_argument("--out", required=True)

    p = sub.add_parser("rank", help="loop-count layer selection over a dump directory")
    p.add_argument("--dumps", required=True)
    p.add_argument("--meta", default=None, help="defaults to <dumps>/meta.json")
    p.add_argument("--rho", type=float, default=0.1)
    p.add_argument("--pool", type=int, default=DEFAULT_POOL_CAP)
    p.add_argument("--tau", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", required=True)

    p = sub.add_parser("fisher-rank", help="gradient-based baseline selection")
    p.add_argument("--dumps", required=True)
    p.add_argument("--meta", default=None)
    p.add_argument("--rho", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", required=True)

    p = sub.add_parser("diagnose", help="PCA + DBSCAN structure report per layer")
    p.add_argument("--dumps", required=True)
    p.add_argument("--meta", default=None)
    p.add_argument("--pca", type=int, default=2)
    p.add_argument("--eps", type=float, default=None,
                   help="defaults to half the median pairwise distance per layer")
    p.add_argument("--min-pts", type=int, default=4)
    p.add_argument("--pool", type=int, default=DEFAULT_POOL_CAP)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", required=True)

    p = sub.add_parser("demo", help="end-to-end selective retraining on a toy task")
    p.add_argument("--dataset", default="circles", choices=("blobs", "moons", "circles"))
    p.add_argument("--rho", type=float, default=0.1)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", required=True, help="training report (JSON lines)")
    p.add_argument("--workdir", default=None,
                   help="where dumps and the manifest land; defaults next to --out")

    p = sub.add_parser("export-meta-template",
                       help="emit a meta.json skeleton to fill in by hand")
    p.add_argument("--layers", type=int, required=True)
    p.add_argument("--out", required=True)
    return parser


def _load_metas(args):
    meta_path = args.meta
    if meta_path is None:
        return read_meta_file(args.dumps)
    path = Path(meta_path)
    if not path.is_file():
        raise DataError("meta file %s does not exist" % meta_path)
    from .ingest import load_layer_meta

    return load_layer_meta(path.read_text())


def _units_or_die(metas):
    units = build_units(metas)
    if not units:
        raise DataError("meta.json lists no trainable layers")
    return units


def cmd_homology(args):
    path = Path(args.points)
    if not path.is_file():
        raise DataError("points file %s does not exist" % args.points)
    tensor = read_npy(path.read_bytes())
    if len(tensor.shape) != 2:
        raise DataError("points file must hold a 2-D array, got shape %r" % (tensor.shape,))
    cloud = tensor.data.astype(np.float64).reshape(tensor.shape)
    from .homology import pairwise_distances

    diagram = rips_persistence(pairwise_distances(cloud), max_dim=args.max_dim,
                               threshold_cap=args.threshold)
    _write_artifact(args.out, diagram.to_json() + "\n")
    return 0


def cmd_rank(args):
    metas = _load_metas(args)
    _warn(validate_dump_dir(args.dumps, metas))
    units = _units_or_die(metas)
    config = SelectionConfig(rho=args.rho, pool_cap=args.pool, tau=args.tau,
                             seed=args.seed)
    by_index = {m.index: m for m in metas}

    def score(unit):
        meta = by_index[unit.scored_index]
        pool = load_layer_pool(args.dumps, meta, pool_cap=config.pool_cap,
                               seed=config.seed)
        return score_layer(pool, meta, config)

    scores = _map_layers(score, units)
    manifest = rank_and_select(scores, config, units=units)
    _write_artifact(args.out, manifest.to_json() + "\n")
    return 0


def cmd_fisher_rank(args):
    metas = _load_metas(args)
    _warn(validate_dump_dir(args.dumps, metas))
    units = _units_or_die(metas)
    config = SelectionConfig(rho=args.rho, seed=args.seed)
    by_index = {m.index: m for m in metas}

    def score(unit):
        meta = by_index[unit.scored_index]
        acts, grads = load_layer_batches(args.dumps, meta, with_grads=True)
        delta = fisher_delta(acts, grads)
        params = sum(by_index[i].param_count for i in unit.members)
        return FisherScore.from_delta(meta.index, delta, params,
                                      group_id=unit.group_id)

    scores = _map_layers(score, units)
    manifest = rank_and_select(scores, config, units=units, scorer="fisher")
    _write_artifact(args.out, manifest.to_json() + "\n")
    return 0


def cmd_diagnose(args):
    metas = _load_metas(args)
    _warn(validate_dump_dir(args.dumps, metas))
    units = _units_or_die(metas)
    config = SelectionConfig(pool_cap=args.pool, seed=args.seed)
    by_index = {m.index: m for m in metas}
    if args.pca < 1:
        raise UsageError("--pca must be >= 1")

    def diagnose(unit):
        meta = by_index[unit.scored_index]
        pool = load_layer_pool(args.dumps, meta, pool_cap=config.pool_cap,
                               seed=config.seed)
        target_d = min(args.pca, pool.matrix.shape[1])
        reduced = pca_reduce(pool, target_d)
        report = dbscan_count(reduced, eps=args.eps, min_pts=args.min_pts)
        raw_b1 = score_layer(pool, meta, config).raw_b1
        return report, raw_b1

    results = _map_layers(diagnose, units)
    reports = [r for r, _ in results]
    b1s = [b for _, b in results]
    clusters = [r.n_clusters for r in reports]
    agreement = spearman(clusters, b1s) if len(reports) >= 2 else 0.0
    payload = {
        "reports": [r.to_row() for r in reports],
        "spearman_clusters_vs_loops": float(agreement),
    }
    _write_artifact(args.out, dumps_canonical(payload) + "\n")
    return 0


def _demo_meta_rows(net):
    rows = []
    widths = net.dims[1:]
    for k, layer in enumerate(net.layers):
        rows.append({
            "index": k,
            "name": "dense%d" % k,
            "trainable": True,
            "param_count": int(layer.param_count),
            "act_elems_per_sample": int(widths[k]),
            "group_id": None,
        })
    return rows


def _demo_write_dumps(net, x, workdir):
    """Forward the first pooled batches through the net and dump them."""
    dump_dir = Path(workdir)
    dump_dir.mkdir(parents=True, exist_ok=True)
    (dump_dir / "meta.json").write_text(dumps_canonical(_demo_meta_rows(net)) + "\n")
    for b in range(DEMO_BATCHES):
        batch = x[b * DEMO_BATCH_SIZE:(b + 1) * DEMO_BATCH_SIZE]
        if batch.shape[0] < DEMO_BATCH_SIZE:
            raise DataError("demo needs at least %d training rows"
                            % (DEMO_BATCHES * DEMO_BATCH_SIZE))
        _, acts = forward_capture(net, batch)
        for k, act in enumerate(acts):
            path = dump_dir / ("layer%04d_batch%04d.npy" % (k, b))
            path.write_bytes(write_npy(tensor_from_array(act)))
    return dump_dir


def run_demo(dataset, rho, epochs, seed, out, workdir=None):
    """Pre-train on blobs, rank layers on the shifted task, retrain the
    selected ones, and write the per-epoch report."""
    out = Path(out)
    if workdir is None:
        workdir = out.parent / (out.stem + "_work")
    source = make_synthetic("blobs", 400, 0.3, seed)
    target = relabel(make_synthetic(dataset, 400, 0.05, seed + 1))
    net = DenseNet.build(DEMO_DIMS, seed=seed)
    train(net, source, TrainConfig(lr0=1e-2, epochs=DEMO_PRETRAIN_EPOCHS, seed=seed))

    dump_dir = _demo_write_dumps(net, target.x_train, workdir)
    metas = read_meta_file(dump_dir)
    units = _units_or_die(metas)
    config = SelectionConfig(rho=rho, tau=DEMO_TAU)
    by_index = {m.index: m for m in metas}
    scores = _map_layers(
        lambda u: score_layer(
            load_layer_pool(dump_dir, by_index[u.scored_index],
                            pool_cap=config.pool_cap, seed=config.seed),
            by_index[u.scored_index], config),
        units,
    )
    manifest = rank_and_select(scores, config, units=units)
    (dump_dir / "manifest.json").write_text(manifest.to_json() + "\n")

    report = train_selective(net, target, manifest, TrainConfig(epochs=epochs, seed=seed))
    _write_artifact(out, report.to_jsonl() if report.epochs else "")
    if report.epochs:
        last = report.epochs[-1]
        total_wall = sum(e.wall_clock for e in report.epochs)
        print("demo: selected=%s final_test_acc=%.4f wall=%.2fs"
              % (list(manifest.selected), last.test_acc, total_wall), file=sys.stderr)
    return 0


def cmd_export_meta_template(args):
    if args.layers < 1:
        raise UsageError("--layers must be >= 1")
    rows = [
        {
            "index": k,
            "name": "layer%d" % k,
            "trainable": True,
            "param_count": 0,
            "act_elems_per_sample": 1,
            "group_id": None,
        }
        for k in range(args.layers)
    ]
    _write_artifact(args.out, dumps_canonical(rows) + "\n")
    return 0


def run(argv):
    args = _build_parser().parse_args(argv)
    options = {k: v for k, v in sorted(vars(args).items()) if k != "command"}
    _print_config(args.command, options)
    if args.command == "homology":
        return cmd_homology(args)
    if args.command == "rank":
        return cmd_rank(args)
    if args.command == "fisher-rank":
        return cmd_fisher_rank(args)
    if args.command == "diagnose":
        return cmd_diagnose(args)
    if args.command == "demo":
        return run_demo(args.dataset, args.rho, args.epochs, args.seed, args.out,
                        args.workdir)
    if args.command == "export-meta-template":
        return cmd_export_meta_template(args)
    raise InternalError("unhandled command %r" % args.command)  # pragma: no cover


def _fail(kind, exc):
    message = " ".join(str(exc).split())
    print(dumps_canonical({"error": kind, "message": message}), file=sys.stderr)


def main(argv=None):
    try:
        return run(sys.argv[1:] if argv is None else argv)
    except UsageError as exc:
        _fail("usage", exc)
        return 1
    except DataError as exc:
        _fail("data", exc)
        return 2
    except AdabetError as exc:
        _fail("internal", exc)
        return 3
    except Exception as exc:  # noqa: BLE001 - anything unexpected is a bug
        _fail("internal", exc)
        return 3


if __name__ == "__main__":
    sys.exit(main())
