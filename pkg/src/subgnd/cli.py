"""Command-line front end: ``subgnd <command> [--config FILE] [--set key=value ...]``.

Exit status is 0 on success, 2 for configuration errors and 1 for runtime
failures; failures print a single ``error:`` line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import ConfigError, load_config, write_manifest
from .graph import DataFormatError, graph_stats, ingest_graph, make_split, synth_graph, write_graph
from .model import base_forward, forward, init_params, load_checkpoint, save_checkpoint
from .sampler import node_rng, sample_dataset, sample_subgraph, size_histogram, write_corpus
from .trainer import (
    DivergenceError,
    PairSet,
    evaluate,
    fit,
    random_search,
    run_experiment,
)

logger = logging.getLogger("subgnd")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _load_graph(cfg, require_files=False):
    d = cfg.data
    if d.edges is None:
        if require_files:
            raise ConfigError("data.edges, data.features and data.labels are required")
        return synth_graph(cfg.synth)
    return ingest_graph(d.edges, d.features, d.labels, num_classes=d.num_classes)


def _split(cfg, graph):
    return make_split(graph.num_nodes, cfg.data.split, cfg.data.split_seed)


def _out_dir(cfg):
    path = Path(cfg.output.dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _fmt(x):
    return f"{x:.4f}" if np.isfinite(x) else "nan"


def _alpha_text(alpha):
    return "none" if alpha is None else " ".join(f"{a:.4f}" for a in alpha)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_ingest(cfg, args):
    graph = _load_graph(cfg, require_files=True)
    for key, value in graph_stats(graph).items():
        print(f"{key}: {value}")
    write_manifest(cfg, _out_dir(cfg), ["command ingest"])


def cmd_synth(cfg, args):
    graph = synth_graph(cfg.synth)
    out = _out_dir(cfg)
    paths = write_graph(graph, out)
    write_manifest(cfg, out, ["command synth"])
    print(f"wrote {graph.num_nodes} nodes, {graph.num_edges} edges ({cfg.synth.kind}) to {out}")
    for p in paths:
        print(f"  {p}")


def cmd_sample(cfg, args):
    graph = _load_graph(cfg)
    corpus = sample_dataset(graph, cfg.walk, workers=args.workers)
    out = _out_dir(cfg)
    write_corpus(corpus, out / "corpus.txt")
    hist = size_histogram(corpus)
    with open(out / "size_histogram.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["size", "count"])
        writer.writerows(sorted(hist.items()))
    write_manifest(cfg, out, ["command sample"])
    print(f"sampled {sum(hist.values())} subgraphs around {len(corpus)} nodes -> {out / 'corpus.txt'}")
    for size, count in sorted(hist.items()):
        print(f"  size {size}: {count}")


def _model_config(cfg, graph):
    return cfg.model.build(graph.feature_dim, graph.num_classes)


def cmd_train(cfg, args):
    graph = _load_graph(cfg)
    split = _split(cfg, graph)
    out = _out_dir(cfg)
    mc = _model_config(cfg, graph)
    result = fit(graph, split, cfg.walk, mc, cfg.train, workers=args.workers,
                 metrics_path=out / "metrics.csv")
    save_checkpoint(out / "model.ckpt", result.params, mc)
    write_manifest(cfg, out, ["command train"])
    print(f"variant {mc.variant}: epochs {result.epochs_run} (best {result.best_epoch})")
    print(f"train_acc {_fmt(result.train_acc)} val_acc {_fmt(result.val_acc)} test_acc {_fmt(result.test_acc)}")
    print(f"alpha {_alpha_text(result.alpha)}")


def cmd_experiment(cfg, args):
    graph = _load_graph(cfg)
    split = _split(cfg, graph)
    out = _out_dir(cfg)
    res = run_experiment(graph, split, cfg.walk, _model_config(cfg, graph), cfg.train, workers=args.workers)
    with open(out / "runs.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["run", "walk_seed", "train_seed", "best_epoch", "val_acc", "test_acc"])
        for i, f in enumerate(res.fits):
            writer.writerow([i, cfg.walk.seed + i, cfg.train.seed + i, f.best_epoch, repr(f.val_acc),
                             repr(f.test_acc)])
    write_manifest(cfg, out, ["command experiment"])
    print(f"test_acc {res.mean:.4f} +/- {res.std:.4f} over {len(res.values)} runs")


def cmd_eval(cfg, args):
    ckpt = Path(args.checkpoint) if args.checkpoint else Path(cfg.output.dir) / "model.ckpt"
    params, mc = load_checkpoint(ckpt)
    graph = _load_graph(cfg)
    if graph.feature_dim != mc.input_dim:
        raise ConfigError(f"checkpoint expects {mc.input_dim} features, data has {graph.feature_dim}")
    split = _split(cfg, graph)
    corpus = sample_dataset(graph, cfg.walk, workers=args.workers)
    for name, idx in (("train", split.train_idx), ("val", split.val_idx), ("test", split.test_idx)):
        if len(idx):
            print(f"{name}_acc {evaluate(params, mc, PairSet.from_corpus(corpus, graph.labels, idx)):.4f}")
    write_manifest(cfg, _out_dir(cfg), ["command eval", f"checkpoint {ckpt}"])


def cmd_search(cfg, args):
    graph = _load_graph(cfg)
    split = _split(cfg, graph)
    out = _out_dir(cfg)
    tc = cfg.train if not cfg.search.max_epochs else replace(cfg.train, max_epochs=cfg.search.max_epochs)
    res = random_search(graph, split, cfg.search, cfg.search.seed, cfg.walk, _model_config(cfg, graph), tc,
                        workers=args.workers, log_path=out / "trials.csv")
    write_manifest(cfg, out, ["command search"])
    failed = sum(t["status"] != "ok" for t in res.trials)
    print(f"{len(res.trials)} trials ({failed} failed); best trial {res.best['trial']}: "
          f"val_acc {_fmt(res.best['val_acc'])} test_acc {_fmt(res.best['test_acc'])}")
    keys = ("lr", "weight_decay", "dropout", "hidden_size", "num_layers", "eps", "rw_hops", "alter_pool")
    print("best " + " ".join(f"{k}={res.best[k]}" for k in keys))


def cmd_gradcheck(cfg, args):
    graph = _load_graph(cfg)
    mc = replace(_model_config(cfg, graph), dropout=0.0)
    walk = replace(cfg.walk, rw_hops=args.nodes, max_steps=None)
    rng = np.random.default_rng(args.seed)
    fn = forward if mc.variant == "subgnd" else base_forward
    worst = 0.0
    for i in range(args.instances):
        v = int(rng.integers(graph.num_nodes))
        sub = sample_subgraph(graph, v, walk, node_rng(args.seed, v, i))
        params = init_params(mc, seed=args.seed + i)
        if "scaling_logits" in params:
            params["scaling_logits"].data[:] = rng.normal(size=4)
        label = int(sub.label)
        err = ad.grad_check(lambda: ad.cross_entropy(fn(sub, params, mc), label), list(params),
                            num_coords=args.coords, seed=args.seed + i)
        print(f"instance {i}: node {v} ({sub.num_nodes} nodes) coords {ad.grad_check.last_checked} "
              f"max_rel_err {err:.3e}")
        worst = max(worst, err)
    write_manifest(cfg, _out_dir(cfg), ["command gradcheck"])
    status = "PASS" if worst < args.tolerance else "FAIL"
    print(f"{status} max relative error {worst:.3e} (tolerance {args.tolerance:g})")
    return 0 if worst < args.tolerance else 1


COMMANDS = {
    "ingest": (cmd_ingest, "validate dataset files and print graph statistics"),
    "synth": (cmd_synth, "write a synthetic dataset (edges.tsv, features.csv, labels.txt)"),
    "sample": (cmd_sample, "write the subgraph corpus and its size histogram"),
    "train": (cmd_train, "fit one model; write metrics.csv, model.ckpt and run.manifest"),
    "experiment": (cmd_experiment, "repeat training over train.num_runs seeds; report mean and std"),
    "eval": (cmd_eval, "evaluate a checkpoint on the train/val/test splits"),
    "search": (cmd_search, "random hyperparameter search; write trials.csv"),
    "gradcheck": (cmd_gradcheck, "finite-difference check of end-to-end gradients"),
}

# shortcut flags mapped onto config keys
SHORTCUTS = {
    "out": "output.dir",
    "kind": "synth.kind",
    "nodes_total": "synth.num_nodes",
    "pairs": "synth.num_pairs",
    "variant": "model.variant",
}


def build_parser():
    parser = argparse.ArgumentParser(prog="subgnd", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="settings file with 'section.key = value' lines")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override one setting (repeatable)")
        p.add_argument("--workers", type=int, default=1, help="worker processes (results do not depend on it)")
        p.add_argument("--out", help="output directory (output.dir)")
        p.add_argument("--data", help="directory holding edges.tsv, features.csv and labels.txt")
        p.add_argument("--variant", choices=("subgnd", "base"), help="model.variant")
        if name == "synth":
            p.add_argument("--kind", help="synth.kind")
            p.add_argument("--nodes", dest="nodes_total", type=int, help="synth.num_nodes")
            p.add_argument("--pairs", type=int, help="synth.num_pairs (conflict fixture)")
        if name == "eval":
            p.add_argument("--checkpoint", help="checkpoint path (default: <output.dir>/model.ckpt)")
        if name == "gradcheck":
            p.add_argument("--instances", type=int, default=5)
            p.add_argument("--coords", type=int, default=50)
            p.add_argument("--nodes", type=int, default=5, help="rw_hops for the checked subgraphs")
            p.add_argument("--seed", type=int, default=0)
            p.add_argument("--tolerance", type=float, default=1e-3)
    return parser


def _overrides(args):
    items = []
    if args.data:
        base = Path(args.data)
        items += [f"data.edges={base / 'edges.tsv'}", f"data.features={base / 'features.csv'}",
                  f"data.labels={base / 'labels.txt'}"]
    for attr, key in SHORTCUTS.items():
        value = getattr(args, attr, None)
        if value is not None:
            items.append(f"{key}={value}")
    return items + list(args.overrides)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = COMMANDS[args.command][0]
    try:
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        cfg = load_config(args.config, _overrides(args))
        code = handler(cfg, args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        where = f"{exc.filename}: " if exc.filename else ""
        print(f"error: {where}{exc.strerror or exc}", file=sys.stderr)
        return 1
    except (DataFormatError, DivergenceError, FloatingPointError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0 if code is None else code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
