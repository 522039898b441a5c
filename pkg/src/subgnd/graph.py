"""Global graph storage, file ingestion, splits and synthetic graph generators."""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

EDGE_FILE = "edges.tsv"
FEATURE_FILE = "features.csv"
LABEL_FILE = "labels.txt"

SYNTHETIC_KINDS = ("planted_partition", "heterophilic_bipartite", "conflict_fixture")


class DataFormatError(ValueError):
    """Raised when an input file does not follow the expected layout."""


def _build_csr(keys, values, num_nodes):
    # keys/values already sorted by (keys, values)
    counts = np.bincount(keys, minlength=num_nodes)
    offsets = np.zeros(num_nodes + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return offsets, values.astype(np.int64, copy=True)


@dataclass(frozen=True, eq=False)
class GraphStore:
    """Immutable directed graph with node features and integer labels.

    Edges are deduplicated and kept sorted by ``(src, dst)``. Both adjacency
    directions are materialised as CSR ``(offsets, targets)`` pairs.
    """

    num_nodes: int
    edges: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    out_csr: tuple = field(init=False, repr=False)
    in_csr: tuple = field(init=False, repr=False)

    def __post_init__(self):
        n = int(self.num_nodes)
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if features.ndim != 2 or features.shape[0] != n:
            raise ValueError(f"features must have {n} rows, got shape {features.shape}")
        if labels.shape != (n,):
            raise ValueError(f"labels must have length {n}, got {labels.shape}")
        if edges.size and (edges.min() < 0 or edges.max() >= n):
            raise ValueError("edge endpoint outside [0, num_nodes)")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if edges.size:
            edges = np.unique(edges, axis=0)
        for arr in (edges, features, labels):
            arr.setflags(write=False)
        object.__setattr__(self, "num_nodes", n)
        object.__setattr__(self, "num_classes", int(self.num_classes))
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

        out_offsets, out_targets = _build_csr(edges[:, 0], edges[:, 1], n)
        order = np.lexsort((edges[:, 0], edges[:, 1]))
        in_offsets, in_sources = _build_csr(edges[order, 1], edges[order, 0], n)
        for arr in (out_offsets, out_targets, in_offsets, in_sources):
            arr.setflags(write=False)
        object.__setattr__(self, "out_csr", (out_offsets, out_targets))
        object.__setattr__(self, "in_csr", (in_offsets, in_sources))

    @property
    def num_edges(self):
        return len(self.edges)

    @property
    def feature_dim(self):
        return self.features.shape[1]

    def out_neighbors(self, v):
        offsets, targets = self.out_csr
        return targets[offsets[v]:offsets[v + 1]]

    def in_neighbors(self, v):
        offsets, sources = self.in_csr
        return sources[offsets[v]:offsets[v + 1]]

    def equals(self, other):
        """Exact structural and numeric equality (bitwise for features)."""
        return (
            self.num_nodes == other.num_nodes
            and self.num_classes == other.num_classes
            and np.array_equal(self.edges, other.edges)
            and self.features.tobytes() == other.features.tobytes()
            and np.array_equal(self.labels, other.labels)
        )


@dataclass(frozen=True)
class SplitAssignment:
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray

    def sizes(self):
        return len(self.train_idx), len(self.val_idx), len(self.test_idx)


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters for :func:`synth_graph`.

    ``intra_prob`` is always the same-class connection probability and
    ``inter_prob`` the cross-class one; the heterophilic kind only swaps the
    defaults. Class means are drawn from ``N(0, mean_scale**2 / feature_dim)``
    so the expected distance between two class means does not depend on the
    feature dimension.
    """

    kind: str = "planted_partition"
    num_nodes: int = 200
    num_classes: int = 2
    intra_prob: float | None = None
    inter_prob: float | None = None
    feature_dim: int = 16
    noise_std: float = 1.0
    seed: int = 0
    mean_scale: float = 1.0
    num_pairs: int = 20

    def resolved(self):
        """Return a copy with kind-dependent probability defaults filled in."""
        intra, inter = self.intra_prob, self.inter_prob
        if self.kind == "heterophilic_bipartite":
            intra = 0.02 if intra is None else intra
            inter = 0.3 if inter is None else inter
        else:
            intra = 0.3 if intra is None else intra
            inter = 0.02 if inter is None else inter
        return SyntheticSpec(
            self.kind, self.num_nodes, self.num_classes, intra, inter,
            self.feature_dim, self.noise_std, self.seed, self.mean_scale, self.num_pairs,
        )

    def validate(self):
        spec = self.resolved()
        if spec.kind not in SYNTHETIC_KINDS:
            raise ValueError(f"unknown synthetic kind {spec.kind!r}")
        for name in ("intra_prob", "inter_prob"):
            p = getattr(spec, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        if spec.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        if spec.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if spec.num_nodes < 1:
            raise ValueError("num_nodes must be >= 1")
        if spec.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if spec.kind == "conflict_fixture" and spec.num_pairs < 1:
            raise ValueError("num_pairs must be >= 1")
        return spec


# ---------------------------------------------------------------------------
# ingestion / export
# ---------------------------------------------------------------------------

def _read_lines(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            yield lineno, raw.strip()


def ingest_graph(edge_path, feature_path, label_path, num_classes=None):
    """Load a graph from the three text files.

    Node ids are the 0-based row order of the feature file. When
    ``num_classes`` is omitted it is inferred as ``max(label) + 1``.
    """
    rows = []
    width = None
    for lineno, line in _read_lines(feature_path):
        if not line:
            continue
        try:
            row = [float(tok) for tok in line.split(",")]
        except ValueError:
            raise DataFormatError(f"{feature_path}:{lineno}: malformed feature row") from None
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise DataFormatError(
                f"{feature_path}:{lineno}: inconsistent feature width {len(row)} (expected {width})"
            )
        rows.append(row)
    if not rows:
        raise DataFormatError(f"{feature_path}: no feature rows")
    num_nodes = len(rows)
    features = np.array(rows, dtype=np.float64)

    labels = []
    for lineno, line in _read_lines(label_path):
        if not line:
            continue
        try:
            labels.append(int(line))
        except ValueError:
            raise DataFormatError(f"{label_path}:{lineno}: malformed label") from None
        if labels[-1] < 0 or (num_classes is not None and labels[-1] >= num_classes):
            raise DataFormatError(
                f"{label_path}:{lineno}: label {labels[-1]} outside declared class range"
            )
    if len(labels) != num_nodes:
        raise DataFormatError(
            f"{label_path}: {len(labels)} labels for {num_nodes} feature rows"
        )
    if num_classes is None:
        num_classes = max(max(labels) + 1, 2)

    edges = []
    for lineno, line in _read_lines(edge_path):
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise DataFormatError(f"{edge_path}:{lineno}: malformed edge line {line!r}")
        try:
            src, dst = int(parts[0]), int(parts[1])
        except ValueError:
            raise DataFormatError(f"{edge_path}:{lineno}: malformed edge line {line!r}") from None
        for node in (src, dst):
            if not 0 <= node < num_nodes:
                raise DataFormatError(f"{edge_path}:{lineno}: unknown node id {node}")
        edges.append((src, dst))

    graph = GraphStore(
        num_nodes, np.array(edges, dtype=np.int64).reshape(-1, 2), features,
        np.array(labels, dtype=np.int64), num_classes,
    )
    logger.info("ingested graph: %d nodes, %d edges, d=%d, C=%d",
                graph.num_nodes, graph.num_edges, graph.feature_dim, graph.num_classes)
    return graph


def write_graph(graph, directory):
    """Write ``graph`` as ``edges.tsv``, ``features.csv`` and ``labels.txt``.

    Reals are written with ``repr`` so a round trip through
    :func:`ingest_graph` is bit-exact.
    """
    os.makedirs(directory, exist_ok=True)
    paths = tuple(os.path.join(directory, name) for name in (EDGE_FILE, FEATURE_FILE, LABEL_FILE))
    with open(paths[0], "w", encoding="utf-8") as fh:
        fh.write("# src\tdst\n")
        for src, dst in graph.edges.tolist():
            fh.write(f"{src}\t{dst}\n")
    with open(paths[1], "w", encoding="utf-8") as fh:
        for row in graph.features.tolist():
            fh.write(",".join(repr(x) for x in row) + "\n")
    with open(paths[2], "w", encoding="utf-8") as fh:
        for label in graph.labels.tolist():
            fh.write(f"{label}\n")
    return paths


def graph_stats(graph):
    out_deg = np.diff(graph.out_csr[0])
    same = graph.labels[graph.edges[:, 0]] == graph.labels[graph.edges[:, 1]]
    return {
        "num_nodes": graph.num_nodes,
        "num_edges": graph.num_edges,
        "feature_dim": graph.feature_dim,
        "num_classes": graph.num_classes,
        "mean_out_degree": float(out_deg.mean()) if graph.num_nodes else 0.0,
        "dead_end_nodes": int((out_deg == 0).sum()),
        "edge_homophily": float(same.mean()) if graph.num_edges else float("nan"),
        "class_counts": np.bincount(graph.labels, minlength=graph.num_classes).tolist(),
    }


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

def make_split(num_nodes, fractions=(0.48, 0.32, 0.20), seed=0):
    """Random train/val/test partition of ``range(num_nodes)``.

    Validation and test sizes are ``floor(n * fraction)``; the remainder
    goes to train.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) < 0:
        raise ValueError("fractions must be three nonnegative reals")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)!r}")
    n_val = int(math.floor(num_nodes * fractions[1] + 1e-9))
    n_test = int(math.floor(num_nodes * fractions[2] + 1e-9))
    perm = np.random.default_rng(seed).permutation(num_nodes)
    val = np.sort(perm[:n_val])
    test = np.sort(perm[n_val:n_val + n_test])
    train = np.sort(perm[n_val + n_test:])
    return SplitAssignment(train, val, test)


# ---------------------------------------------------------------------------
# synthetic graphs
# ---------------------------------------------------------------------------

def _block_labels(num_nodes, num_classes):
    return (np.arange(num_nodes) * num_classes // num_nodes).astype(np.int64)


def synth_graph(spec):
    """Generate a stochastic-block graph (or the conflict fixture) from ``spec``."""
    spec = spec.validate()
    if spec.kind == "conflict_fixture":
        return synth_conflict_fixture(spec.num_pairs, spec.feature_dim, spec.seed)

    rng = np.random.default_rng(spec.seed)
    n, c = spec.num_nodes, spec.num_classes
    labels = _block_labels(n, c)
    means = rng.normal(0.0, spec.mean_scale / math.sqrt(spec.feature_dim), size=(c, spec.feature_dim))
    features = means[labels] + rng.normal(0.0, 1.0, size=(n, spec.feature_dim)) * spec.noise_std

    draws = rng.random((n, n))
    prob = np.where(labels[:, None] == labels[None, :], spec.intra_prob, spec.inter_prob)
    upper = np.triu(draws < prob, k=1)
    src, dst = np.nonzero(upper)
    edges = np.concatenate([np.stack([src, dst], 1), np.stack([dst, src], 1)])
    return GraphStore(n, edges, features, labels, c)


def synth_conflict_fixture(num_pairs, feature_dim, seed=0):
    """Label-conflict fixture made of mirrored two-node stars.

    Each pair draws two distinct feature vectors ``a`` and ``b`` and builds two
    components, hub listed first:

    * A: hub with ``a`` (label 0) linked both ways to a leaf with ``b`` (label 1)
    * B: hub with ``b`` (label 1) linked both ways to a leaf with ``a`` (label 0)

    Every node's neighbourhood holds exactly the feature multiset ``{a, b}``
    over the same structure, so a readout pooled over all nodes cannot tell
    the labels apart while the ego's own identity can.
    """
    if num_pairs < 1 or feature_dim < 1:
        raise ValueError("num_pairs and feature_dim must be >= 1")
    rng = np.random.default_rng(seed)
    features, labels, edges = [], [], []
    for p in range(num_pairs):
        a = rng.normal(size=feature_dim)
        b = rng.normal(size=feature_dim)
        while np.array_equal(a, b):
            b = rng.normal(size=feature_dim)
        base = 4 * p
        features += [a, b, b, a]
        labels += [0, 1, 1, 0]
        for hub, leaf in ((base, base + 1), (base + 2, base + 3)):
            edges += [(hub, leaf), (leaf, hub)]
    return GraphStore(
        4 * num_pairs, np.array(edges, dtype=np.int64), np.array(features),
        np.array(labels, dtype=np.int64), 2,
    )


def conflict_components(num_pairs):
    """Node ids of the (A, B) components of each conflict-fixture pair."""
    return [((4 * p, 4 * p + 1), (4 * p + 2, 4 * p + 3)) for p in range(num_pairs)]
