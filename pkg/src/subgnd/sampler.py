"""Induced-subgraph random walk sampling (random walk with restart + induction)."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

WALK_DIRECTIONS = ("out", "in", "both")
SAMPLES_PER_NODE = 2
_RNG_CHUNK = 256


@dataclass(frozen=True)
class WalkConfig:
    restart_probability: float = 0.8
    rw_hops: int = 32
    walk_direction: str = "out"
    max_steps: int | None = None
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.restart_probability <= 1.0:
            raise ValueError("restart_probability must lie in [0, 1]")
        if self.rw_hops < 1:
            raise ValueError("rw_hops must be >= 1")
        if self.walk_direction not in WALK_DIRECTIONS:
            raise ValueError(f"walk_direction must be one of {WALK_DIRECTIONS}")
        if self.max_steps is not None and self.max_steps < self.rw_hops:
            raise ValueError("max_steps must be >= rw_hops")

    @property
    def step_cap(self):
        return 16 * self.rw_hops if self.max_steps is None else self.max_steps


@dataclass(eq=False)
class InducedSubgraph:
    """Anonymised subgraph around one ego node; the ego is always local node 0."""

    orig_ids: np.ndarray
    local_edges: np.ndarray
    features: np.ndarray
    label: int
    ego_local: int = 0

    @property
    def num_nodes(self):
        return len(self.orig_ids)

    @property
    def num_edges(self):
        return len(self.local_edges)

    @property
    def ego_id(self):
        return int(self.orig_ids[0])

    def check(self):
        n = self.num_nodes
        if n < 1 or self.ego_local != 0:
            raise AssertionError("ego must be local node 0")
        if len(np.unique(self.orig_ids)) != n:
            raise AssertionError("duplicate node in subgraph")
        if self.features.shape[0] != n:
            raise AssertionError("feature rows do not match node count")
        e = self.local_edges
        if e.size and (e.min() < 0 or e.max() >= n):
            raise AssertionError("local edge out of range")
        fwd = {tuple(x) for x in e.tolist()}
        if len(fwd) != len(e) or any((v, u) not in fwd for u, v in fwd):
            raise AssertionError("local edges not symmetric and deduplicated")
        if n == 1 and fwd != {(0, 0)}:
            raise AssertionError("singleton subgraph must carry exactly the ego self-loop")
        return True

    def equals(self, other):
        return (
            self.label == other.label
            and np.array_equal(self.orig_ids, other.orig_ids)
            and np.array_equal(self.local_edges, other.local_edges)
            and self.features.tobytes() == other.features.tobytes()
        )


def node_rng(seed, node, sample):
    """Independent generator keyed by ``(seed, node, sample)``."""
    return np.random.default_rng([int(seed), int(node), int(sample)])


def _neighbors(graph, v, direction):
    if direction == "out":
        return graph.out_neighbors(v)
    if direction == "in":
        return graph.in_neighbors(v)
    return np.union1d(graph.out_neighbors(v), graph.in_neighbors(v))


def rwr_walk(graph, seed_node, config, rng):
    """Distinct nodes visited by a random walk with restart, in first-visit order."""
    if not 0 <= seed_node < graph.num_nodes:
        raise IndexError(f"seed node {seed_node} out of range")
    visited = [int(seed_node)]
    if config.rw_hops == 1 or config.restart_probability >= 1.0:
        return visited
    if len(_neighbors(graph, seed_node, config.walk_direction)) == 0:
        return visited

    seen = {int(seed_node)}
    cache = {}
    current = int(seed_node)
    restart = config.restart_probability
    steps = 0
    cap = config.step_cap
    while len(visited) < config.rw_hops and steps < cap:
        u = rng.random(_RNG_CHUNK)
        r = rng.random(_RNG_CHUNK)
        for i in range(min(_RNG_CHUNK, cap - steps)):
            steps += 1
            if u[i] < restart:
                current = int(seed_node)
                continue
            nbrs = cache.get(current)
            if nbrs is None:
                nbrs = cache[current] = _neighbors(graph, current, config.walk_direction)
            if len(nbrs) == 0:
                current = int(seed_node)
                continue
            current = int(nbrs[int(r[i] * len(nbrs))])
            if current not in seen:
                seen.add(current)
                visited.append(current)
                if len(visited) == config.rw_hops:
                    break
    return visited


def induce_edges(graph, nodes):
    """Global directed edges with both endpoints in ``nodes``."""
    nodes = np.asarray(nodes, dtype=np.int64)
    if nodes.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    offsets, targets = graph.out_csr
    starts, stops = offsets[nodes], offsets[nodes + 1]
    counts = stops - starts
    src = np.repeat(nodes, counts)
    idx = np.concatenate([np.arange(a, b) for a, b in zip(starts, stops)]) if counts.sum() else np.zeros(0, np.int64)
    dst = targets[idx]
    keep = np.isin(dst, nodes)
    return np.stack([src[keep], dst[keep]], axis=1).astype(np.int64)


def bidirectionalize(edges):
    """Symmetric, deduplicated, sorted edge list containing every input edge both ways."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if edges.size == 0:
        return edges
    both = np.concatenate([edges, edges[:, ::-1]])
    return np.unique(both, axis=0)


def anonymize(graph, nodes, edges):
    """Relabel ``nodes`` to local indices in the given order and copy their features."""
    nodes = np.asarray(nodes, dtype=np.int64)
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    local = {int(v): i for i, v in enumerate(nodes.tolist())}
    try:
        local_edges = np.array([(local[s], local[d]) for s, d in edges.tolist()], dtype=np.int64)
    except KeyError as exc:
        raise ValueError(f"edge endpoint {exc.args[0]} not in node set") from None
    return InducedSubgraph(
        orig_ids=nodes.copy(),
        local_edges=local_edges.reshape(-1, 2),
        features=graph.features[nodes].copy(),
        label=int(graph.labels[nodes[0]]),
    )


def sample_subgraph(graph, v, config, rng):
    """Walk, induce, bidirectionalise and anonymise the subgraph of ``v``.

    An ego without any incident local edge gets a ``(0, 0)`` self-loop so
    message passing stays defined for dead ends.
    """
    nodes = rwr_walk(graph, v, config, rng)
    edges = bidirectionalize(induce_edges(graph, nodes))
    sub = anonymize(graph, nodes, edges)
    e = sub.local_edges
    if not ((e[:, 0] == 0) | (e[:, 1] == 0)).any():
        sub.local_edges = bidirectionalize(np.concatenate([e, [[0, 0]]]))
    return sub


def _sample_nodes(graph, nodes, config):
    return [
        tuple(sample_subgraph(graph, v, config, node_rng(config.seed, v, k)) for k in range(SAMPLES_PER_NODE))
        for v in nodes
    ]


def sample_dataset(graph, config, nodes=None, workers=1):
    """Two independently seeded subgraphs per node.

    The result depends only on ``(graph, config)``: every sample draws from
    its own generator keyed by ``(config.seed, node, k)``, so any worker
    count yields the same corpus.
    """
    nodes = np.arange(graph.num_nodes) if nodes is None else np.asarray(nodes, dtype=np.int64)
    if workers <= 1 or len(nodes) < 2 * workers:
        return _sample_nodes(graph, nodes, config)
    chunks = [c for c in np.array_split(nodes, workers) if len(c)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(_sample_nodes, [graph] * len(chunks), chunks, [config] * len(chunks)))
    return [pair for part in parts for pair in part]


def corpus_equal(a, b):
    return len(a) == len(b) and all(
        len(x) == len(y) and all(s.equals(t) for s, t in zip(x, y)) for x, y in zip(a, b)
    )


def size_histogram(corpus):
    sizes = np.array([s.num_nodes for pair in corpus for s in pair], dtype=np.int64)
    values, counts = np.unique(sizes, return_counts=True)
    return dict(zip(values.tolist(), counts.tolist()))


# ---------------------------------------------------------------------------
# corpus cache file
# ---------------------------------------------------------------------------

def write_corpus(corpus, path):
    """Write a flat list (or list of pairs) of subgraphs in the text cache format."""
    subs = [s for item in corpus for s in (item if isinstance(item, tuple) else (item,))]
    d = subs[0].features.shape[1] if subs else 0
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{len(subs)} {d}\n")
        for s in subs:
            fh.write(f"{s.ego_id} {s.label} {s.num_nodes} {s.num_edges}\n")
            for oid, row in zip(s.orig_ids.tolist(), s.features.tolist()):
                fh.write(" ".join([str(oid)] + [repr(x) for x in row]) + "\n")
            for src, dst in s.local_edges.tolist():
                fh.write(f"{src} {dst}\n")


def read_corpus(path, pairs=True):
    """Read a corpus cache file; with ``pairs`` consecutive subgraphs are grouped by two."""
    with open(path, encoding="utf-8") as fh:
        lines = iter(fh.read().splitlines())
        total, d = (int(x) for x in next(lines).split())
        subs = []
        for _ in range(total):
            ego, label, n, m = (int(x) for x in next(lines).split())
            ids, rows = [], []
            for _ in range(n):
                toks = next(lines).split()
                ids.append(int(toks[0]))
                rows.append([float(x) for x in toks[1:]])
            edges = [tuple(int(x) for x in next(lines).split()) for _ in range(m)]
            if ids[0] != ego:
                raise ValueError(f"corpus entry for ego {ego} does not list the ego first")
            subs.append(InducedSubgraph(
                np.array(ids, dtype=np.int64),
                np.array(edges, dtype=np.int64).reshape(-1, 2),
                np.array(rows, dtype=np.float64).reshape(n, d),
                label,
            ))
    if not pairs:
        return subs
    if len(subs) % SAMPLES_PER_NODE:
        raise ValueError("corpus does not hold whole per-node pairs")
    return [tuple(subs[i:i + SAMPLES_PER_NODE]) for i in range(0, len(subs), SAMPLES_PER_NODE)]
