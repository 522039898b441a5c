"""SubGND subgraph classifier and the SubGNN-Base pooled-readout variant."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad

VARIANTS = ("subgnd", "base")
POOL_MODES = ("max", "mean", "sum")
CHECKPOINT_MAGIC = "subgnd-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    hidden_size: int = 32
    num_layers: int = 2
    eps: float = 0.0
    alter_pool: str = "mean"
    dropout: float = 0.0
    num_classes: int = 2
    mlp_depth: int = 2
    variant: str = "subgnd"

    def __post_init__(self):
        if self.input_dim < 1 or self.hidden_size < 1 or self.num_layers < 1 or self.mlp_depth < 1:
            raise ValueError("input_dim, hidden_size, num_layers and mlp_depth must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.alter_pool not in POOL_MODES:
            raise ValueError(f"alter_pool must be one of {POOL_MODES}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")

    @property
    def trunk_width(self):
        return 2 * self.hidden_size if self.variant == "subgnd" else self.hidden_size

    @property
    def readout_width(self):
        return 4 * self.hidden_size if self.variant == "subgnd" else self.hidden_size


class ModelParams:
    """Named parameter tensors in declaration order."""

    def __init__(self, tensors):
        self.tensors = dict(tensors)

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors.values())

    def names(self):
        return list(self.tensors)

    def arrays(self):
        return {k: t.data for k, t in self.tensors.items()}

    def copy(self):
        return ModelParams({k: ad.Tensor(t.data.copy(), requires_grad=True, name=k)
                            for k, t in self.tensors.items()})

    def load_arrays(self, arrays):
        for k, t in self.tensors.items():
            t.data = np.array(arrays[k], dtype=np.float64)

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def grads(self):
        return {k: (np.zeros_like(t.data) if t.grad is None else t.grad)
                for k, t in self.tensors.items()}

    def alpha(self):
        """Softmax of the four scaling logits, or ``None`` for the base variant."""
        if "scaling_logits" not in self.tensors:
            return None
        z = self.tensors["scaling_logits"].data
        e = np.exp(z - z.max())
        return e / e.sum()

    def all_finite(self):
        return all(np.all(np.isfinite(t.data)) for t in self.tensors.values())


def _glorot(rng, fan_in, fan_out):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_params(config, seed=0):
    """Glorot-uniform weights, zero biases, zero scaling logits."""
    rng = np.random.default_rng(seed)
    H, W = config.hidden_size, config.trunk_width
    shapes = [("proj", config.input_dim, H)]
    for layer in range(config.num_layers):
        shapes += [(f"gin{layer}.{j}", W, W) for j in range(config.mlp_depth)]
    tensors = {}
    for prefix, fan_in, fan_out in shapes:
        tensors[f"{prefix}.W"] = _glorot(rng, fan_in, fan_out)
        tensors[f"{prefix}.b"] = np.zeros(fan_out)
    if config.variant == "subgnd":
        tensors["scaling_logits"] = np.zeros(4)
    for prefix, fan_in, fan_out in (("head.0", config.readout_width, H), ("head.1", H, config.num_classes)):
        tensors[f"{prefix}.W"] = _glorot(rng, fan_in, fan_out)
        tensors[f"{prefix}.b"] = np.zeros(fan_out)
    return ModelParams({k: ad.Tensor(v, requires_grad=True, name=k) for k, v in tensors.items()})


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

class Adjacency:
    """Sparse ``dst x src`` operator for sum aggregation over directed edges."""

    def __init__(self, edges, num_nodes):
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if edges.size and (edges.min() < 0 or edges.max() >= num_nodes):
            raise IndexError("edge endpoint out of range")
        self.src, self.dst = edges[:, 0], edges[:, 1]
        self.num_nodes = num_nodes
        self.matrix = sp.csr_matrix(
            (np.ones(len(edges)), (self.dst, self.src)), shape=(num_nodes, num_nodes))
        self.transpose = self.matrix.T.tocsr()


def aggregate(x, adjacency):
    """Row ``v`` = sum of ``x[u]`` over edges ``(u, v)``; fused gather + segment_sum."""
    x = ad.as_tensor(x)
    if x.shape[0] != adjacency.num_nodes:
        raise ValueError("row count does not match adjacency size")
    return ad.spmm(adjacency.matrix, x, adjacency.transpose)


class SubgraphBatch:
    """Disjoint union of subgraphs with row bookkeeping for ego/alter readouts."""

    def __init__(self, subgraphs):
        subgraphs = list(subgraphs)
        if not subgraphs:
            raise ValueError("empty batch")
        sizes = np.array([s.num_nodes for s in subgraphs], dtype=np.int64)
        offsets = np.zeros(len(sizes) + 1, dtype=np.int64)
        np.cumsum(sizes, out=offsets[1:])
        self.size = len(subgraphs)
        self.num_rows = int(offsets[-1])
        self.features = np.concatenate([s.features for s in subgraphs])
        edges = np.concatenate(
            [s.local_edges.reshape(-1, 2) + off for s, off in zip(subgraphs, offsets[:-1])])
        self.adjacency = Adjacency(edges, self.num_rows)
        self.row_graph = np.repeat(np.arange(self.size), sizes)
        self.ego_rows = offsets[:-1] + np.array([s.ego_local for s in subgraphs])
        self.is_ego = np.zeros(self.num_rows, dtype=bool)
        self.is_ego[self.ego_rows] = True
        self.alter_rows = np.flatnonzero(~self.is_ego)
        self.alter_graph = self.row_graph[self.alter_rows]
        self.labels = np.array([s.label for s in subgraphs], dtype=np.int64)


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def mlp_from_params(params, prefix, depth):
    """Callable applying ``depth`` linear layers with ReLU in between."""
    layers = [(params[f"{prefix}.{j}.W"], params[f"{prefix}.{j}.b"]) for j in range(depth)]

    def apply(h):
        for j, (W, b) in enumerate(layers):
            if j:
                h = ad.relu(h)
            h = ad.linear(h, W, b)
        return h

    return apply


def zero_pad(h_nodes, ego_local):
    """Ego row becomes ``[h, 0]``, every other row ``[0, h]``."""
    h_nodes = ad.as_tensor(h_nodes)
    n = h_nodes.shape[0]
    if not 0 <= ego_local < n:
        raise IndexError(f"ego index {ego_local} out of range for {n} rows")
    mask = np.zeros(n, dtype=bool)
    mask[ego_local] = True
    return ad.role_pad(h_nodes, mask)


def gin_layer(h_in, local_edges, eps, mlp):
    """``mlp((1 + eps) * h_v + sum_{(u, v) in edges} h_u)`` for every node ``v``."""
    h_in = ad.as_tensor(h_in)
    if not isinstance(local_edges, Adjacency):
        local_edges = Adjacency(local_edges, h_in.shape[0])
    return mlp(ad.add(ad.scale(h_in, 1.0 + eps), aggregate(h_in, local_edges)))


def layer_maxpool(h_list):
    return ad.stack_max(h_list)


def ego_alter_concat(h_final, ego_local, mode):
    """``h_ego`` followed by the pooled alter rows (zeros if there are none)."""
    h_final = ad.as_tensor(h_final)
    n = h_final.shape[0]
    if not 0 <= ego_local < n:
        raise IndexError(f"ego index {ego_local} out of range for {n} rows")
    alters = ad.gather_rows(h_final, [i for i in range(n) if i != ego_local])
    return ad.concat(ad.take_row(h_final, ego_local), ad.pool(alters, mode))


def adaptive_scale(h_sub, scaling_logits):
    """Scale the four equal blocks of ``h_sub`` by ``softmax(scaling_logits)``."""
    h_sub = ad.as_tensor(h_sub)
    if h_sub.shape[-1] % 4:
        raise ValueError("representation width must be divisible by 4")
    return ad.block_scale(h_sub, ad.softmax(scaling_logits))


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def _trunk(batch, params, config, training, rng):
    h = ad.linear(batch.features, params["proj.W"], params["proj.b"])
    h = ad.dropout(h, config.dropout, rng, training)
    if config.variant == "subgnd":
        h = ad.role_pad(h, batch.is_ego)
    layers = []
    for layer in range(config.num_layers):
        mlp = mlp_from_params(params, f"gin{layer}", config.mlp_depth)
        h = gin_layer(h, batch.adjacency, config.eps, mlp)
        layers.append(h)
    return layer_maxpool(layers)


def _head(rep, params):
    hidden = ad.relu(ad.linear(rep, params["head.0.W"], params["head.0.b"]))
    return ad.linear(hidden, params["head.1.W"], params["head.1.b"])


def _check_finite(logits):
    if not np.all(np.isfinite(logits.data)):
        raise FloatingPointError("non-finite activations in forward pass")
    return logits


def forward_batch(batch, params, config, training=False, rng=None):
    """Logits of shape (B, C) for a :class:`SubgraphBatch`."""
    if batch.features.shape[1] != config.input_dim:
        raise ValueError(
            f"feature width {batch.features.shape[1]} does not match input_dim {config.input_dim}")
    if training and config.dropout > 0 and rng is None:
        raise ValueError("training with dropout needs an rng")
    h_final = _trunk(batch, params, config, training, rng)
    if config.variant == "subgnd":
        ego = ad.gather_rows(h_final, batch.ego_rows)
        alters = ad.segment_pool(
            ad.gather_rows(h_final, batch.alter_rows), batch.alter_graph, batch.size,
            config.alter_pool)
        rep = adaptive_scale(ad.concat(ego, alters), params["scaling_logits"])
    else:
        rep = ad.segment_pool(h_final, batch.row_graph, batch.size, config.alter_pool)
    return _check_finite(_head(rep, params))


def forward(sub, params, config, mode="eval", rng=None):
    """Logits (C,) of one subgraph; ``mode`` is ``"train"`` or ``"eval"``."""
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    if config.variant != "subgnd":
        config = _as_variant(config, "subgnd")
    return ad.take_row(forward_batch(SubgraphBatch([sub]), params, config, mode == "train", rng), 0)


def base_forward(sub, params, config, mode="eval", rng=None):
    """SubGNN-Base logits (C,): GIN trunk without padding, pooled over all rows."""
    if config.variant != "base":
        config = _as_variant(config, "base")
    return ad.take_row(forward_batch(SubgraphBatch([sub]), params, config, mode == "train", rng), 0)


def _as_variant(config, variant):
    return ModelConfig(**{**asdict(config), "variant": variant})


def predict_logits(subgraphs, params, config, batch_size=512):
    """Eval-mode logits for a flat list of subgraphs, as a numpy array."""
    out = []
    for i in range(0, len(subgraphs), batch_size):
        out.append(forward_batch(SubgraphBatch(subgraphs[i:i + batch_size]), params, config).data)
    return np.concatenate(out) if out else np.zeros((0, config.num_classes))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, params, config):
    """Text header echoing the config, then little-endian float64 arrays in order."""
    lines = [f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}", "config " + json.dumps(asdict(config), sort_keys=True)]
    for name, t in params.tensors.items():
        lines.append("array " + name + " " + " ".join(str(s) for s in t.data.shape))
    lines.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        for t in params.tensors.values():
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        magic = fh.readline().decode("utf-8").split()
        if len(magic) != 2 or magic[0] != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        if int(magic[1]) != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {magic[1]}")
        config_line = fh.readline().decode("utf-8")
        config = ModelConfig(**json.loads(config_line[len("config "):]))
        specs = []
        while True:
            line = fh.readline().decode("utf-8").strip()
            if line == "end":
                break
            if not line.startswith("array "):
                raise ValueError(f"{path}: malformed header line {line!r}")
            toks = line.split()
            specs.append((toks[1], tuple(int(s) for s in toks[2:])))
        tensors = {}
        for name, shape in specs:
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
            tensors[name] = ad.Tensor(data, requires_grad=True, name=name)
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes after arrays")
    return ModelParams(tensors), config
