"""scikit-learn style wrappers around sampling and training.

:class:`SubgraphSampler` turns a :class:`~subgnd.graph.GraphStore` into the
per-node subgraph corpus, and :class:`SubGNDClassifier` learns from lists of
subgraph pairs (one pair per ego node)::

    corpus = SubgraphSampler(rw_hops=32, seed=0).fit_transform(graph)
    X = [corpus[v] for v in split.train_idx]
    clf = SubGNDClassifier(hidden_size=32).fit(X, graph.labels[split.train_idx])
"""

from __future__ import annotations

import numbers

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_is_fitted, column_or_1d

from .graph import GraphStore
from .model import ModelConfig, init_params
from .sampler import InducedSubgraph, WalkConfig, sample_dataset
from .trainer import PairSet, TrainConfig, pair_logits, train_model


def check_graph(graph):
    """Raise ``TypeError`` unless ``graph`` is a :class:`GraphStore`."""
    if not isinstance(graph, GraphStore):
        raise TypeError(f"expected a GraphStore, got {type(graph).__name__}")
    return graph


def check_pairs(X, n_features=None):
    """Normalize ``X`` into a list of tuples of subgraphs with a common feature width.

    A bare :class:`InducedSubgraph` counts as a one-sample group.
    """
    if isinstance(X, (str, bytes)) or not hasattr(X, "__len__"):
        raise TypeError("X must be a sequence of subgraph pairs")
    if len(X) == 0:
        raise ValueError("X is empty")
    pairs = []
    widths = set()
    for i, item in enumerate(X):
        group = (item,) if isinstance(item, InducedSubgraph) else tuple(item)
        if not group or not all(isinstance(s, InducedSubgraph) for s in group):
            raise TypeError(f"X[{i}] is not a subgraph or a non-empty group of subgraphs")
        widths.update(s.features.shape[1] for s in group)
        pairs.append(group)
    if len(widths) != 1:
        raise ValueError(f"inconsistent feature widths in X: {sorted(widths)}")
    width = widths.pop()
    if n_features is not None and width != n_features:
        raise ValueError(f"X has {width} features, but the estimator was fitted with {n_features}")
    return pairs, width


def _check_int(name, value, low):
    if not isinstance(value, numbers.Integral) or value < low:
        raise ValueError(f"{name} must be an integer >= {low}, got {value!r}")


class SubgraphSampler(TransformerMixin, BaseEstimator):
    """Draw two induced random-walk subgraphs around every node."""

    def __init__(self, restart_probability=0.8, rw_hops=32, walk_direction="out", max_steps=None,
                 seed=0, workers=1):
        self.restart_probability = restart_probability
        self.rw_hops = rw_hops
        self.walk_direction = walk_direction
        self.max_steps = max_steps
        self.seed = seed
        self.workers = workers

    def _walk_config(self):
        return WalkConfig(restart_probability=self.restart_probability, rw_hops=self.rw_hops,
                          walk_direction=self.walk_direction, max_steps=self.max_steps, seed=self.seed)

    def fit(self, X, y=None):
        graph = check_graph(X)
        self.walk_config_ = self._walk_config()
        _check_int("workers", self.workers, 1)
        self.n_features_in_ = graph.feature_dim
        return self

    def transform(self, X, nodes=None):
        """Corpus of subgraph tuples, one per node (all nodes unless ``nodes`` is given)."""
        check_is_fitted(self, "walk_config_")
        graph = check_graph(X)
        if graph.feature_dim != self.n_features_in_:
            raise ValueError(f"graph has {graph.feature_dim} features, expected {self.n_features_in_}")
        return sample_dataset(graph, self.walk_config_, nodes=nodes, workers=self.workers)


class SubGNDClassifier(ClassifierMixin, BaseEstimator):
    """Subgraph classifier trained with Adam and early stopping.

    ``X`` is a sequence with one entry per ego node; each entry is a tuple of
    that node's sampled subgraphs (or a single subgraph). Predictions average
    the logits of an entry's subgraphs. Validation data passed to :meth:`fit`
    drives early stopping; without it the training accuracy is monitored.
    """

    def __init__(self, hidden_size=32, num_layers=2, eps=0.0, alter_pool="mean", dropout=0.0,
                 mlp_depth=2, variant="subgnd", lr=0.01, alpha_lr=0.01, weight_decay=5e-4,
                 max_epochs=150, patience=25, batch_size=64, random_state=0):
        self.hidden_size = hidden_size
        self.num_layers = num_layers
        self.eps = eps
        self.alter_pool = alter_pool
        self.dropout = dropout
        self.mlp_depth = mlp_depth
        self.variant = variant
        self.lr = lr
        self.alpha_lr = alpha_lr
        self.weight_decay = weight_decay
        self.max_epochs = max_epochs
        self.patience = patience
        self.batch_size = batch_size
        self.random_state = random_state

    def _configs(self, n_features, n_classes):
        model = ModelConfig(
            input_dim=n_features, hidden_size=self.hidden_size, num_layers=self.num_layers,
            eps=float(self.eps), alter_pool=self.alter_pool, dropout=float(self.dropout),
            num_classes=max(n_classes, 2), mlp_depth=self.mlp_depth, variant=self.variant)
        train = TrainConfig(
            lr=self.lr, alpha_lr=self.alpha_lr, weight_decay=self.weight_decay,
            max_epochs=self.max_epochs, patience=self.patience, batch_size=self.batch_size,
            seed=self._seed())
        return model, train

    def _seed(self):
        if self.random_state is None:
            return int(np.random.SeedSequence().generate_state(1)[0])
        _check_int("random_state", self.random_state, 0)
        return int(self.random_state)

    def _encode(self, y, n):
        y = column_or_1d(y, warn=True)
        if len(y) != n:
            raise ValueError(f"X has {n} entries but y has {len(y)}")
        return y

    def fit(self, X, y, X_val=None, y_val=None):
        pairs, width = check_pairs(X)
        y = self._encode(y, len(pairs))
        check_classification_targets(y)
        self.classes_, encoded = np.unique(y, return_inverse=True)
        self.n_features_in_ = width
        self.model_config_, self.train_config_ = self._configs(width, len(self.classes_))
        train = PairSet(pairs, encoded)
        val = None
        if X_val is not None:
            val_pairs, _ = check_pairs(X_val, width)
            y_val = self._encode(y_val, len(val_pairs))
            unknown = np.setdiff1d(y_val, self.classes_)
            if unknown.size:
                raise ValueError(f"y_val has labels not seen in y: {unknown.tolist()}")
            val = PairSet(val_pairs, np.searchsorted(self.classes_, y_val))
        self.params_ = init_params(self.model_config_, seed=self.train_config_.seed)
        self.history_, self.best_epoch_, self.n_epochs_ = train_model(
            self.params_, self.model_config_, self.train_config_, train, val)
        return self

    def decision_function(self, X):
        """Sample-averaged logits, shape (n, n_classes)."""
        check_is_fitted(self, "params_")
        pairs, _ = check_pairs(X, self.n_features_in_)
        logits = pair_logits(self.params_, self.model_config_, PairSet(pairs, np.zeros(len(pairs))))
        return logits[:, :len(self.classes_)]

    def predict_proba(self, X):
        z = self.decision_function(X)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]

    @property
    def scaling_weights_(self):
        """Learned block weights (alpha), or ``None`` for the base variant."""
        check_is_fitted(self, "params_")
        return self.params_.alpha()
