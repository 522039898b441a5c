"""Training, evaluation, repeated runs and random hyperparameter search."""

from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .model import ModelConfig, SubgraphBatch, forward_batch, init_params
from .sampler import sample_dataset

logger = logging.getLogger(__name__)

SCALING = "scaling_logits"
METRIC_FIELDS = ("epoch", "train_loss", "val_acc", "test_acc", "alpha1", "alpha2", "alpha3", "alpha4")


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    alpha_lr: float = 0.01
    weight_decay: float = 5e-4
    max_epochs: int = 150
    patience: int = 25
    batch_size: int = 64
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    num_runs: int = 10

    def __post_init__(self):
        if self.lr < 0 or self.alpha_lr < 0:
            raise ValueError("learning rates must be >= 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.max_epochs < 1 or self.patience < 1 or self.batch_size < 1 or self.num_runs < 1:
            raise ValueError("max_epochs, patience, batch_size and num_runs must be >= 1")


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state, config):
    """One bias-corrected Adam update in place.

    Weight decay is decoupled (``lr * weight_decay * w``) and skips the
    scaling logits, which move with ``alpha_lr`` instead of ``lr``.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for {name}")
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        lr = config.alpha_lr if name == SCALING else config.lr
        update = (m / c1) / (np.sqrt(v / c2) + config.adam_eps)
        if name != SCALING and config.weight_decay:
            update = update + config.weight_decay * p.data
        p.data = p.data - lr * update
    return params, state


# ---------------------------------------------------------------------------
# data held as per-ego sample pairs
# ---------------------------------------------------------------------------

class PairSet:
    """Per-ego subgraph pairs with their targets; eval batches are built once."""

    def __init__(self, pairs, y, chunk=256):
        self.pairs = list(pairs)
        self.y = np.asarray(y, dtype=np.int64)
        if len(self.pairs) != len(self.y):
            raise ValueError("one target per subgraph pair required")
        self.chunk = chunk
        self._batches = None

    def __len__(self):
        return len(self.pairs)

    def batches(self):
        if self._batches is None:
            self._batches = [
                SubgraphBatch([s for pair in self.pairs[i:i + self.chunk] for s in pair])
                for i in range(0, len(self.pairs), self.chunk)
            ]
        return self._batches

    @classmethod
    def from_corpus(cls, corpus, labels, nodes):
        nodes = np.asarray(nodes, dtype=np.int64)
        return cls([corpus[v] for v in nodes], np.asarray(labels)[nodes])


def pair_logits(params, model_config, data):
    """Eval-mode logits averaged over each ego's samples, shape (n, C)."""
    if not len(data):
        return np.zeros((0, model_config.num_classes))
    out = []
    for batch, start in zip(data.batches(), range(0, len(data), data.chunk)):
        logits = forward_batch(batch, params, model_config).data
        sizes = [len(p) for p in data.pairs[start:start + data.chunk]]
        bounds = np.cumsum([0] + sizes)
        out.append(np.stack([logits[a:b].mean(axis=0) for a, b in zip(bounds[:-1], bounds[1:])]))
    return np.concatenate(out)


def evaluate(params, model_config, data):
    """Accuracy of the argmax of sample-averaged logits (lowest class wins ties)."""
    if not len(data):
        raise ValueError("cannot evaluate an empty split")
    pred = pair_logits(params, model_config, data).argmax(axis=1)
    return float((pred == data.y).mean())


def mean_loss(params, model_config, data):
    """Mean cross-entropy of the sample-averaged logits."""
    if not len(data):
        raise ValueError("cannot evaluate an empty split")
    logits = pair_logits(params, model_config, data)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(data)), data.y].mean())


def accuracy_from_logits(logits, y):
    logits = np.asarray(logits)
    if not len(logits):
        raise ValueError("cannot evaluate an empty split")
    return float((logits.argmax(axis=1) == np.asarray(y)).mean())


def train_epoch(params, model_config, data, config, state, rng, on_step=None):
    """One shuffled pass; each step sums the losses of both samples of every ego."""
    if not len(data):
        raise ValueError("empty training set")
    order = rng.permutation(len(data))
    total, count = 0.0, 0
    for start in range(0, len(order), config.batch_size):
        idx = order[start:start + config.batch_size]
        subs = [s for i in idx for s in data.pairs[i]]
        labels = np.concatenate([[data.y[i]] * len(data.pairs[i]) for i in idx])
        batch = SubgraphBatch(subs)
        params.zero_grad()
        try:
            with ad.Tape():
                logits = forward_batch(batch, params, model_config, training=True, rng=rng)
                loss = ad.cross_entropy_sum(logits, labels)
        except FloatingPointError as exc:
            raise DivergenceError(str(exc)) from None
        value = float(loss.data)
        if not math.isfinite(value):
            raise DivergenceError("non-finite training loss")
        ad.backward(loss)
        adam_step(params, params.grads(), state, config)
        if on_step is not None:
            on_step(params)
        total += value
        count += len(subs)
    return total / count


def per_sample_grads(params, model_config, subs, labels):
    """Gradients accumulated over one backward pass per subgraph (dropout off)."""
    params.zero_grad()
    for sub, label in zip(subs, labels):
        with ad.Tape():
            logits = forward_batch(SubgraphBatch([sub]), params, model_config)
            loss = ad.cross_entropy_sum(logits, [label])
        ad.backward(loss)
    return {k: v.copy() for k, v in params.grads().items()}


def summed_loss_grads(params, model_config, subs, labels):
    """Gradients of the batch's summed loss from a single backward pass (dropout off)."""
    params.zero_grad()
    with ad.Tape():
        logits = forward_batch(SubgraphBatch(subs), params, model_config)
        loss = ad.cross_entropy_sum(logits, labels)
    ad.backward(loss)
    return {k: v.copy() for k, v in params.grads().items()}


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------

@dataclass
class FitResult:
    params: object
    model_config: ModelConfig
    trace: list
    best_epoch: int
    epochs_run: int
    train_acc: float
    val_acc: float
    test_acc: float
    alpha: np.ndarray | None
    val_loss: float = float("nan")
    seconds: float = 0.0


def train_model(params, model_config, train_config, train, val=None, test=None,
                on_step=None, on_epoch=None):
    """Adam with early stopping on validation accuracy (train accuracy if no val set).

    The parameters of the best monitored epoch are restored into ``params``.
    Returns ``(trace, best_epoch, epochs_run)``.
    """
    monitor = val if val is not None and len(val) else train
    rng = np.random.default_rng([train_config.seed, 1])
    state = AdamState()
    best_acc, best_epoch, best_arrays = -1.0, 0, None
    trace = []
    epoch = 0
    for epoch in range(1, train_config.max_epochs + 1):
        try:
            loss = train_epoch(params, model_config, train, train_config, state, rng, on_step)
        except DivergenceError as exc:
            raise DivergenceError(f"{exc} at epoch {epoch}", epoch) from None
        monitored = evaluate(params, model_config, monitor)
        alpha = params.alpha()
        row = {
            "epoch": epoch,
            "train_loss": loss,
            "val_acc": evaluate(params, model_config, val) if val is not None and len(val) else float("nan"),
            "test_acc": evaluate(params, model_config, test) if test is not None and len(test) else float("nan"),
        }
        for i in range(4):
            row[f"alpha{i + 1}"] = float(alpha[i]) if alpha is not None else float("nan")
        trace.append(row)
        if on_epoch is not None:
            on_epoch(row)
        if monitored > best_acc:
            best_acc, best_epoch = monitored, epoch
            best_arrays = {k: v.copy() for k, v in params.arrays().items()}
        elif epoch - best_epoch >= train_config.patience:
            break
    params.load_arrays(best_arrays)
    return trace, best_epoch, epoch


def fit(graph, split, walk_config, model_config, train_config, corpus=None, workers=1,
        on_step=None, metrics_path=None):
    """Sample the corpus once, train with early stopping, report split accuracies."""
    t0 = time.perf_counter()
    if corpus is None:
        corpus = sample_dataset(graph, walk_config, workers=workers)
    train = PairSet.from_corpus(corpus, graph.labels, split.train_idx)
    val = PairSet.from_corpus(corpus, graph.labels, split.val_idx)
    test = PairSet.from_corpus(corpus, graph.labels, split.test_idx)
    params = init_params(model_config, seed=train_config.seed)
    trace, best_epoch, epochs = train_model(
        params, model_config, train_config, train, val, test, on_step=on_step)
    if metrics_path is not None:
        write_metrics(trace, metrics_path)

    def acc(data):
        return evaluate(params, model_config, data) if len(data) else float("nan")

    result = FitResult(
        params=params, model_config=model_config, trace=trace, best_epoch=best_epoch,
        epochs_run=epochs, train_acc=acc(train), val_acc=acc(val), test_acc=acc(test),
        alpha=params.alpha(), seconds=time.perf_counter() - t0,
        val_loss=mean_loss(params, model_config, val) if len(val) else float("nan"),
    )
    logger.info("fit done: epochs=%d best=%d train=%.4f val=%.4f test=%.4f (%.1fs)",
                epochs, best_epoch, result.train_acc, result.val_acc, result.test_acc, result.seconds)
    return result


def write_metrics(trace, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in trace:
            writer.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k] for k in METRIC_FIELDS})


@dataclass
class ExperimentResult:
    mean: float
    std: float
    values: list
    fits: list = field(repr=False, default_factory=list)


def run_experiment(graph, split, walk_config, model_config, train_config, num_runs=None, workers=1):
    """Independent fits with seeds ``seed + i`` for both sampling and training."""
    num_runs = train_config.num_runs if num_runs is None else num_runs
    if num_runs < 1:
        raise ValueError("num_runs must be >= 1")
    fits = []
    for i in range(num_runs):
        walk = replace(walk_config, seed=walk_config.seed + i)
        tc = replace(train_config, seed=train_config.seed + i)
        fits.append(fit(graph, split, walk, model_config, tc, workers=workers))
    values = [f.test_acc for f in fits]
    return ExperimentResult(float(np.mean(values)), float(np.std(values)), values, fits)


# ---------------------------------------------------------------------------
# random search
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SearchSpace:
    lr: tuple = (1e-4, 1e-1)
    weight_decay: tuple = (1e-6, 1e-2)
    dropout: tuple = (0.0, 0.7)
    hidden_size: tuple = (32, 64, 128)
    num_layers: tuple = (1, 2, 3)
    eps: tuple = (-1.0, 0.0, 1.0)
    rw_hops: tuple = (16, 32, 64, 128, 256)
    alter_pool: tuple = ("max", "mean", "sum")
    budget: int = 150

    def __post_init__(self):
        for name in ("hidden_size", "num_layers", "eps", "rw_hops", "alter_pool"):
            if not len(getattr(self, name)):
                raise ValueError(f"search choices for {name} are empty")
        for name in ("lr", "weight_decay"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} range must be positive and ordered")
        lo, hi = self.dropout
        if not 0 <= lo <= hi < 1:
            raise ValueError("dropout range must lie in [0, 1)")
        if self.budget < 1:
            raise ValueError("budget must be >= 1")

    def sample(self, rng):
        def log_uniform(lo, hi):
            return float(math.exp(rng.uniform(math.log(lo), math.log(hi))))

        def choice(options):
            return options[int(rng.integers(len(options)))]

        return {
            "lr": log_uniform(*self.lr),
            "weight_decay": log_uniform(*self.weight_decay),
            "dropout": float(rng.uniform(*self.dropout)),
            "hidden_size": int(choice(self.hidden_size)),
            "num_layers": int(choice(self.num_layers)),
            "eps": float(choice(self.eps)),
            "rw_hops": int(choice(self.rw_hops)),
            "alter_pool": str(choice(self.alter_pool)),
        }


TRIAL_FIELDS = ("trial", "lr", "weight_decay", "dropout", "hidden_size", "num_layers", "eps",
                "rw_hops", "alter_pool", "val_acc", "val_loss", "test_acc", "best_epoch", "status")


@dataclass
class SearchResult:
    best: dict
    trials: list


def _run_trial(args):
    index, hp, graph, split, walk_config, model_config, train_config = args
    walk = replace(walk_config, rw_hops=hp["rw_hops"])
    mc = replace(model_config, hidden_size=hp["hidden_size"], num_layers=hp["num_layers"],
                 eps=hp["eps"], alter_pool=hp["alter_pool"], dropout=hp["dropout"])
    tc = replace(train_config, lr=hp["lr"], weight_decay=hp["weight_decay"])
    row = {"trial": index, **hp}
    try:
        result = fit(graph, split, walk, mc, tc)
    except (DivergenceError, ValueError, FloatingPointError) as exc:
        logger.warning("trial %d failed: %s", index, exc)
        row.update(val_acc=float("nan"), val_loss=float("nan"), test_acc=float("nan"), best_epoch=0,
                   status=f"failed: {exc}")
        return row
    row.update(val_acc=result.val_acc, val_loss=result.val_loss, test_acc=result.test_acc,
               best_epoch=result.best_epoch, status="ok")
    return row


def random_search(graph, split, space, seed, walk_config, model_config, train_config,
                  workers=1, log_path=None):
    """Uniform random search; best trial = highest validation accuracy.

    Accuracy ties go to the lower validation loss, then to the earlier trial.

    Trial configurations come from a generator seeded with ``seed``; every
    trial fits with the sampling and training seeds of the given configs.
    """
    rng = np.random.default_rng(seed)
    draws = [space.sample(rng) for _ in range(space.budget)]
    jobs = [(i, hp, graph, split, walk_config, model_config, train_config) for i, hp in enumerate(draws)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            trials = list(pool.map(_run_trial, jobs))
    else:
        trials = [_run_trial(job) for job in jobs]
    if log_path is not None:
        write_trials(trials, log_path)
    return SearchResult(select_best(trials), trials)


def select_best(trials):
    """Highest val accuracy among successful trials; lower val loss, then earlier trial, on ties."""
    ok = [t for t in trials if t["status"] == "ok"]
    if not ok:
        raise RuntimeError("every search trial failed")
    return max(ok, key=lambda t: (t["val_acc"], -t["val_loss"], -t["trial"]))


def write_trials(trials, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=TRIAL_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in trials:
            writer.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k] for k in TRIAL_FIELDS})


