import csv
from dataclasses import replace

import numpy as np
import pytest

from subgnd import autodiff as ad
from subgnd.graph import SyntheticSpec, make_split, synth_graph
from subgnd.model import ModelConfig, init_params
from subgnd.sampler import WalkConfig, sample_dataset
from subgnd.trainer import (
    METRIC_FIELDS,
    TRIAL_FIELDS,
    AdamState,
    DivergenceError,
    PairSet,
    SearchSpace,
    TrainConfig,
    accuracy_from_logits,
    adam_step,
    evaluate,
    fit,
    per_sample_grads,
    random_search,
    run_experiment,
    select_best,
    summed_loss_grads,
    train_epoch,
    train_model,
    write_metrics,
)


@pytest.fixture(scope="module")
def small():
    g = synth_graph(SyntheticSpec(num_nodes=60, intra_prob=0.3, inter_prob=0.02, noise_std=0.5,
                                  feature_dim=8, seed=0))
    corpus = sample_dataset(g, WalkConfig(rw_hops=8, seed=0))
    return g, corpus, make_split(60, seed=0)


def model_for(g, **kw):
    return ModelConfig(input_dim=g.feature_dim, hidden_size=8, num_classes=g.num_classes, **kw)


def test_adam_first_step():
    params = {"w": ad.Tensor([0.0], requires_grad=True)}
    adam_step(params, {"w": np.array([1.0])}, AdamState(), TrainConfig(lr=0.01, weight_decay=0.0))
    assert params["w"].data[0] == pytest.approx(-0.01, rel=1e-6)


def test_adam_zero_grad_leaves_params():
    params = {"w": ad.Tensor([0.3, -2.0], requires_grad=True)}
    state = AdamState()
    for _ in range(5):
        adam_step(params, {"w": np.zeros(2)}, state, TrainConfig(weight_decay=0.0))
    assert params["w"].data.tolist() == [0.3, -2.0]


def test_adam_parameter_groups():
    params = {"w": ad.Tensor([1.0], requires_grad=True), "scaling_logits": ad.Tensor([1.0], requires_grad=True)}
    grads = {"w": np.array([1.0]), "scaling_logits": np.array([1.0])}
    adam_step(params, grads, AdamState(), TrainConfig(lr=0.01, alpha_lr=0.1, weight_decay=0.5))
    # w: -lr * (1 + wd * w); logits: -alpha_lr * 1, no decay
    assert params["w"].data[0] == pytest.approx(1.0 - 0.01 * 1.5, rel=1e-6)
    assert params["scaling_logits"].data[0] == pytest.approx(0.9, rel=1e-6)


def test_adam_rejects_non_finite():
    params = {"w": ad.Tensor([0.0], requires_grad=True)}
    with pytest.raises(DivergenceError):
        adam_step(params, {"w": np.array([np.nan])}, AdamState(), TrainConfig())


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=-1)
    with pytest.raises(ValueError):
        TrainConfig(patience=0)
    assert TrainConfig(lr=0.0).lr == 0.0


def test_dual_sample_equivalence(small):
    g, corpus, _ = small
    cfg = model_for(g, eps=-1.0, alter_pool="max")
    params = init_params(cfg, 1)
    rng = np.random.default_rng(0)
    for _ in range(3):
        egos = rng.choice(g.num_nodes, size=4, replace=False)
        subs = [s for v in egos for s in corpus[v]]
        labels = [g.labels[v] for v in egos for _ in range(2)]
        a = per_sample_grads(params, cfg, subs, labels)
        b = summed_loss_grads(params, cfg, subs, labels)
        for name in a:
            np.testing.assert_allclose(a[name], b[name], rtol=0, atol=1e-10)


def test_loss_decreases_and_shuffle_is_deterministic(small):
    g, corpus, split = small
    cfg = model_for(g)
    data = PairSet.from_corpus(corpus, g.labels, split.train_idx)
    tc = TrainConfig(lr=0.01, batch_size=16)

    def trajectory():
        params, state, rng = init_params(cfg, 0), AdamState(), np.random.default_rng(3)
        return [train_epoch(params, cfg, data, tc, state, rng) for _ in range(50)]

    losses = trajectory()
    assert losses[-1] < 0.5 * losses[0]
    assert trajectory() == losses


def test_evaluate_majority_oracle_and_ties(small):
    g, corpus, split = small
    cfg = model_for(g)
    params = init_params(cfg, 0)
    nodes = np.concatenate([np.flatnonzero(g.labels == 0)[:10], np.flatnonzero(g.labels == 1)[:10]])
    data = PairSet.from_corpus(corpus, g.labels, nodes)
    params["head.1.W"].data[:] = 0.0
    params["head.1.b"].data[:] = [0.0, 1.0]
    assert evaluate(params, cfg, data) == 0.5
    params["head.1.b"].data[:] = 0.0  # all logits tie -> class 0
    assert evaluate(params, cfg, data) == 0.5
    tied = PairSet(data.pairs[:10], np.zeros(10))
    assert evaluate(params, cfg, tied) == 1.0
    y = np.array([0, 1, 1, 0])
    assert accuracy_from_logits(np.eye(2)[y] * 5, y) == 1.0
    with pytest.raises(ValueError, match="empty"):
        evaluate(params, cfg, PairSet([], []))


def test_evaluate_invariant_to_order(small):
    g, corpus, split = small
    cfg = model_for(g)
    params = init_params(cfg, 4)
    data = PairSet.from_corpus(corpus, g.labels, split.test_idx)
    shuffled = PairSet.from_corpus(corpus, g.labels, split.test_idx[::-1])
    assert evaluate(params, cfg, data) == evaluate(params, cfg, shuffled)


def test_frozen_lr_stops_at_epoch_two(small):
    g, corpus, split = small
    cfg = model_for(g)
    tc = TrainConfig(lr=0.0, alpha_lr=0.0, patience=1, max_epochs=20)
    res = fit(g, split, WalkConfig(rw_hops=8), cfg, tc, corpus=corpus)
    assert res.epochs_run == 2 and res.best_epoch == 1
    assert abs(res.alpha.sum() - 1.0) < 1e-9 and np.all(res.alpha > 0)


def test_early_stopping_restores_best(small):
    g, corpus, split = small
    cfg = model_for(g)
    tc = TrainConfig(lr=0.05, max_epochs=30, patience=5)
    res = fit(g, split, WalkConfig(rw_hops=8), cfg, tc, corpus=corpus)
    best_val = max(row["val_acc"] for row in res.trace)
    assert res.val_acc == best_val
    assert res.trace[res.best_epoch - 1]["val_acc"] == best_val


def test_simplex_after_every_step(small):
    g, corpus, split = small
    cfg = model_for(g)
    sums = []
    fit(g, split, WalkConfig(rw_hops=8), cfg, TrainConfig(max_epochs=3, alpha_lr=0.5), corpus=corpus,
        on_step=lambda p: sums.append(p.alpha()))
    assert sums and all(abs(a.sum() - 1) < 1e-9 and np.all(a > 0) for a in sums)


def test_empty_val_monitors_train(small):
    g, corpus, _ = small
    cfg = model_for(g)
    train = PairSet.from_corpus(corpus, g.labels, np.arange(30))
    params = init_params(cfg, 0)
    trace, best, _ = train_model(params, cfg, TrainConfig(max_epochs=3), train, PairSet([], []))
    assert 1 <= best <= 3 and all(np.isnan(r["val_acc"]) for r in trace)


def test_divergence_reports_epoch(small):
    g, corpus, split = small
    cfg = model_for(g)
    params = init_params(cfg, 0)
    params["head.1.W"].data[:] = 1e308
    train = PairSet.from_corpus(corpus, g.labels, split.train_idx)
    with np.errstate(over="ignore"), pytest.raises(DivergenceError, match="epoch 1") as info:
        train_model(params, cfg, TrainConfig(max_epochs=2), train)
    assert info.value.epoch == 1


def test_metrics_csv(small, tmp_path):
    g, corpus, split = small
    path = tmp_path / "metrics.csv"
    res = fit(g, split, WalkConfig(rw_hops=8), model_for(g), TrainConfig(max_epochs=3), corpus=corpus,
              metrics_path=path)
    rows = list(csv.DictReader(path.open()))
    assert tuple(rows[0]) == METRIC_FIELDS and len(rows) == res.epochs_run
    assert float(rows[0]["alpha1"]) == res.trace[0]["alpha1"]
    base = fit(g, split, WalkConfig(rw_hops=8), model_for(g, variant="base"), TrainConfig(max_epochs=2),
               corpus=corpus)
    write_metrics(base.trace, path)
    assert list(csv.DictReader(path.open()))[0]["alpha1"] == "nan"


def test_run_experiment_single_and_deterministic(small):
    g, _, split = small
    args = (g, split, WalkConfig(rw_hops=8), model_for(g), TrainConfig(max_epochs=3))
    one = run_experiment(*args, num_runs=1)
    assert one.std == 0.0 and one.mean == one.values[0]
    again = run_experiment(*args, num_runs=2)
    assert again.values[0] == one.values[0]
    assert again.values == run_experiment(*args, num_runs=2).values
    with pytest.raises(ValueError):
        run_experiment(*args, num_runs=0)


def test_search_space_validation():
    with pytest.raises(ValueError):
        SearchSpace(eps=())
    with pytest.raises(ValueError):
        SearchSpace(budget=0)
    with pytest.raises(ValueError):
        SearchSpace(lr=(0.0, 1.0))


def test_random_search_budget_one_and_determinism(small, tmp_path):
    g, _, split = small
    space = SearchSpace(hidden_size=(8,), rw_hops=(8,), num_layers=(1,), budget=1)
    args = (g, split, space, 7, WalkConfig(), model_for(g), TrainConfig(max_epochs=2))
    res = random_search(*args, log_path=tmp_path / "trials.csv")
    assert len(res.trials) == 1 and res.best is res.trials[0]
    rows = list(csv.DictReader((tmp_path / "trials.csv").open()))
    assert tuple(rows[0]) == TRIAL_FIELDS and rows[0]["status"] == "ok"
    space3 = replace(space, budget=3)
    a = random_search(g, split, space3, 7, WalkConfig(), model_for(g), TrainConfig(max_epochs=2))
    b = random_search(g, split, space3, 7, WalkConfig(), model_for(g), TrainConfig(max_epochs=2))
    assert a.trials == b.trials
    assert a.trials[0]["lr"] == res.trials[0]["lr"]


def test_select_best_tie_break():
    trials = [
        {"trial": 0, "val_acc": 0.9, "val_loss": 0.3, "status": "ok"},
        {"trial": 1, "val_acc": 0.9, "val_loss": 0.1, "status": "ok"},
        {"trial": 2, "val_acc": 0.8, "val_loss": 0.0, "status": "ok"},
        {"trial": 3, "val_acc": 0.9, "val_loss": 0.1, "status": "ok"},
        {"trial": 4, "val_acc": float("nan"), "val_loss": float("nan"), "status": "failed: x"},
    ]
    assert select_best(trials)["trial"] == 1
    with pytest.raises(RuntimeError):
        select_best(trials[4:])


def test_failed_trials_are_skipped(small, monkeypatch):
    import subgnd.trainer as tr

    g, _, split = small
    real_fit = tr.fit
    calls = []

    def flaky(*args, **kwargs):
        calls.append(1)
        if len(calls) == 1:
            raise DivergenceError("boom", 1)
        return real_fit(*args, **kwargs)

    monkeypatch.setattr(tr, "fit", flaky)
    space = SearchSpace(hidden_size=(8,), rw_hops=(8,), num_layers=(1,), budget=2)
    res = random_search(g, split, space, 0, WalkConfig(), model_for(g), TrainConfig(max_epochs=2))
    assert res.trials[0]["status"].startswith("failed") and res.best["trial"] == 1
