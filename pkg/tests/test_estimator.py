import numpy as np
import pytest
from sklearn.base import clone

from subgnd.estimator import SubGNDClassifier, SubgraphSampler, check_pairs
from subgnd.graph import SyntheticSpec, make_split, synth_graph
from subgnd.sampler import WalkConfig, corpus_equal, sample_dataset


@pytest.fixture(scope="module")
def data():
    g = synth_graph(SyntheticSpec(num_nodes=60, noise_std=0.5, feature_dim=6, seed=1))
    corpus = SubgraphSampler(rw_hops=8, seed=2).fit_transform(g)
    return g, corpus, make_split(60, seed=1)


def test_sampler_matches_library(data):
    g, corpus, _ = data
    assert corpus_equal(corpus, sample_dataset(g, WalkConfig(rw_hops=8, seed=2)))
    sampler = SubgraphSampler(rw_hops=8, seed=2).fit(g)
    assert corpus_equal(sampler.transform(g, nodes=[3, 4]), corpus[3:5])


def test_sampler_validation(data):
    g, _, _ = data
    with pytest.raises(TypeError):
        SubgraphSampler().fit(np.zeros((3, 3)))
    with pytest.raises(ValueError):
        SubgraphSampler(rw_hops=0).fit(g)
    with pytest.raises(Exception, match="not fitted"):
        SubgraphSampler().transform(g)


def test_get_set_params_and_clone():
    clf = SubGNDClassifier(hidden_size=8, eps=-1.0)
    params = clf.get_params()
    assert params["hidden_size"] == 8 and params["eps"] == -1.0
    other = clone(clf).set_params(lr=0.5)
    assert other.lr == 0.5 and clf.lr == 0.01
    assert SubgraphSampler(rw_hops=4).get_params()["rw_hops"] == 4


def test_classifier_fit_predict(data):
    g, corpus, split = data
    names = np.array(["cat", "dog"])
    X = [corpus[v] for v in split.train_idx]
    Xv = [corpus[v] for v in split.val_idx]
    clf = SubGNDClassifier(hidden_size=8, max_epochs=30, random_state=0)
    clf.fit(X, names[g.labels[split.train_idx]], Xv, names[g.labels[split.val_idx]])
    assert clf.classes_.tolist() == ["cat", "dog"]
    Xt = [corpus[v] for v in split.test_idx]
    pred = clf.predict(Xt)
    assert set(pred) <= {"cat", "dog"}
    proba = clf.predict_proba(Xt)
    np.testing.assert_allclose(proba.sum(1), 1.0)
    assert clf.score(Xt, names[g.labels[split.test_idx]]) > 0.8
    assert abs(clf.scaling_weights_.sum() - 1) < 1e-9
    assert 1 <= clf.best_epoch_ <= clf.n_epochs_ == len(clf.history_)
    single = clf.predict([pair[0] for pair in Xt])
    assert single.shape == pred.shape


def test_classifier_determinism(data):
    g, corpus, split = data
    X = [corpus[v] for v in split.train_idx]
    y = g.labels[split.train_idx]
    a = SubGNDClassifier(hidden_size=8, max_epochs=3, variant="base").fit(X, y)
    b = SubGNDClassifier(hidden_size=8, max_epochs=3, variant="base").fit(X, y)
    assert a.decision_function(X).tobytes() == b.decision_function(X).tobytes()
    assert a.scaling_weights_ is None


def test_classifier_input_validation(data):
    g, corpus, split = data
    X = [corpus[v] for v in split.train_idx]
    y = g.labels[split.train_idx]
    clf = SubGNDClassifier(hidden_size=4, max_epochs=1)
    with pytest.raises(ValueError, match="entries"):
        clf.fit(X, y[:-1])
    with pytest.raises(ValueError, match="empty"):
        clf.fit([], [])
    with pytest.raises(TypeError):
        clf.fit([[1, 2]], [0])
    with pytest.raises(ValueError, match="Unknown label type"):
        clf.fit(X, np.linspace(0, 1, len(X)))
    with pytest.raises(Exception, match="not fitted"):
        clf.predict(X)
    clf.fit(X, y)
    with pytest.raises(ValueError, match="not seen"):
        SubGNDClassifier(max_epochs=1).fit(X, y, X[:2], [0, 7])


def test_check_pairs_widths(data):
    _, corpus, _ = data
    pairs, width = check_pairs(corpus[:3])
    assert width == 6 and all(len(p) == 2 for p in pairs)
    with pytest.raises(ValueError, match="fitted with 5"):
        check_pairs(corpus[:3], n_features=5)
