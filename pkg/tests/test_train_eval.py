import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from imagesig.nn import ModelSpec, focal_loss, softmax
from imagesig.train_eval import (
    TrainConfig,
    average_precision,
    class_alpha,
    evaluate,
    f1_score,
    metrics_from_probs,
    read_history_csv,
    roc_auc,
    split,
    split_indices,
    train,
    write_history_csv,
    write_roc_csv,
)
from oracles import brute_ap, brute_auc, cross_entropy


def separable(n=40, rows=2, width=3, seed=0):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    x = rng.normal(size=(n, rows, width)) + np.where(y[:, None, None] == 1, 1.5, -1.5)
    return x, y


# --- split and class weights ----------------------------------------------------------


def test_stratified_split():
    labels = np.array([0] * 60 + [1] * 40)
    tr, va = split_indices(labels, 0.2, seed=0)
    assert np.bincount(labels[va]).tolist() == [12, 8]
    assert sorted(np.concatenate([tr, va]).tolist()) == list(range(100))
    assert not set(tr) & set(va)
    tr2, va2 = split_indices(labels, 0.2, seed=0)
    assert np.array_equal(va, va2) and np.array_equal(tr, tr2)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 2), min_size=6, max_size=80), st.floats(0.05, 0.95), st.integers(0, 1000))
def test_split_preserves_ratios(labels, frac, seed):
    labels = np.array(labels)
    _, va = split_indices(labels, frac, seed)
    for c in np.unique(labels):
        n_c = np.sum(labels == c)
        assert abs(np.sum(labels[va] == c) - frac * n_c) <= 1 or n_c == 1


def test_split_keeps_groups_together():
    labels = np.repeat([0, 1], 20)
    groups = np.repeat(np.arange(20), 2)
    tr, va = split_indices(labels, 0.25, 1, groups)
    assert not set(groups[tr]) & set(groups[va])


def test_split_arrays():
    x, y = separable(10)
    (xt, yt), (xv, yv) = split(x, y, 0.2, 0)
    assert len(xt) + len(xv) == 10 and len(yt) == len(xt)


def test_class_alpha():
    assert np.allclose(class_alpha([50, 50]), [1.0, 1.0])
    assert np.allclose(np.round(class_alpha([589, 2860]), 2), [2.93, 0.60])
    fire = class_alpha([4097, 11055])
    assert np.all(np.abs(fire - [1.84, 0.68]) < 0.01)
    with pytest.raises(ValueError):
        class_alpha([0, 3])


def test_weighted_cross_entropy_at_gamma_zero():
    rng = np.random.default_rng(0)
    probs = softmax(rng.normal(size=(30, 2)))
    y = rng.integers(0, 2, 30)
    alpha = class_alpha(np.bincount(y))
    assert abs(focal_loss(probs, y, alpha, 0.0)[0] - cross_entropy(probs, y, alpha)) < 1e-12


# --- training ---------------------------------------------------------------------------


def test_train_separable():
    x, y = separable(60)
    spec = ModelSpec("fc", 2, 3, neurons=8)
    result = train(x, y, spec, TrainConfig(batch_size=16, epochs=100, lr=1e-2))
    assert result.history[-1]["train_acc"] >= 0.99
    assert 1 <= result.best_epoch <= 100


def test_train_zero_epochs_and_determinism():
    x, y = separable(20)
    spec = ModelSpec("fc", 2, 3, neurons=4)
    r0 = train(x, y, spec, TrainConfig(epochs=0))
    assert r0.history == [] and r0.best_epoch == 0
    a = train(x, y, spec, TrainConfig(batch_size=5, epochs=5, seed=3))
    b = train(x, y, spec, TrainConfig(batch_size=5, epochs=5, seed=3))
    assert a.history == b.history
    assert all(np.array_equal(a.model.tensors[k], b.model.tensors[k]) for k in a.model.tensors)


def test_train_rejects_bad_input():
    spec = ModelSpec("fc", 2, 3)
    with pytest.raises(ValueError):
        train(np.zeros((0, 2, 3)), np.zeros(0, int), spec, TrainConfig())
    with pytest.raises(ValueError):
        train(np.zeros((4, 3, 3)), np.array([0, 1, 0, 1]), spec, TrainConfig())
    with pytest.raises(ValueError):
        TrainConfig(val_fraction=1.0)


def test_large_batch_clamped(caplog):
    x, y = separable(20)
    result = train(x, y, ModelSpec("fc", 2, 3, neurons=4), TrainConfig(batch_size=3000, epochs=2))
    assert len(result.history) == 2
    assert "full-batch" in caplog.text


# --- metrics -------------------------------------------------------------------------------


def test_auc_examples():
    y = np.array([0, 1, 0, 1, 1, 0])
    assert roc_auc(y.astype(float), y)[3] == 1.0
    assert roc_auc(np.full(6, 0.3), y)[3] == 0.5
    s = np.array([0.1, 0.8, 0.4, 0.35, 0.9, 0.2])
    assert abs(roc_auc(-s, y)[3] - (1 - roc_auc(s, y)[3])) < 1e-15
    thr, fpr, tpr, _ = roc_auc(s, y)
    assert (fpr[0], tpr[0], fpr[-1], tpr[-1]) == (0, 0, 1, 1) and thr[0] == np.inf


def test_ap_examples():
    y = np.array([1, 1, 0, 0])
    assert average_precision(np.array([0.9, 0.8, 0.2, 0.1]), y) == 1.0
    n = 7
    y = np.zeros(n, int)
    y[-1] = 1
    assert abs(average_precision(-np.arange(n, dtype=float), y) - 1 / n) < 1e-15


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.booleans()), min_size=2, max_size=50))
def test_metrics_match_brute_force(pairs):
    scores = np.array([p[0] for p in pairs], float) / 5
    labels = np.array([p[1] for p in pairs])
    if labels.all() or not labels.any():
        return
    assert abs(roc_auc(scores, labels)[3] - brute_auc(scores, labels)) < 1e-12
    assert abs(average_precision(scores, labels) - brute_ap(scores, labels)) < 1e-12
    mono = np.exp(3 * scores) + 1
    assert abs(roc_auc(mono, labels)[3] - roc_auc(scores, labels)[3]) < 1e-15
    assert abs(average_precision(mono, labels) - average_precision(scores, labels)) < 1e-15
    assert np.array_equal(roc_auc(mono, labels)[1], roc_auc(scores, labels)[1])


def test_f1():
    assert f1_score([1, 1, 0, 0], [1, 1, 0, 0]) == 1.0
    assert f1_score([0, 0, 0, 0], [1, 0, 0, 0]) == 0.0
    assert abs(f1_score([1, 1, 0, 0], [1, 0, 1, 0]) - 0.5) < 1e-15


def test_metrics_from_probs():
    y = np.array([0, 1, 1, 0])
    perfect = np.eye(2)[y] * 0.8 + 0.1
    m = metrics_from_probs(perfect, y)
    assert (m.accuracy, m.f1, m.auc, m.ap) == (1.0, 1.0, 1.0, 1.0)
    assert m.confusion.tolist() == [[2, 0], [0, 2]]

    imbalanced = np.array([0] * 9 + [1])
    negative = np.tile([0.9, 0.1], (10, 1))
    m = metrics_from_probs(negative, imbalanced)
    assert m.f1 == 0.0 and m.accuracy == 0.9

    single = metrics_from_probs(perfect[:1], y[:1])
    assert np.isnan(single.auc)

    three = softmax(np.random.default_rng(0).normal(size=(30, 3)))
    m3 = metrics_from_probs(three, np.arange(30) % 3)
    assert 0 <= m3.auc <= 1 and m3.confusion.sum() == 30


def test_evaluate_pure():
    x, y = separable(20)
    model = train(x, y, ModelSpec("fc", 2, 3, neurons=4), TrainConfig(epochs=0)).model
    a, b = evaluate(model, x, y), evaluate(model, x, y)
    assert a.summary() == b.summary() and np.array_equal(a.fpr, b.fpr)


# --- CSV output ---------------------------------------------------------------------------------


def test_history_and_roc_csv(tmp_path):
    hist = [{"epoch": 1, "train_loss": 0.5, "train_acc": 0.75, "val_loss": 0.25, "val_acc": 1 / 3}]
    write_history_csv(tmp_path / "h.csv", hist)
    assert read_history_csv(tmp_path / "h.csv") == hist
    assert (tmp_path / "h.csv").read_text().splitlines()[0] == "epoch,train_loss,train_acc,val_loss,val_acc"

    m = metrics_from_probs(np.array([[0.8, 0.2], [0.3, 0.7]]), [0, 1])
    write_roc_csv(tmp_path / "roc.csv", m)
    lines = (tmp_path / "roc.csv").read_text().splitlines()
    assert lines[0] == "threshold,fpr,tpr" and lines[1] == "inf,0.0,0.0" and lines[-1].endswith(",1.0,1.0")
