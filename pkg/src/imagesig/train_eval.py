"""Training loop, validation split, and evaluation metrics."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .nn import AdamState, ModelParams, ModelSpec, adam_step, backward, build_model, focal_loss, forward
from .rng import substream

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 3000
    epochs: int = 300
    lr: float = 1e-3
    gamma: float = 2.0
    seed: int = 0
    val_fraction: float = 0.2
    augment: bool = False

    def __post_init__(self):
        if not 0 < self.val_fraction < 1:
            raise ValueError("validation fraction must lie strictly between 0 and 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


# ---------------------------------------------------------------------------
# splitting and class weights
# ---------------------------------------------------------------------------


def split_indices(labels, fraction: float, seed: int, groups=None) -> tuple[np.ndarray, np.ndarray]:
    """Stratified (train, validation) index arrays.

    Rows sharing a group id (an image and its augmented copies) always land
    on the same side.
    """
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie strictly between 0 and 1")
    labels = np.asarray(labels)
    groups = np.arange(len(labels)) if groups is None else np.asarray(groups)
    rng = substream(seed, "split")
    val_groups = []
    for cls in np.unique(labels):
        members = np.unique(groups[labels == cls])
        members = members[rng.permutation(len(members))]
        n_val = int(np.floor(fraction * len(members) + 0.5))
        if len(members) > 1:
            n_val = min(max(n_val, 1), len(members) - 1)
        val_groups.append(members[:n_val])
    in_val = np.isin(groups, np.concatenate(val_groups))
    return np.flatnonzero(~in_val), np.flatnonzero(in_val)


def split(features, labels, fraction: float = 0.2, seed: int = 0, groups=None):
    """``((x_train, y_train), (x_val, y_val))`` stratified by class."""
    tr, va = split_indices(labels, fraction, seed, groups)
    features, labels = np.asarray(features), np.asarray(labels)
    return (features[tr], labels[tr]), (features[va], labels[va])


def class_alpha(counts) -> np.ndarray:
    """Inverse-frequency weights N / (K * N_c), 1.0 for balanced classes."""
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts < 1):
        raise ValueError("every class needs at least one sample")
    return counts.sum() / (len(counts) * counts)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def predict_proba(model: ModelParams, x, chunk: int = 512, fwd: Callable | None = None) -> np.ndarray:
    fwd = fwd or (lambda m, b: forward(m, b)[0])
    x = np.asarray(x)
    if len(x) == 0:
        return np.zeros((0, model.spec.classes))
    return np.concatenate([fwd(model, x[i:i + chunk]) for i in range(0, len(x), chunk)])


@dataclass
class TrainResult:
    model: ModelParams
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    alpha: np.ndarray | None = None


def train(features, labels, spec: ModelSpec, cfg: TrainConfig, groups=None) -> TrainResult:
    """Mini-batch Adam on the class-weighted focal loss.

    Keeps the parameters from the epoch with the best validation accuracy
    (earliest on ties). With ``epochs == 0`` the initial model is returned.
    """
    features = np.asarray(features)
    labels = np.asarray(labels, dtype=np.int64)
    if len(features) == 0:
        raise ValueError("cannot train on an empty feature set")
    if features.shape[1:] != (spec.rows, spec.width):
        raise ValueError(f"features of shape {features.shape[1:]} do not match model input ({spec.rows}, {spec.width})")
    tr, va = split_indices(labels, cfg.val_fraction, cfg.seed, groups)
    x_tr, y_tr, x_va, y_va = features[tr], labels[tr], features[va], labels[va]
    alpha = class_alpha(np.maximum(np.bincount(y_tr, minlength=spec.classes), 1))

    model = build_model(spec, cfg.seed)
    result = TrainResult(model=model, alpha=alpha)
    if cfg.epochs == 0:
        return result

    batch = cfg.batch_size
    if batch > len(x_tr):
        log.warning("batch size %d exceeds %d training samples; using full-batch training", batch, len(x_tr))
        batch = len(x_tr)
    state = AdamState.for_model(model, lr=cfg.lr)
    best_acc = -1.0
    for epoch in range(1, cfg.epochs + 1):
        order = substream(cfg.seed, "shuffle", epoch).permutation(len(x_tr))
        loss_sum, correct = 0.0, 0
        for start in range(0, len(order), batch):
            idx = order[start:start + batch]
            probs, cache = forward(model, x_tr[idx])
            loss, dlogits = focal_loss(probs, y_tr[idx], alpha, cfg.gamma)
            grads = backward(model, cache, dlogits)
            model, state = adam_step(model, grads, state)
            loss_sum += loss * len(idx)
            correct += int(np.sum(probs.argmax(axis=1) == y_tr[idx]))
        row = {"epoch": epoch, "train_loss": loss_sum / len(order), "train_acc": correct / len(order)}
        if len(x_va):
            probs = predict_proba(model, x_va)
            row["val_loss"] = focal_loss(probs, y_va, alpha, cfg.gamma)[0]
            row["val_acc"] = float(np.mean(probs.argmax(axis=1) == y_va))
        else:
            row["val_loss"], row["val_acc"] = row["train_loss"], row["train_acc"]
        result.history.append(row)
        if row["val_acc"] > best_acc:
            best_acc = row["val_acc"]
            result.model = model
            result.best_epoch = epoch
    return result


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def _binary_inputs(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(bool)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    if labels.all() or not labels.any():
        raise ValueError("need both positive and negative labels")
    return scores, labels


def _sweep(scores, labels):
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    last = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]  # final index of each tie group
    return s[last], tp[last], fp[last]


def roc_auc(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    """ROC points over distinct thresholds (ties grouped) and trapezoidal AUC.

    Returns ``(thresholds, fpr, tpr, auc)``; the curve starts at (0, 0) with
    threshold +inf and ends at (1, 1).
    """
    scores, labels = _binary_inputs(scores, labels)
    thr, tp, fp = _sweep(scores, labels)
    tpr = np.r_[0.0, tp / labels.sum()]
    fpr = np.r_[0.0, fp / (~labels).sum()]
    thresholds = np.r_[np.inf, thr]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return thresholds, fpr, tpr, auc


def average_precision(scores, labels) -> float:
    """Step-wise AP: sum over thresholds of (R_k - R_{k-1}) * P_k, no interpolation."""
    scores, labels = _binary_inputs(scores, labels)
    _, tp, fp = _sweep(scores, labels)
    recall = np.r_[0.0, tp / labels.sum()]
    precision = tp / (tp + fp)
    return float(np.sum(np.diff(recall) * precision))


def f1_score(pred, labels) -> float:
    pred = np.asarray(pred).astype(bool)
    labels = np.asarray(labels).astype(bool)
    tp = np.sum(pred & labels)
    if tp == 0:
        return 0.0
    precision = tp / pred.sum()
    recall = tp / labels.sum()
    return float(2 * precision * recall / (precision + recall))


@dataclass
class Metrics:
    accuracy: float
    ap: float
    f1: float
    auc: float
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    confusion: np.ndarray  # confusion[true, predicted]

    def summary(self) -> dict:
        return {"acc": self.accuracy, "ap": self.ap, "f1": self.f1, "auc": self.auc}


def metrics_from_probs(probs, labels) -> Metrics:
    """Accuracy at argmax; binary metrics on class 1, macro one-vs-rest for K > 2.

    Ranking metrics are NaN when the labels hold a single class.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    k = probs.shape[1]
    pred = probs.argmax(axis=1)
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (labels, pred), 1)
    accuracy = float(np.mean(pred == labels)) if len(labels) else float("nan")
    positives = [1] if k == 2 else list(range(k))
    aps, f1s, aucs = [], [], []
    curve = (np.array([np.inf]), np.array([0.0, 1.0]), np.array([0.0, 1.0]))
    for c in positives:
        y = labels == c
        f1s.append(f1_score(pred == c, y))
        try:
            thr, fpr, tpr, auc = roc_auc(probs[:, c], y)
        except ValueError:
            aps.append(float("nan"))
            aucs.append(float("nan"))
            continue
        aps.append(average_precision(probs[:, c], y))
        aucs.append(auc)
        if c == positives[0]:
            curve = (thr, fpr, tpr)
    return Metrics(
        accuracy=accuracy,
        ap=float(np.mean(aps)),
        f1=float(np.mean(f1s)),
        auc=float(np.mean(aucs)),
        thresholds=curve[0],
        fpr=curve[1],
        tpr=curve[2],
        confusion=confusion,
    )


def evaluate(model: ModelParams, features, labels, fwd: Callable | None = None) -> Metrics:
    return metrics_from_probs(predict_proba(model, features, fwd=fwd), labels)


# ---------------------------------------------------------------------------
# CSV output
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_history_csv(path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for row in history:
            w.writerow([_fmt(row[k]) for k in HISTORY_FIELDS])


def write_roc_csv(path, metrics: Metrics) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("threshold", "fpr", "tpr"))
        for t, f, p in zip(metrics.thresholds, metrics.fpr, metrics.tpr):
            w.writerow((_fmt(t), _fmt(f), _fmt(p)))


def read_history_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()}
            for row in csv.DictReader(fh)
        ]

