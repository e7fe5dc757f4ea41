"""Feature probes: per-group linear classifiers with an averaged ensemble, and
nearest-neighbour class separability."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import softmax

from . import tensor as T
from .backbone import Model
from .errors import ConfigError
from .tensor import Tape, Tensor
from .training import AdamW

SEPARABILITY_METRIC = "nn_label_agreement"


def extract_group_features(model: Model, dataset, layers: list[int], batch_size: int = 256) -> list[np.ndarray]:
    """Max-pool each probed layer's BD-MLP output over tokens, split it into
    ``g2`` contiguous channel groups, and concatenate each group across layers.

    Returns one ``(n_samples, dim)`` array per group.
    """
    if model.mode != "inference":
        raise ConfigError("feature extraction expects the model in inference mode")
    if not layers:
        raise ConfigError("no layers to probe")
    mixers = [model.mixers[i] for i in layers]
    groups = {m.cfg.g2 for m in mixers}
    if len(groups) != 1:
        raise ConfigError(f"probed layers disagree on g2: {sorted(groups)}")
    g = groups.pop()
    chunks: list[list[np.ndarray]] = [[] for _ in range(g)]
    for m in mixers:
        m.capture = True
    try:
        for i in range(0, len(dataset.labels), batch_size):
            model(dataset.samples[i : i + batch_size])
            per_group = [[] for _ in range(g)]
            for m in mixers:
                pooled = m.last_y.max(axis=-1)
                for k, part in enumerate(np.split(pooled, g, axis=1)):
                    per_group[k].append(part)
            for k in range(g):
                chunks[k].append(np.concatenate(per_group[k], axis=1))
    finally:
        for m in mixers:
            m.capture = False
            m.last_y = None
    return [np.concatenate(c, axis=0) for c in chunks]


@dataclass
class ProbeReport:
    group_accuracy: list[float]
    ensemble_accuracy: float
    layers: list[int]
    group_dims: list[int]

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("group_index", "accuracy"))
        for k, acc in enumerate(self.group_accuracy):
            w.writerow((k, repr(acc)))
        w.writerow(("ensemble", repr(self.ensemble_accuracy)))
        return buf.getvalue()


def fit_linear_probe(x: np.ndarray, y: np.ndarray, n_classes: int, epochs: int = 200, lr: float = 1e-2):
    """Full-batch multinomial logistic regression from zero init; returns ``(W, b, mean, scale)``."""
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale < 1e-8] = 1.0
    xs = Tensor((x - mean) / scale)
    W = Tensor(np.zeros((x.shape[1], n_classes)), requires_grad=True)
    b = Tensor(np.zeros(n_classes), requires_grad=True)
    opt = AdamW([W, b], lr=lr)
    for _ in range(epochs):
        with Tape():
            loss = T.cross_entropy(T.matmul(xs, W) + b, y)
            opt.zero_grad()
            T.backward(loss)
        opt.step()
    return W.data, b.data, mean, scale


def probe_probabilities(params, x: np.ndarray) -> np.ndarray:
    W, b, mean, scale = params
    return softmax(((x - mean) / scale) @ W + b, axis=1)


def split_indices(n: int, train_frac: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    order = np.random.default_rng(seed).permutation(n)
    cut = int(round(train_frac * n))
    train, held = order[:cut], order[cut:]
    return train, (held if held.size else train)


def group_probe(
    features: list[np.ndarray],
    labels,
    train_frac: float = 0.5,
    seed: int = 0,
    epochs: int = 200,
    lr: float = 1e-2,
    layers: list[int] | None = None,
) -> ProbeReport:
    """Train one linear probe per feature group and ensemble them by averaging probabilities.

    Accuracies are measured on the held-out part of a seeded random split
    (the training part if the split leaves nothing held out).
    """
    labels = np.asarray(labels, dtype=np.intp)
    classes = np.unique(labels)
    if classes.size < 2:
        raise ConfigError("probing needs at least two classes")
    if not features or any(f.ndim != 2 or f.shape[1] < 1 or f.shape[0] != labels.size for f in features):
        raise ConfigError("each feature group must be (n_samples, dim >= 1)")
    train, held = split_indices(labels.size, train_frac, seed)
    if np.unique(labels[train]).size < 2:
        raise ConfigError("training split contains a single class")
    n_classes = int(labels.max()) + 1
    probs, accs = [], []
    for f in features:
        p = probe_probabilities(fit_linear_probe(f[train], labels[train], n_classes, epochs, lr), f[held])
        probs.append(p)
        accs.append(float(np.mean(p.argmax(axis=1) == labels[held])))
    ensemble = np.mean(probs, axis=0).argmax(axis=1)
    return ProbeReport(
        group_accuracy=accs,
        ensemble_accuracy=float(np.mean(ensemble == labels[held])),
        layers=list(layers or []),
        group_dims=[f.shape[1] for f in features],
    )


@dataclass
class SeparabilityReport:
    classes: list[int]
    per_class: list[float]
    mean: float
    metric: str = SEPARABILITY_METRIC

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("metric", "class", "separability"))
        for c, s in zip(self.classes, self.per_class):
            w.writerow((self.metric, c, repr(s)))
        w.writerow((self.metric, "mean", repr(self.mean)))
        return buf.getvalue()


def class_separability(features: np.ndarray, labels) -> SeparabilityReport:
    """Per class, the fraction of its samples whose nearest other sample (Euclidean) shares the class.

    This nearest-neighbour label agreement is a stand-in for richer
    separability indices; it is invariant to rotations and uniform scaling.
    """
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if x.ndim != 2 or x.shape[0] != labels.size:
        raise ConfigError("features must be (n_samples, dim) matching the labels")
    if labels.size < 2:
        raise ConfigError("need at least two samples")
    classes, counts = np.unique(labels, return_counts=True)
    if classes.size < 2:
        raise ConfigError("need at least two classes")
    if counts.min() < 2:
        raise ConfigError("every class needs at least two samples")
    dist = cdist(x, x)
    np.fill_diagonal(dist, np.inf)
    agree = labels[dist.argmin(axis=1)] == labels
    per_class = [float(agree[labels == c].mean()) for c in classes]
    return SeparabilityReport([int(c) for c in classes], per_class, float(np.mean(per_class)))
