"""Synthetic datasets and a small full-batch trainer for desk-scale base networks."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .attacks import AttackConfig, pgd
from .deeppoly import BoxRegion, verify
from .harness import LabeledDataset
from .netcore import Dnn


def two_clusters(n: int, *, seed: int = 0, spread: float = 0.8, gap: float = 1.0) -> LabeledDataset:
    """Two overlapping 2-D Gaussian blobs at (-gap, 0) and (gap, 0)."""
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    centers = np.array([[-gap, 0.0], [gap, 0.0]])
    X = centers[y] + spread * rng.standard_normal((n, 2))
    return LabeledDataset(X, y, "two_clusters")


def gaussian_mixture(n: int, dim: int = 8, classes: int = 3, *, seed: int = 0,
                     spread: float = 1.0) -> LabeledDataset:
    """``classes`` Gaussian blobs with random unit-norm-times-2 centres in ``dim`` dimensions."""
    rng = np.random.default_rng([seed, dim, classes])
    centers = rng.standard_normal((classes, dim))
    centers *= 2.0 / np.linalg.norm(centers, axis=1, keepdims=True)
    data_rng = np.random.default_rng([seed, 1])
    y = data_rng.integers(0, classes, n)
    X = centers[y] + spread * data_rng.standard_normal((n, dim))
    return LabeledDataset(X, y, f"mixture{dim}d")


@dataclass
class TrainConfig:
    hidden: tuple[int, ...] = (16, 16)
    epochs: int = 400
    learning_rate: float = 0.01
    seed: int = 0


def _init(sizes: Sequence[int], rng: np.random.Generator):
    params = []
    for a, b in zip(sizes[:-1], sizes[1:]):
        params.append([rng.standard_normal((b, a)) * np.sqrt(2.0 / a), np.zeros(b)])
    return params


def train_mlp(data: LabeledDataset, cfg: TrainConfig = TrainConfig()) -> Dnn:
    """Full-batch Adam on softmax cross-entropy; deterministic given the seed."""
    rng = np.random.default_rng(cfg.seed)
    classes = int(data.labels.max()) + 1
    sizes = [data.inputs.shape[1], *cfg.hidden, classes]
    params = _init(sizes, rng)
    m = [[np.zeros_like(p) for p in layer] for layer in params]
    v = [[np.zeros_like(p) for p in layer] for layer in params]
    X, Y = data.inputs, np.eye(classes)[data.labels]
    b1, b2 = 0.9, 0.999
    for t in range(1, cfg.epochs + 1):
        acts = [X]
        for k, (W, b) in enumerate(params):
            z = acts[-1] @ W.T + b
            acts.append(z if k == len(params) - 1 else np.maximum(z, 0.0))
        logits = acts[-1]
        p = np.exp(logits - logits.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        delta = (p - Y) / len(X)
        for k in range(len(params) - 1, -1, -1):
            W, _ = params[k]
            grads = (delta.T @ acts[k], delta.sum(axis=0))
            if k:
                delta = (delta @ W) * (acts[k] > 0)
            for j, g in enumerate(grads):
                m[k][j] = b1 * m[k][j] + (1 - b1) * g
                v[k][j] = b2 * v[k][j] + (1 - b2) * g * g
                mh = m[k][j] / (1 - b1**t)
                vh = v[k][j] / (1 - b2**t)
                params[k][j] = params[k][j] - cfg.learning_rate * mh / (np.sqrt(vh) + 1e-8)
    return Dnn.from_arrays([W for W, _ in params], [b for _, b in params])


def accuracy(net: Dnn, data: LabeledDataset) -> float:
    return float(np.mean(net.classify(data.inputs) == data.labels))


@dataclass
class AttackedAnchor:
    x: np.ndarray
    label: int
    adversarial: np.ndarray
    index: int


def find_anchors(net: Dnn, data: LabeledDataset, radius: float, count: int, cfg: AttackConfig, *,
                 require_unverified: bool = True, disjoint: bool = False) -> list[AttackedAnchor]:
    """First ``count`` correctly classified points whose box PGD breaks, in dataset order.

    With ``disjoint`` a candidate whose box meets an already chosen box is
    skipped, so no input is claimed by two regions (patches of overlapping
    regions add up, and conflicting labels on a shared point cannot both hold).
    """
    out = []
    for i, (x, y) in enumerate(zip(data.inputs, data.labels)):
        if len(out) == count:
            break
        if net.classify(x) != y:
            continue
        if disjoint and any(np.max(np.abs(x - a.x)) <= 2 * radius for a in out):
            continue
        box = BoxRegion.from_center(x, radius)
        if require_unverified and verify(net, box, int(y)):
            continue
        res = pgd(net, x, int(y), cfg)
        if res.success:
            out.append(AttackedAnchor(x, int(y), res.adversarial, i))
    return out
