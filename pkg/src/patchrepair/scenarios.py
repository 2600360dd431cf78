"""Seeded desk-scale repair scenarios shared by the scripts and the acceptance suite."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attacks import AttackConfig
from .harness import LabeledDataset
from .netcore import Dnn
from .repair import Anchor
from .toydata import TrainConfig, find_anchors, gaussian_mixture, train_mlp, two_clusters


@dataclass
class Scenario:
    net: Dnn
    anchors: list[Anchor]
    radius: float
    train: LabeledDataset
    test: LabeledDataset
    attack: AttackConfig


def cluster_scenario(seed: int = 0, n_anchors: int = 10, radius: float = 0.15) -> Scenario:
    """2-D two-cluster data, a 2-16-16-2 network and PGD-broken, unverified anchors with disjoint boxes."""
    data = two_clusters(1200, seed=seed)
    train, test = data.subset(slice(0, 600)), data.subset(slice(600, 1200))
    net = train_mlp(train, TrainConfig(hidden=(16, 16), epochs=400, seed=seed))
    att = AttackConfig(radius, radius / 4, steps=50, restarts=10, seed=seed)
    found = find_anchors(net, train, radius, n_anchors, att, disjoint=True)
    anchors = [Anchor(a.x, a.label, a.adversarial) for a in found]
    return Scenario(net, anchors, radius, train, test, att)


def feature_scenario(seed: int = 0, n_anchors: int = 20, radius: float = 0.3) -> Scenario:
    """8-D three-class mixture, an 8-32-32-3 network and PGD-broken anchors with disjoint boxes."""
    data = gaussian_mixture(4000, dim=8, classes=3, seed=seed, spread=0.7)
    train, test = data.subset(slice(0, 3000)), data.subset(slice(3000, 4000))
    net = train_mlp(train, TrainConfig(hidden=(32, 32), epochs=300, seed=seed))
    att = AttackConfig.sampling_budget(radius, seed=seed)
    found = find_anchors(net, train, radius, n_anchors, att, disjoint=True)
    anchors = [Anchor(a.x, a.label, a.adversarial) for a in found]
    return Scenario(net, anchors, radius, train, test, att)
