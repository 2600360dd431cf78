"""FGSM and restarted PGD inside L-infinity boxes.

Attacks accept anything with ``forward(x)`` and ``input_gradient(x, c)``:
plain :class:`~patchrepair.netcore.Dnn` objects as well as repaired networks.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .deeppoly import BoxRegion


@dataclass(frozen=True)
class AttackConfig:
    radius: float
    step_size: float
    steps: int = 50
    restarts: int = 10
    seed: int = 0
    target: Optional[int] = None
    domain: Optional[tuple[float, float]] = None
    fgsm_samples: int = 50

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("attack radius must be positive")
        if not 0 < self.step_size <= 2 * self.radius:
            raise ValueError("step size must lie in (0, 2 * radius]")
        if self.steps < 1 or self.restarts < 1:
            raise ValueError("steps and restarts must be at least 1")

    @classmethod
    def sampling_budget(cls, radius: float, *, step_size: float = 2 / 255, seed: int = 0,
                        domain: Optional[tuple[float, float]] = None) -> "AttackConfig":
        """10 rounds of 50 PGD steps plus 50 FGSM samples."""
        return cls(radius, min(step_size, 2 * radius), steps=50, restarts=10, seed=seed,
                   domain=domain, fgsm_samples=50)


@dataclass
class AttackResult:
    point: np.ndarray
    success: bool
    margin: float


@dataclass
class PgdResult:
    adversarial: Optional[np.ndarray]
    restart: Optional[int]
    finals: list[np.ndarray] = field(default_factory=list)

    @property
    def success(self) -> bool:
        return self.adversarial is not None


def attack_region(x, cfg: AttackConfig) -> BoxRegion:
    box = BoxRegion.from_center(x, cfg.radius)
    if cfg.domain is None:
        return box
    lo, hi = cfg.domain
    return BoxRegion(np.clip(box.lower, lo, hi), np.clip(box.upper, lo, hi))


def margin(y: np.ndarray, label: int, target: Optional[int] = None) -> tuple[float, np.ndarray]:
    """Largest wrong-class score minus the label score, and its coefficient vector."""
    y = np.asarray(y, dtype=np.float64)
    if target is None:
        others = y.copy()
        others[label] = -np.inf
        target = int(np.argmax(others))
    c = np.zeros_like(y)
    c[target] += 1.0
    c[label] -= 1.0
    return float(y[target] - y[label]), c


def _misclassified(y: np.ndarray, label: int) -> bool:
    return int(np.argmax(y)) != label


def fgsm(net, x, label: int, cfg: AttackConfig, start=None, region: Optional[BoxRegion] = None) -> AttackResult:
    """One signed-gradient step of length ``radius`` from ``start`` (default ``x``)."""
    region = region or attack_region(x, cfg)
    p = np.array(x if start is None else start, dtype=np.float64)
    _, c = margin(net.forward(p), label, cfg.target)
    g = net.input_gradient(p, c)
    p = region.clamp(p + cfg.radius * np.sign(g))
    y = net.forward(p)
    return AttackResult(p, _misclassified(y, label), margin(y, label, cfg.target)[0])


def pgd(net, x, label: int, cfg: AttackConfig, *, early_stop: bool = True,
        region: Optional[BoxRegion] = None) -> PgdResult:
    """Signed-gradient ascent on the margin with ``cfg.restarts`` starts.

    Restart 0 starts at ``x``; restart ``k`` draws its start from a generator
    seeded with ``(seed, k)``, so fewer restarts are a prefix of more.
    """
    region = region or attack_region(x, cfg)
    x = np.asarray(x, dtype=np.float64)
    finals = []
    for k in range(cfg.restarts):
        if k == 0:
            p = region.clamp(x)
        else:
            p = region.sample(np.random.default_rng([cfg.seed, k]), 1)[0]
        y = net.forward(p)
        if early_stop and _misclassified(y, label):
            return PgdResult(p, k, finals + [p])
        for _ in range(cfg.steps):
            _, c = margin(y, label, cfg.target)
            p = region.clamp(p + cfg.step_size * np.sign(net.input_gradient(p, c)))
            y = net.forward(p)
            if early_stop and _misclassified(y, label):
                return PgdResult(p, k, finals + [p])
        finals.append(p)
    return PgdResult(None, None, finals)


def collect_samples(net, x, label: int, cfg: AttackConfig, extra=(),
                    region: Optional[BoxRegion] = None) -> np.ndarray:
    """Sample set for feature boxes: PGD final iterates, FGSM points, ``x`` and ``extra``."""
    region = region or attack_region(x, cfg)
    pts = [np.asarray(x, dtype=np.float64)]
    pts += [np.asarray(e, dtype=np.float64) for e in extra]
    pts += pgd(net, x, label, cfg, early_stop=False, region=region).finals
    for k in range(cfg.fgsm_samples):
        start = None if k == 0 else region.sample(np.random.default_rng([cfg.seed, 1_000_003, k]), 1)[0]
        pts.append(fgsm(net, x, label, cfg, start=start, region=region).point)
    return np.array(pts)
