"""Patch training, bisection refinement and the main repair loop.

Each anchor ``x_i`` gets its own patch and a growing set of sub-boxes of
``B(x_i, r)``. Every iteration trains the unrepaired patches for a few
gradient steps on the summed violation loss of their sub-boxes, then bisects
the worst offenders along the dimension with the largest gradient-times-width
score.

In feature mode the properties live in the activation space of a split layer,
over boxes spanned by attack samples; the loss is left unclipped and the loop
always runs to the iteration limit, so there is no provable claim.
"""
from __future__ import annotations

import enum
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .attacks import AttackConfig, collect_samples
from .deeppoly import BoxRegion
from .netcore import Dnn, classify, default_split_layer, forward, split
from .patched import RegionEntry, RepairedDnn
from .viloss import (BaseBoundCache, BaseForms, LabelMismatchError, LossMode, LossValue, PatchModule,
                     composite_bounds, loss_gradient, violation_loss)

log = logging.getLogger(__name__)

BoundProvider = Callable[[BoxRegion, int], BaseForms]


class Mode(str, enum.Enum):
    PROVABLE = "provable"
    FEATURE = "feature"


class DivergenceError(RuntimeError):
    def __init__(self, patch_index: Optional[int], message: str):
        super().__init__(message)
        self.patch_index = patch_index


class RefinementExhausted(ValueError):
    """The box has zero width in every dimension and cannot be bisected."""


@dataclass(frozen=True)
class Anchor:
    x: np.ndarray
    label: Optional[int] = None
    adversarial: Optional[np.ndarray] = None


@dataclass(frozen=True, eq=False)
class RobustnessProperty:
    box: BoxRegion
    label: int
    origin: int
    depth: int = 0

    def sort_key(self):
        return (self.origin, self.depth, tuple(self.box.lower))


@dataclass(frozen=True, eq=False)
class FeatureBox:
    box: BoxRegion
    sample_count: int


_ALIASES = {"M": "max_iterations", "R": "max_epochs", "eta": "learning_rate", "K": "slice_k"}


@dataclass
class RepairConfig:
    max_iterations: int = 25
    max_epochs: int = 10
    learning_rate: float = 10.0
    slice_k: int = 800
    mode: Mode = Mode.PROVABLE
    split_layer: Optional[int] = None
    patch_hidden: tuple[int, ...] = ()
    patch_init: float = 0.0
    patch_bias: bool = True
    attack: Optional[AttackConfig] = None
    seed: int = 0
    eps_verify: float = 1e-9
    max_depth: int = 30
    grad_clip: Optional[float] = None
    jobs: int = 1
    trace_weights: bool = False

    def __post_init__(self):
        self.mode = Mode(self.mode)
        self.patch_hidden = tuple(self.patch_hidden)
        if min(self.max_iterations, self.max_epochs, self.slice_k) < 1:
            raise ValueError("M, R and K must be at least 1")
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")

    @property
    def loss_mode(self) -> LossMode:
        return LossMode.CLIPPED if self.mode is Mode.PROVABLE else LossMode.UNCLIPPED

    @classmethod
    def from_dict(cls, doc: dict) -> "RepairConfig":
        doc = {_ALIASES.get(k, k): v for k, v in doc.items()}
        if isinstance(doc.get("attack"), dict):
            att = dict(doc["attack"])
            if att.get("domain") is not None:
                att["domain"] = tuple(att["domain"])
            doc["attack"] = AttackConfig(**att)
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown repair config keys: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        d["patch_hidden"] = list(self.patch_hidden)
        return d


@dataclass
class TrainOutcome:
    patch: PatchModule
    refine: list[tuple[RobustnessProperty, LossValue]]
    repaired: bool
    steps: int
    losses: list[float]
    final: list[LossValue]
    trace: list[dict] = field(default_factory=list)


def _as_provider(base) -> BoundProvider:
    return BaseBoundCache(base) if isinstance(base, Dnn) else base


def _evaluate(provider: BoundProvider, patch: PatchModule, U, mode: LossMode):
    bounds = [composite_bounds(provider(p.box, p.label), patch, p.box, p.label) for p in U]
    values = [violation_loss(b, p.box, mode) for b, p in zip(bounds, U)]
    total = float(sum(v.total for v in values))
    return bounds, values, total


def train_patch(base, patch: PatchModule, U: Sequence[RobustnessProperty], cfg: RepairConfig,
                *, patch_index: Optional[int] = None) -> TrainOutcome:
    """Up to ``R`` gradient steps on the summed loss of ``U``.

    ``base`` is the frozen base branch, either a network or a callable
    returning its :class:`BaseForms` for a (box, label) pair. In provable mode
    training stops as soon as every class term of every property is at most
    ``-eps_verify``; this is also checked before the first step.
    """
    U = list(U)
    labels = {p.label for p in U}
    if len(labels) != 1:
        raise LabelMismatchError(f"a patch must be trained on one label, got {sorted(labels)}")
    provider = _as_provider(base)
    mode = cfg.loss_mode
    provable = cfg.mode is Mode.PROVABLE
    margin = cfg.eps_verify if provable else 0.0

    def check(total):
        if not np.isfinite(total):
            raise DivergenceError(patch_index, f"loss or weights became {total} for patch {patch_index}; "
                                               f"the learning rate is probably too large")

    bounds, values, total = _evaluate(provider, patch, U, mode)
    check(total)
    losses, trace = [total], []
    if provable and all(v.verified(cfg.eps_verify) for v in values):
        return TrainOutcome(patch, [], True, 0, losses, values)
    steps = 0
    for epoch in range(cfg.max_epochs):
        grads = None
        for b, p, v in zip(bounds, U, values):
            g = loss_gradient(b, p.box, patch, mode, v, margin=margin)
            grads = g if grads is None else [(a + c, d + e) for (a, d), (c, e) in zip(grads, g)]
        if cfg.grad_clip is not None:
            norm = np.sqrt(sum(np.sum(dw**2) + np.sum(db**2) for dw, db in grads))
            if norm > cfg.grad_clip:
                grads = [(dw * (cfg.grad_clip / norm), db * (cfg.grad_clip / norm)) for dw, db in grads]
        eta = cfg.learning_rate
        with np.errstate(over="ignore", invalid="ignore"):
            new = [(w - eta * dw, b - eta * db) for (w, b), (dw, db) in zip(patch.parameters(), grads)]
        if not all(np.all(np.isfinite(w)) and np.all(np.isfinite(b)) for w, b in new):
            check(float("nan"))
        patch = patch.with_parameters(new)
        steps += 1
        bounds, values, total = _evaluate(provider, patch, U, mode)
        check(total)
        losses.append(total)
        if cfg.trace_weights:
            trace.append({"epoch": epoch + 1, "loss": total,
                          "weights": [[w.tolist(), b.tolist()] for w, b in patch.parameters()]})
        if provable and all(v.verified(cfg.eps_verify) for v in values):
            return TrainOutcome(patch, [], True, steps, losses, values, trace)
    if provable:
        pending = [(p, v) for p, v in zip(U, values) if not v.verified(cfg.eps_verify)]
    else:
        pending = [(p, v) for p, v in zip(U, values) if v.total > 0]
    pending.sort(key=lambda pv: (-pv[1].total, pv[0].sort_key()))
    return TrainOutcome(patch, pending[:cfg.slice_k], False, steps, losses, values, trace)


def bisection_dimension(prop: RobustnessProperty, loss: LossValue, margin: float = 0.0) -> int:
    """``argmax_d |dL/dx_d| * width_d``; falls back to the widest dimension when all scores vanish."""
    widths = prop.box.widths
    if not np.any(widths > 0):
        raise RefinementExhausted(f"property of origin {prop.origin} has a degenerate box")
    scores = np.abs(loss.input_gradient(margin)) * widths
    if np.max(scores) > 0:
        return int(np.argmax(scores))
    return int(np.argmax(widths))


def bisect_property(prop: RobustnessProperty, loss: LossValue,
                    margin: float = 0.0) -> tuple[RobustnessProperty, RobustnessProperty]:
    d = bisection_dimension(prop, loss, margin)
    left, right = prop.box.bisect(d)
    return (RobustnessProperty(left, prop.label, prop.origin, prop.depth + 1),
            RobustnessProperty(right, prop.label, prop.origin, prop.depth + 1))


def sample_feature_box(base: Dnn, l: int, box: BoxRegion, label: int, attack: AttackConfig,
                       extra=()) -> FeatureBox:
    """Hull of the split-layer activations of attack samples drawn in ``box``."""
    sp = split(base, l)
    pts = collect_samples(base, box.center, label, attack, extra=extra, region=box)
    return FeatureBox(BoxRegion.hull(forward(sp.prefix, pts)), len(pts))


@dataclass
class RepairReport:
    mode: str
    provable: Optional[bool]
    iterations: int
    config: dict
    anchors: list[dict]
    history: list[dict]
    properties: list[dict]
    warnings: list[str]
    notes: list[str]
    trace: list[dict] = field(default_factory=list)
    timing: dict = field(default_factory=dict)

    def to_dict(self, include_timing: bool = True) -> dict:
        d = asdict(self)
        if not include_timing:
            d.pop("timing")
            for h in d["history"]:
                h.pop("seconds", None)
        return d


_FEATURE_NOTE = ("feature mode: no early stop inside training, no provable flag, every patch is "
                 "trained in all iterations; properties with positive loss are still bisected")


def _default_attack(radius: float, seed: int) -> AttackConfig:
    return AttackConfig.sampling_budget(radius, seed=seed)


def repair(base: Dnn, anchors: Sequence, radius: float, cfg: Optional[RepairConfig] = None, *,
           base_bounds: Optional[BoundProvider] = None,
           initial_patches: Optional[Sequence[PatchModule]] = None) -> tuple[RepairedDnn, RepairReport]:
    """Repair local robustness of ``base`` on ``B(x_i, radius)`` for every anchor.

    ``base_bounds`` overrides the DeepPoly bounds of the base branch (it
    receives the analysed box and the label); ``initial_patches`` overrides
    the patch initialisation.
    """
    cfg = cfg or RepairConfig()
    if not anchors:
        raise ValueError("repair needs at least one anchor")
    if not radius > 0:
        raise ValueError("radius must be positive")
    anchors = [a if isinstance(a, Anchor) else Anchor(np.asarray(a, dtype=np.float64)) for a in anchors]
    t_start = time.perf_counter()
    timing = {"sampling": 0.0, "training": 0.0, "refinement": 0.0}
    warnings: list[str] = []
    notes: list[str] = []
    n = len(anchors)
    labels = []
    for i, a in enumerate(anchors):
        x = np.asarray(a.x, dtype=np.float64)
        if x.shape != (base.input_dim,):
            raise ValueError(f"anchor {i} has shape {x.shape}, network expects ({base.input_dim},)")
        pred = classify(base, x)
        if a.label is not None and a.label != pred:
            warnings.append(f"anchor {i}: base network predicts {pred} but the label is {a.label}")
        labels.append(pred if a.label is None else int(a.label))
    input_boxes = [BoxRegion.from_center(a.x, radius) for a in anchors]

    feature = cfg.mode is Mode.FEATURE
    split_layer = None
    if feature:
        split_layer = cfg.split_layer if cfg.split_layer is not None else default_split_layer(base)
        sp = split(base, split_layer)
        provider = base_bounds or BaseBoundCache(sp.suffix)
        patch_in = sp.prefix.output_dim
        attack = cfg.attack or _default_attack(radius, cfg.seed)
        t0 = time.perf_counter()
        D = {}
        for i, a in enumerate(anchors):
            extra = () if a.adversarial is None else (a.adversarial,)
            fb = sample_feature_box(base, split_layer, input_boxes[i], labels[i], attack, extra)
            D[i] = [RobustnessProperty(fb.box, labels[i], i)]
        timing["sampling"] = time.perf_counter() - t0
        notes.append(_FEATURE_NOTE)
    else:
        provider = base_bounds or BaseBoundCache(base)
        patch_in = base.input_dim
        D = {i: [RobustnessProperty(input_boxes[i], labels[i], i)] for i in range(n)}

    if initial_patches is not None:
        patches = list(initial_patches)
    elif cfg.patch_hidden:
        patches = [PatchModule.mlp(patch_in, cfg.patch_hidden, base.output_dim,
                                   np.random.default_rng([cfg.seed, i]), cfg.patch_init,
                                   feature_layer=split_layer, use_bias=cfg.patch_bias) for i in range(n)]
    else:
        patches = [PatchModule.affine(patch_in, base.output_dim, cfg.patch_init,
                                      feature_layer=split_layer, use_bias=cfg.patch_bias) for _ in range(n)]

    E = list(range(n))
    history, trace = [], []
    unresolvable: set[tuple] = set()
    margin = cfg.eps_verify if not feature else 0.0
    iteration = 0
    pool = ThreadPoolExecutor(cfg.jobs) if cfg.jobs > 1 else None
    try:
        while iteration < cfg.max_iterations:
            iteration += 1
            t_it = time.perf_counter()
            jobs = list(E)

            def run(j):
                return train_patch(provider, patches[j], D[j], cfg, patch_index=j)

            t0 = time.perf_counter()
            outcomes = list(pool.map(run, jobs)) if pool else [run(j) for j in jobs]
            timing["training"] += time.perf_counter() - t0
            t0 = time.perf_counter()
            record = {"iteration": iteration, "loss": {}, "steps": {}, "leaves": {}, "refined": {}}
            for j, out in zip(jobs, outcomes):
                patches[j] = out.patch
                record["loss"][j] = out.losses[-1]
                record["steps"][j] = out.steps
                if cfg.trace_weights:
                    trace += [dict(t, iteration=iteration, patch=j) for t in out.trace]
                if out.repaired and not feature:
                    E.remove(j)
                    continue
                refined = 0
                for prop, lv in out.refine:
                    if prop.depth >= cfg.max_depth:
                        unresolvable.add((j, prop.sort_key()))
                        continue
                    try:
                        kids = bisect_property(prop, lv, margin)
                    except RefinementExhausted:
                        unresolvable.add((j, prop.sort_key()))
                        continue
                    idx = D[j].index(prop)
                    D[j][idx:idx + 1] = list(kids)
                    refined += 1
                record["refined"][j] = refined
            record["leaves"] = {i: len(D[i]) for i in range(n)}
            record["unrepaired"] = list(E)
            timing["refinement"] += time.perf_counter() - t0
            record["seconds"] = time.perf_counter() - t_it
            history.append(record)
            log.info("iteration %d: %d unrepaired, total loss %.6g", iteration, len(E),
                     sum(record["loss"].values()))
            if not feature and not E:
                break
    finally:
        if pool:
            pool.shutdown()

    props_out = []
    for i in range(n):
        _, values, _ = _evaluate(provider, patches[i], D[i], cfg.loss_mode)
        for p, v in sorted(zip(D[i], values), key=lambda pv: pv[0].sort_key()):
            entry = {"origin": i, "depth": p.depth, "lower": p.box.lower.tolist(), "upper": p.box.upper.tolist(),
                     "loss": v.total, "max_term": float(np.max(v.terms))}
            if not feature:
                entry["status"] = "repaired" if v.verified(cfg.eps_verify) else "violated"
                if (i, p.sort_key()) in unresolvable:
                    entry["status"] = "unresolvable"
            props_out.append(entry)
    anchors_out = []
    for i, a in enumerate(anchors):
        anchors_out.append({"index": i, "label": labels[i], "leaves": len(D[i]),
                            "repaired": None if feature else i not in E})
    timing["total"] = time.perf_counter() - t_start
    cfg_doc = cfg.to_dict()
    report = RepairReport(
        mode=cfg.mode.value,
        provable=None if feature else not E,
        iterations=iteration,
        config=cfg_doc,
        anchors=anchors_out,
        history=history,
        properties=props_out,
        warnings=warnings,
        notes=notes,
        trace=trace,
        timing=timing,
    )
    regions = [RegionEntry(input_boxes[i], np.asarray(anchors[i].x, dtype=np.float64), labels[i], i)
               for i in range(n)]
    F = RepairedDnn(base, regions, patches, radius, split_layer)
    F.properties = {i: list(D[i]) for i in range(n)}
    return F, report
