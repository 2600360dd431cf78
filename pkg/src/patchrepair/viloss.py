"""Safety-violation loss of a patched network and its gradient in the patch weights.

The patched network on a region is the parallel sum ``base + patch``; its
difference bounds are the sums of the two branches' DeepPoly bounds. The
loss of a property is the sum over wrong classes of the (optionally clipped)
box maximum of those summed bounds.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Sequence

import autograd.numpy as anp
import numpy as np
from autograd import grad

from . import deeppoly
from .deeppoly import BoxRegion, LinearForm
from .netcore import Affine, Dnn, Relu, ShapeError


class LossMode(str, enum.Enum):
    CLIPPED = "clipped"
    UNCLIPPED = "unclipped"


class LabelMismatchError(ValueError):
    """Properties trained by one patch must share their label."""


@dataclass(frozen=True)
class PatchModule:
    """A fully connected network whose output is added to the base output.

    ``feature_layer`` is ``None`` for input-space patches, otherwise the split
    layer whose activations the patch reads. With ``use_bias=False`` the bias
    stays at zero and receives no gradient.
    """

    net: Dnn
    feature_layer: Optional[int] = None
    use_bias: bool = True

    def __post_init__(self):
        layers = self.net.layers
        for k, layer in enumerate(layers):
            want = Affine if k % 2 == 0 else Relu
            if not isinstance(layer, want):
                raise ShapeError("patch networks must alternate affine and ReLU layers")

    @classmethod
    def affine(cls, in_dim: int, out_dim: int, init: float = 0.0, *,
               feature_layer: Optional[int] = None, use_bias: bool = True) -> "PatchModule":
        w = np.full((out_dim, in_dim), float(init))
        b = np.full(out_dim, float(init) if use_bias else 0.0)
        return cls(Dnn([Affine(w, b)]), feature_layer, use_bias)

    @classmethod
    def mlp(cls, in_dim: int, hidden: Sequence[int], out_dim: int, rng: np.random.Generator,
            init: float = 0.0, *, feature_layer: Optional[int] = None,
            use_bias: bool = True) -> "PatchModule":
        """Hidden layers drawn uniformly in ``±1/sqrt(fan_in)``; output layer filled with ``init``."""
        dims = [in_dim, *hidden]
        weights, biases = [], []
        for a, b in zip(dims[:-1], dims[1:]):
            bound = 1.0 / np.sqrt(a)
            weights.append(rng.uniform(-bound, bound, size=(b, a)))
            biases.append(rng.uniform(-bound, bound, size=b) if use_bias else np.zeros(b))
        weights.append(np.full((out_dim, dims[-1]), float(init)))
        biases.append(np.full(out_dim, float(init) if use_bias else 0.0))
        return cls(Dnn.from_arrays(weights, biases), feature_layer, use_bias)

    @property
    def is_affine(self) -> bool:
        return len(self.net.layers) == 1

    @property
    def input_dim(self) -> int:
        return self.net.input_dim

    @property
    def output_dim(self) -> int:
        return self.net.output_dim

    def parameters(self):
        return self.net.parameters()

    def with_parameters(self, params) -> "PatchModule":
        if not self.use_bias:
            params = [(w, np.zeros_like(b)) for w, b in params]
        return PatchModule(self.net.with_parameters(params), self.feature_layer, self.use_bias)

    def __call__(self, z) -> np.ndarray:
        return self.net.forward(z)


@dataclass(frozen=True, eq=False)
class BaseForms:
    """Difference upper bounds of the frozen base branch: one row per class in ``classes``."""

    label: int
    classes: tuple[int, ...]
    coeffs: np.ndarray
    offsets: np.ndarray

    @classmethod
    def from_forms(cls, label: int, forms: dict[int, LinearForm]) -> "BaseForms":
        classes = tuple(sorted(forms))
        return cls(label, classes,
                   np.array([forms[l].coeffs for l in classes]),
                   np.array([forms[l].offset for l in classes]))


def base_forms(net: Dnn, box: BoxRegion, label: int) -> BaseForms:
    classes, A, c = deeppoly.diff_upper_matrix(deeppoly.analyze(net, box), label)
    return BaseForms(label, tuple(classes), A, c)


class BaseBoundCache:
    """DeepPoly bounds of the base branch, computed once per (box, label)."""

    def __init__(self, net: Dnn):
        self.net = net
        self._store: dict = {}
        self.misses = 0

    def __call__(self, box: BoxRegion, label: int) -> BaseForms:
        key = (box.key(), label)
        hit = self._store.get(key)
        if hit is None:
            self.misses += 1
            hit = self._store[key] = base_forms(self.net, box, label)
        return hit

    def __len__(self):
        return len(self._store)


@dataclass(frozen=True, eq=False)
class CompositeBound:
    label: int
    classes: tuple[int, ...]
    base_coeffs: np.ndarray
    base_offsets: np.ndarray
    patch_coeffs: np.ndarray
    patch_offsets: np.ndarray

    @property
    def total_coeffs(self) -> np.ndarray:
        return self.base_coeffs + self.patch_coeffs

    @property
    def total_offsets(self) -> np.ndarray:
        return self.base_offsets + self.patch_offsets

    def _form(self, A, c, l) -> LinearForm:
        i = self.classes.index(l)
        return LinearForm(A[i], c[i])

    def base_form(self, l: int) -> LinearForm:
        return self._form(self.base_coeffs, self.base_offsets, l)

    def patch_form(self, l: int) -> LinearForm:
        return self._form(self.patch_coeffs, self.patch_offsets, l)

    def total_form(self, l: int) -> LinearForm:
        return self._form(self.total_coeffs, self.total_offsets, l)


@dataclass(frozen=True, eq=False)
class LossValue:
    mode: LossMode
    total: float
    terms: np.ndarray
    classes: tuple[int, ...]
    corners: np.ndarray
    coeffs: np.ndarray

    @property
    def per_class(self) -> dict[int, float]:
        return {l: float(t) for l, t in zip(self.classes, self.terms)}

    @property
    def active_set(self) -> frozenset[int]:
        return frozenset(l for l, t in zip(self.classes, self.terms) if t > 0)

    @property
    def corner(self) -> dict[int, np.ndarray]:
        return {l: self.corners[i] for i, l in enumerate(self.classes)}

    def verified(self, eps: float) -> bool:
        return bool(np.all(self.terms <= -eps))

    def term_weights(self, margin: float = 0.0) -> np.ndarray:
        """1 for classes that contribute gradient, 0 on the flat side of the hinge."""
        if self.mode is LossMode.CLIPPED:
            return (self.terms > -margin).astype(np.float64)
        return np.ones_like(self.terms)

    def input_gradient(self, margin: float = 0.0) -> np.ndarray:
        """Gradient of the loss in the analysed space at the maximising corners."""
        return self.term_weights(margin) @ self.coeffs


def patch_forms(patch: PatchModule, box: BoxRegion, label: int):
    """Difference bounds of the patch branch alone: (classes, coeffs, offsets)."""
    if patch.is_affine:
        W, b = patch.parameters()[0]
        classes, C = deeppoly.difference_rows(patch.output_dim, label)
        return tuple(classes), C @ W, C @ b
    classes, A, c = deeppoly.diff_upper_matrix(deeppoly.analyze(patch.net, box), label)
    return tuple(classes), A, c


def composite_bounds(base, patch: PatchModule, box: BoxRegion, label: int) -> CompositeBound:
    """Bounds of ``(base + patch)_l - (base + patch)_label`` on ``box``.

    ``base`` is either the base network or precomputed :class:`BaseForms`.
    """
    if box.dim != patch.input_dim:
        raise ShapeError(f"box has dimension {box.dim}, patch expects {patch.input_dim}")
    bf = base if isinstance(base, BaseForms) else base_forms(base, box, label)
    if bf.label != label:
        raise ValueError(f"base bounds were computed for label {bf.label}, not {label}")
    if bf.coeffs.shape[1] != box.dim:
        raise ShapeError("base bounds and box live in different spaces")
    classes, A, c = patch_forms(patch, box, label)
    if classes != bf.classes:
        raise ShapeError("base and patch disagree on the number of classes")
    return CompositeBound(label, classes, bf.coeffs, bf.offsets, A, c)


def violation_loss(bounds: CompositeBound, box: BoxRegion, mode: LossMode = LossMode.CLIPPED) -> LossValue:
    A = bounds.total_coeffs
    if A.shape[1] != box.dim:
        raise ShapeError("bounds and box dimensions differ")
    terms, corners = deeppoly.box_max(A, bounds.total_offsets, box)
    mode = LossMode(mode)
    total = float(np.sum(np.maximum(terms, 0.0)) if mode is LossMode.CLIPPED else np.sum(terms))
    return LossValue(mode, total, terms, bounds.classes, corners, A)


def _relaxation(l, u):
    cross = (l < 0) & (u > 0)
    active = l >= 0
    denom = anp.where(cross, u - l, 1.0)
    up_s = anp.where(cross, u / denom, anp.where(active, 1.0, 0.0))
    up_i = anp.where(cross, -u * l / denom, 0.0)
    lam = np.where(np.asarray(getattr(u, "_value", u)) >= -np.asarray(getattr(l, "_value", l)), 1.0, 0.0)
    lo_s = np.where(cross, lam, np.where(active, 1.0, 0.0))
    lo_i = np.zeros(np.shape(lo_s))
    return lo_s, lo_i, up_s, up_i


def _deep_terms(params, box: BoxRegion, C, base_A, base_c):
    """Differentiable DeepPoly box maxima of ``base + patch`` difference bounds."""
    lo, hi = box.lower, box.upper
    relax = []

    def backsub(A, c, k, upper):
        for j in range(k, -1, -1):
            W, b = params[j]
            c = c + anp.dot(A, b)
            A = anp.dot(A, W)
            if j > 0:
                ls, li, us, ui = relax[j - 1]
                pos, neg = anp.maximum(A, 0.0), anp.minimum(A, 0.0)
                if upper:
                    c = c + anp.dot(pos, ui) + anp.dot(neg, li)
                    A = pos * us + neg * ls
                else:
                    c = c + anp.dot(pos, li) + anp.dot(neg, ui)
                    A = pos * ls + neg * us
        return A, c

    def extremes(A, c):
        upper = anp.dot(anp.maximum(A, 0.0), hi) + anp.dot(anp.minimum(A, 0.0), lo) + c
        lower = anp.dot(anp.maximum(A, 0.0), lo) + anp.dot(anp.minimum(A, 0.0), hi) + c
        return lower, upper

    for k in range(len(params) - 1):
        n = params[k][1].shape[0]
        eye, zero = np.eye(n), np.zeros(n)
        Au, cu = backsub(eye, zero, k, True)
        Al, cl = backsub(eye, zero, k, False)
        _, u = extremes(Au, cu)
        l, _ = extremes(Al, cl)
        relax.append(_relaxation(l, u))
    A, c = backsub(C, np.zeros(C.shape[0]), len(params) - 1, True)
    A = A + base_A
    c = c + base_c
    return anp.sum(anp.maximum(A, 0.0) * hi + anp.minimum(A, 0.0) * lo, axis=1) + c


def deep_patch_terms(bounds: CompositeBound, box: BoxRegion, patch: PatchModule) -> np.ndarray:
    """Per-class box maxima through the differentiable path (value only)."""
    _, C = deeppoly.difference_rows(patch.output_dim, bounds.label)
    return np.asarray(_deep_terms(patch.parameters(), box, C, bounds.base_coeffs, bounds.base_offsets))


def loss_gradient(bounds: CompositeBound, box: BoxRegion, patch: PatchModule,
                  mode: LossMode = LossMode.CLIPPED, loss: Optional[LossValue] = None,
                  margin: float = 0.0):
    """Subgradient of the property loss in the patch parameters, as ``[(dW, db), ...]``.

    For an affine patch the gradient is read off the maximising corners. For
    deeper patches reverse mode runs through the whole relaxation, including
    the slopes' dependence on intermediate bounds. With ``margin > 0`` a
    clipped term keeps its gradient until it drops below ``-margin``.
    """
    mode = LossMode(mode)
    if loss is None:
        loss = violation_loss(bounds, box, mode)
    label = bounds.label
    if patch.is_affine:
        W, _ = patch.parameters()[0]
        weights = loss.term_weights(margin)
        dW = np.zeros_like(W)
        db = np.zeros(W.shape[0])
        rows = np.array(bounds.classes)
        dW[rows] += weights[:, None] * loss.corners
        dW[label] -= weights @ loss.corners
        db[rows] += weights
        db[label] -= weights.sum()
        grads = [(dW, db)]
    else:
        _, C = deeppoly.difference_rows(patch.output_dim, label)

        def objective(params):
            terms = _deep_terms(params, box, C, bounds.base_coeffs, bounds.base_offsets)
            if mode is LossMode.CLIPPED:
                return anp.sum(anp.maximum(terms + margin, 0.0))
            return anp.sum(terms)

        raw = grad(objective)([(np.array(w), np.array(b)) for w, b in patch.parameters()])
        grads = [(np.asarray(dw), np.asarray(db)) for dw, db in raw]
    if not patch.use_bias:
        grads = [(dw, np.zeros_like(db)) for dw, db in grads]
    return grads


def conjunction_loss(properties: Sequence[tuple[CompositeBound, BoxRegion]],
                     mode: LossMode = LossMode.CLIPPED) -> tuple[float, list[LossValue]]:
    """Sum of property losses; all properties must share one label."""
    labels = {b.label for b, _ in properties}
    if len(labels) > 1:
        raise LabelMismatchError(f"properties of one patch carry different labels: {sorted(labels)}")
    values = [violation_loss(b, box, mode) for b, box in properties]
    return float(sum(v.total for v in values)), values
