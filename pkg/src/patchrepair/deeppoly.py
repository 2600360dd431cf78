"""DeepPoly-style bound propagation over axis-aligned boxes.

Every neuron gets a lower and an upper affine bound over the previous layer.
Concrete bounds come from back-substituting those bounds all the way to the
input box. Arithmetic is plain float64 without outward rounding.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .netcore import Affine, Dnn, Relu, ShapeError


def _ro(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class BoxRegion:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo, hi = _ro(self.lower), _ro(self.upper)
        if lo.ndim != 1 or lo.shape != hi.shape:
            raise ShapeError(f"box bounds must be equal-length vectors, got {lo.shape} and {hi.shape}")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError("box bounds must be finite")
        if np.any(lo > hi):
            raise ValueError("box lower bound exceeds upper bound")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def from_center(cls, center, radius: float) -> "BoxRegion":
        """The L-infinity ball ``{x : |x - center|_inf <= radius}``."""
        c = np.asarray(center, dtype=np.float64)
        if radius < 0:
            raise ValueError("radius must be nonnegative")
        return cls(c - radius, c + radius)

    @classmethod
    def hull(cls, points) -> "BoxRegion":
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return cls(pts.min(axis=0), pts.max(axis=0))

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    @property
    def center(self) -> np.ndarray:
        return (self.lower + self.upper) / 2

    @property
    def widths(self) -> np.ndarray:
        return self.upper - self.lower

    @property
    def volume(self) -> float:
        return float(np.prod(self.widths))

    def key(self) -> tuple[bytes, bytes]:
        return self.lower.tobytes(), self.upper.tobytes()

    def __eq__(self, other):
        if not isinstance(other, BoxRegion):
            return NotImplemented
        return self.key() == other.key()

    def __hash__(self):
        return hash(self.key())

    def contains(self, x):
        """Closed membership; vectorised over leading axes."""
        x = np.asarray(x, dtype=np.float64)
        return np.all((x >= self.lower) & (x <= self.upper), axis=-1)

    def clamp(self, x) -> np.ndarray:
        return np.clip(x, self.lower, self.upper)

    def bisect(self, d: int) -> tuple["BoxRegion", "BoxRegion"]:
        mid = (self.lower[d] + self.upper[d]) / 2
        up = self.upper.copy()
        up[d] = mid
        lo = self.lower.copy()
        lo[d] = mid
        return BoxRegion(self.lower, up), BoxRegion(lo, self.upper)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(self.lower, self.upper, size=(n, self.dim))

    def vertices(self) -> np.ndarray:
        if self.dim > 20:
            raise ValueError("refusing to enumerate vertices of a box with more than 20 dimensions")
        bits = (np.arange(2**self.dim)[:, None] >> np.arange(self.dim)) & 1
        return np.where(bits == 1, self.upper, self.lower)


@dataclass(frozen=True, eq=False)
class LinearForm:
    """``coeffs . x + offset``."""

    coeffs: np.ndarray
    offset: float

    def __post_init__(self):
        object.__setattr__(self, "coeffs", _ro(self.coeffs))
        object.__setattr__(self, "offset", float(self.offset))

    def __add__(self, other: "LinearForm") -> "LinearForm":
        if self.coeffs.shape != other.coeffs.shape:
            raise ShapeError("cannot add linear forms over different spaces")
        return LinearForm(self.coeffs + other.coeffs, self.offset + other.offset)

    def __call__(self, x):
        return np.asarray(x, dtype=np.float64) @ self.coeffs + self.offset


@dataclass(frozen=True)
class NeuronAbstraction:
    sym_lower: LinearForm
    sym_upper: LinearForm
    conc_lower: float
    conc_upper: float


@dataclass(frozen=True, eq=False)
class LayerAbstraction:
    """Abstraction of one layer's outputs in terms of that layer's inputs.

    Affine layers keep their exact weights; ReLU layers keep per-neuron
    relaxation slopes and intercepts (diagonal bounds).
    """

    kind: str
    lower: np.ndarray
    upper: np.ndarray
    weights: Optional[np.ndarray] = None
    bias: Optional[np.ndarray] = None
    lower_slope: Optional[np.ndarray] = None
    lower_icpt: Optional[np.ndarray] = None
    upper_slope: Optional[np.ndarray] = None
    upper_icpt: Optional[np.ndarray] = None

    def neuron(self, j: int) -> NeuronAbstraction:
        if self.kind == "affine":
            lo = up = LinearForm(self.weights[j], self.bias[j])
        else:
            e = np.zeros(self.lower.shape[0])
            e[j] = 1.0
            lo = LinearForm(e * self.lower_slope[j], self.lower_icpt[j])
            up = LinearForm(e * self.upper_slope[j], self.upper_icpt[j])
        return NeuronAbstraction(lo, up, float(self.lower[j]), float(self.upper[j]))

    def neurons(self) -> list[NeuronAbstraction]:
        return [self.neuron(j) for j in range(self.lower.shape[0])]


@dataclass
class AnalysisResult:
    net: Dnn
    box: BoxRegion
    layers: list[LayerAbstraction]
    diff_bounds: Optional[dict[int, LinearForm]] = field(default=None)


def relu_relaxation(lower: np.ndarray, upper: np.ndarray):
    """Slopes and intercepts of the ReLU lower and upper linear bounds.

    Crossing neurons get the chord as upper bound and a lower slope of 1 when
    ``u >= -l`` (0 otherwise), which minimises the relaxation area.
    """
    n = lower.shape[0]
    lo_s, lo_i = np.zeros(n), np.zeros(n)
    up_s, up_i = np.zeros(n), np.zeros(n)
    active = lower >= 0
    lo_s[active] = 1.0
    up_s[active] = 1.0
    cross = (lower < 0) & (upper > 0)
    l, u = lower[cross], upper[cross]
    up_s[cross] = u / (u - l)
    up_i[cross] = -u * l / (u - l)
    lo_s[cross] = np.where(u >= -l, 1.0, 0.0)
    return lo_s, lo_i, up_s, up_i


def backsubstitute(layers: Sequence[LayerAbstraction], k: int, A, c, *, upper: bool):
    """Rewrite ``A @ z_k + c`` (``z_k`` = output of layer ``k``) over the input.

    Returns a coefficient matrix and offsets of an upper (or lower) bound.
    """
    A = np.array(A, dtype=np.float64)
    c = np.array(c, dtype=np.float64)
    for j in range(k, -1, -1):
        la = layers[j]
        if la.kind == "affine":
            c = c + A @ la.bias
            A = A @ la.weights
        else:
            pos, neg = np.maximum(A, 0.0), np.minimum(A, 0.0)
            if upper:
                c = c + pos @ la.upper_icpt + neg @ la.lower_icpt
                A = pos * la.upper_slope + neg * la.lower_slope
            else:
                c = c + pos @ la.lower_icpt + neg @ la.upper_icpt
                A = pos * la.lower_slope + neg * la.upper_slope
    return A, c


def box_max(A, c, box: BoxRegion):
    """Row-wise maximum of ``A @ x + c`` over the box, and the maximising corners.

    A zero coefficient takes the upper corner coordinate.
    """
    A = np.asarray(A, dtype=np.float64)
    corner = np.where(A >= 0, box.upper, box.lower)
    return np.sum(A * corner, axis=-1) + c, corner


def box_min(A, c, box: BoxRegion):
    A = np.asarray(A, dtype=np.float64)
    return np.maximum(A, 0.0) @ box.lower + np.minimum(A, 0.0) @ box.upper + c


def affine_box_max(form: LinearForm, box: BoxRegion) -> float:
    """Exact maximum of an affine form over a box (corner formula)."""
    if form.coeffs.shape != (box.dim,):
        raise ShapeError(f"form has {form.coeffs.shape[0]} coefficients, box has dimension {box.dim}")
    a = form.coeffs
    return float(np.maximum(a, 0.0) @ box.upper + np.minimum(a, 0.0) @ box.lower + form.offset)


def analyze(net: Dnn, box: BoxRegion) -> AnalysisResult:
    if box.dim != net.input_dim:
        raise ShapeError(f"box has dimension {box.dim}, network expects {net.input_dim}")
    layers: list[LayerAbstraction] = []
    prev_lo, prev_hi = box.lower, box.upper
    for k, layer in enumerate(net.layers):
        if isinstance(layer, Affine):
            W, b = layer.weights, layer.bias
            if k == 0:
                hi, _ = box_max(W, b, box)
                lo = box_min(W, b, box)
            else:
                Au, cu = backsubstitute(layers, k - 1, W, b, upper=True)
                Al, cl = backsubstitute(layers, k - 1, W, b, upper=False)
                hi, _ = box_max(Au, cu, box)
                lo = box_min(Al, cl, box)
            layers.append(LayerAbstraction("affine", _ro(lo), _ro(hi), weights=W, bias=b))
        else:
            lo_s, lo_i, up_s, up_i = relu_relaxation(prev_lo, prev_hi)
            lo, hi = np.maximum(prev_lo, 0.0), np.maximum(prev_hi, 0.0)
            layers.append(
                LayerAbstraction(
                    "relu", _ro(lo), _ro(hi),
                    lower_slope=lo_s, lower_icpt=lo_i, upper_slope=up_s, upper_icpt=up_i,
                )
            )
        prev_lo, prev_hi = layers[-1].lower, layers[-1].upper
    return AnalysisResult(net, box, layers)


def difference_rows(n_out: int, label: int) -> tuple[list[int], np.ndarray]:
    """Rows ``e_l - e_label`` for every class ``l != label``."""
    if not 0 <= label < n_out:
        raise ValueError(f"label {label} out of range for {n_out} outputs")
    classes = [l for l in range(n_out) if l != label]
    C = np.zeros((len(classes), n_out))
    C[np.arange(len(classes)), classes] = 1.0
    C[:, label] -= 1.0
    return classes, C


def diff_upper_matrix(result: AnalysisResult, label: int):
    """Upper bounds of ``y_l - y_label`` as (classes, coeff matrix, offsets)."""
    classes, C = difference_rows(result.net.output_dim, label)
    A, c = backsubstitute(result.layers, len(result.layers) - 1, C, np.zeros(len(classes)), upper=True)
    return classes, A, c


def output_diff_upper(net: Dnn, box: BoxRegion, label: int,
                      analysis: Optional[AnalysisResult] = None) -> dict[int, LinearForm]:
    """For every ``l != label`` an affine upper bound of ``y_l - y_label`` on the box."""
    result = analysis if analysis is not None else analyze(net, box)
    classes, A, c = diff_upper_matrix(result, label)
    forms = {l: LinearForm(A[i], c[i]) for i, l in enumerate(classes)}
    result.diff_bounds = forms
    return forms


class Verdict(enum.Enum):
    VERIFIED = "verified"
    UNKNOWN = "unknown"

    def __bool__(self) -> bool:
        return self is Verdict.VERIFIED


def verify(net: Dnn, box: BoxRegion, label: int) -> Verdict:
    """Verified iff every difference bound is strictly negative on the box."""
    classes, A, c = diff_upper_matrix(analyze(net, box), label)
    values, _ = box_max(A, c, box)
    return Verdict.VERIFIED if np.all(values < 0) else Verdict.UNKNOWN


def _alternating(net: Dnn) -> list[tuple[np.ndarray, np.ndarray]]:
    """Affine stages with a ReLU between consecutive stages."""
    stages: list[list[np.ndarray]] = []
    pending_relu = True
    for layer in net.layers:
        if isinstance(layer, Relu):
            if not stages:
                stages.append([np.eye(layer.dim), np.zeros(layer.dim)])
            pending_relu = True
            continue
        if pending_relu or not stages:
            stages.append([layer.weights, layer.bias])
        else:
            W, b = stages[-1]
            stages[-1] = [layer.weights @ W, layer.weights @ b + layer.bias]
        pending_relu = False
    return [(W, b) for W, b in stages]


def composite_network(branches: Sequence[Dnn], box: BoxRegion) -> Dnn:
    """A single network computing ``sum(branch(x))`` exactly for ``x`` in ``box``.

    Shallower branches are delayed by carrying the input through ReLUs shifted
    to stay positive on the box. Those ReLUs are stably active, so the
    analysis of the result equals the sum of the per-branch analyses.
    """
    n_in, n_out = branches[0].input_dim, branches[0].output_dim
    for br in branches:
        if br.input_dim != n_in or br.output_dim != n_out:
            raise ShapeError("all branches must share input and output dimensions")
        if br.input_dim != box.dim:
            raise ShapeError("box dimension does not match the branches")
    shift = 1.0 - box.lower
    staged = []
    depth = max(len(_alternating(br)) for br in branches)
    for br in branches:
        st = _alternating(br)
        delay = depth - len(st)
        if delay:
            pad = [(np.eye(n_in), shift)] + [(np.eye(n_in), np.zeros(n_in))] * (delay - 1)
            W0, b0 = st[0]
            st = pad + [(W0, b0 - W0 @ shift)] + st[1:]
        staged.append(st)
    if depth == 1:
        return Dnn([Affine(sum(st[0][0] for st in staged), sum(st[0][1] for st in staged))])
    layers = []
    for s in range(depth):
        Ws = [st[s][0] for st in staged]
        bs = [st[s][1] for st in staged]
        if s == 0:
            W, b = np.vstack(Ws), np.concatenate(bs)
        elif s == depth - 1:
            W, b = np.hstack(Ws), np.sum(bs, axis=0)
        else:
            W = np.zeros((sum(w.shape[0] for w in Ws), sum(w.shape[1] for w in Ws)))
            r = col = 0
            for w in Ws:
                W[r:r + w.shape[0], col:col + w.shape[1]] = w
                r, col = r + w.shape[0], col + w.shape[1]
            b = np.concatenate(bs)
        layers.append(Affine(W, b))
        if s < depth - 1:
            layers.append(Relu(W.shape[0]))
    return Dnn(layers)


def verify_composite(branches: Sequence[Dnn], box: BoxRegion, label: int) -> Verdict:
    """Fresh verification of ``sum(branches)`` on ``box`` through one merged network."""
    return verify(composite_network(branches, box), box, label)
