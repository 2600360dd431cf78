"""Repair metrics, generalization sets and dataset loading.

All rates are percentages. Attack-based rates use restarted PGD as the
attack oracle; the budget is stamped into every report.
"""
from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .attacks import AttackConfig, pgd
from .fileio import ParseError
from .netcore import Dnn

CSV_COLUMNS = ("model", "r", "n", "rsr", "rgr", "dd", "dsr", "dgsr", "time_s")
ATTACK_NOTE = "defense rates use restarted PGD as the attack oracle, not an ensemble attack"


@dataclass
class LabeledDataset:
    inputs: np.ndarray
    labels: np.ndarray
    name: str = ""

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or len(self.inputs) != len(self.labels):
            raise ValueError("inputs must be (n, d) with one label per row")
        if len(self.labels) and self.labels.min() < 0:
            raise ValueError("labels must be non-negative class indices")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.inputs[idx], self.labels[idx], self.name)


@dataclass
class Rate:
    """A counted percentage; ``value`` is None when the denominator is empty."""

    hits: int
    total: int

    @property
    def value(self) -> Optional[float]:
        return None if self.total == 0 else 100.0 * self.hits / self.total

    def to_dict(self) -> dict:
        return {"value": self.value, "hits": self.hits, "total": self.total}


def _classify(net, x, register: bool) -> int:
    if hasattr(net, "evaluate"):
        return int(np.argmax(net.evaluate(x, register=register)))
    return int(np.argmax(net.forward(x)))


def compute_rsr(F, base: Dnn, pairs: Sequence[tuple[np.ndarray, np.ndarray]], *, register: bool = False) -> Rate:
    """Share of adversarial anchors ``x*`` that ``F`` now maps to ``C_N(x)``."""
    if not pairs:
        raise ValueError("RSR needs at least one (x, x*) pair")
    hits = sum(_classify(F, xs, register) == base.classify(x) for x, xs in pairs)
    return Rate(int(hits), len(pairs))


@dataclass
class GeneralizationSet:
    points: np.ndarray
    labels: np.ndarray
    origins: np.ndarray
    shortfall: dict[int, int] = field(default_factory=dict)


def generalization_set(base: Dnn, anchors: Sequence[np.ndarray], labels: Sequence[int], radius: float,
                       cfg: Optional[AttackConfig] = None, *, per_anchor: int = 10,
                       exclude: Sequence[Optional[np.ndarray]] = (), max_seeds: int = 40) -> GeneralizationSet:
    """Up to ``per_anchor`` distinct adversarial examples of ``base`` per anchor box.

    Each attempt runs PGD with a different seed; points equal to the anchor's
    own adversarial example (``exclude``) or already collected are dropped.
    Missing examples are recorded in ``shortfall``, never padded.
    """
    cfg = cfg or AttackConfig.sampling_budget(radius)
    exclude = list(exclude) + [None] * (len(anchors) - len(exclude))
    pts, labs, origins, shortfall = [], [], [], {}
    for i, (x, lab) in enumerate(zip(anchors, labels)):
        found: list[np.ndarray] = []
        for s in range(max_seeds):
            if len(found) == per_anchor:
                break
            c = AttackConfig(radius, cfg.step_size, cfg.steps, cfg.restarts, seed=cfg.seed * 1_000 + s + 1,
                             target=cfg.target, domain=cfg.domain)
            res = pgd(base, x, int(lab), c)
            if not res.success:
                continue
            p = res.adversarial
            if exclude[i] is not None and np.array_equal(p, exclude[i]):
                continue
            if any(np.array_equal(p, q) for q in found):
                continue
            found.append(p)
        if len(found) < per_anchor:
            shortfall[i] = per_anchor - len(found)
        pts += found
        labs += [int(lab)] * len(found)
        origins += [i] * len(found)
    dim = len(anchors[0]) if len(anchors) else 0
    return GeneralizationSet(np.array(pts).reshape(-1, dim), np.array(labs, dtype=np.int64),
                             np.array(origins, dtype=np.int64), shortfall)


def compute_rgr(F, gen: GeneralizationSet, *, register: bool = False) -> Rate:
    hits = sum(_classify(F, x, register) == y for x, y in zip(gen.points, gen.labels))
    return Rate(int(hits), len(gen.labels))


@dataclass
class Drawdown:
    dd: Optional[float]
    fdd: float
    base_correct: Optional[int]
    repaired_correct: Optional[int]
    flips: int
    total: int


def compute_drawdown(F, base: Dnn, inputs, labels=None, *, register: bool = True) -> Drawdown:
    """Signed accuracy drawdown (needs labels) and fidelity drawdown, in points."""
    X = np.asarray(inputs, dtype=np.float64)
    n = len(X)
    if n == 0:
        raise ValueError("drawdown needs a non-empty test set")
    yb = np.array([base.classify(x) for x in X])
    yf = np.array([_classify(F, x, register) for x in X])
    flips = int(np.sum(yb != yf))
    if labels is None:
        return Drawdown(None, 100.0 * flips / n, None, None, flips, n)
    labels = np.asarray(labels)
    cb, cf = int(np.sum(yb == labels)), int(np.sum(yf == labels))
    return Drawdown(100.0 * (cb - cf) / n, 100.0 * flips / n, cb, cf, flips, n)


def defended(F, x, label: int, cfg: AttackConfig) -> bool:
    return not pgd(F, x, label, cfg).success


def compute_dsr(F, base: Dnn, anchors: Sequence[np.ndarray], cfg: AttackConfig) -> Rate:
    """Anchor boxes in which PGD finds no input that ``F`` maps away from ``C_N(x_i)``."""
    hits = sum(defended(F, x, base.classify(x), cfg) for x in anchors)
    return Rate(int(hits), len(anchors))


def compute_dgsr(F, base: Dnn, inputs, cfg: AttackConfig) -> Rate:
    """As DSR but over boxes around test inputs, compared to ``C_N(x)`` regardless of ground truth."""
    X = np.asarray(inputs, dtype=np.float64).reshape(-1, base.input_dim)
    hits = sum(defended(F, x, base.classify(x), cfg) for x in X)
    return Rate(int(hits), len(X))


@dataclass
class MetricsReport:
    model: str
    radius: float
    n: int
    rsr: Optional[Rate] = None
    rgr: Optional[Rate] = None
    drawdown: Optional[Drawdown] = None
    dsr: Optional[Rate] = None
    dgsr: Optional[Rate] = None
    attack: Optional[dict] = None
    notes: list[str] = field(default_factory=lambda: [ATTACK_NOTE])
    extra: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)

    def to_dict(self, include_timing: bool = True) -> dict:
        d = {"model": self.model, "r": self.radius, "n": self.n, "attack": self.attack, "notes": list(self.notes),
             "extra": self.extra}
        for k in ("rsr", "rgr", "dsr", "dgsr"):
            v = getattr(self, k)
            d[k] = None if v is None else v.to_dict()
        d["drawdown"] = None if self.drawdown is None else asdict(self.drawdown)
        if include_timing:
            d["timing"] = dict(self.timing)
        return d

    def csv_row(self) -> dict:
        def val(r):
            return "" if r is None or r.value is None else f"{r.value:.4f}"
        dd = self.drawdown.dd if self.drawdown is not None else None
        return {"model": self.model, "r": self.radius, "n": self.n, "rsr": val(self.rsr), "rgr": val(self.rgr),
                "dd": "" if dd is None else f"{dd:.4f}", "dsr": val(self.dsr), "dgsr": val(self.dgsr),
                "time_s": f"{self.timing.get('total', 0.0):.3f}"}


def write_json(report: MetricsReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=1))


def csv_text(reports: Sequence[MetricsReport]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in reports:
        w.writerow(r.csv_row())
    return buf.getvalue()


def write_csv(reports: Sequence[MetricsReport], path) -> None:
    Path(path).write_text(csv_text(reports))


# -- datasets ---------------------------------------------------------------

_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def read_idx(path) -> np.ndarray:
    """Parse a big-endian IDX file into an array of its declared shape."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 4:
        raise ParseError(f"{path}: byte 0: file too short for an IDX header")
    zero, code, ndim = raw[0:2], raw[2], raw[3]
    if zero != b"\x00\x00" or code not in _IDX_TYPES:
        raise ParseError(f"{path}: byte 0: bad IDX magic number {raw[:4].hex()}")
    if len(raw) < 4 + 4 * ndim:
        raise ParseError(f"{path}: byte 4: header declares {ndim} dimensions but the file ends early")
    shape = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    dtype = np.dtype(_IDX_TYPES[code])
    offset = 4 + 4 * ndim
    need = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(raw) - offset != need:
        raise ParseError(f"{path}: byte {offset}: shape {shape} needs {need} data bytes, "
                         f"found {len(raw) - offset}")
    return np.frombuffer(raw, dtype=dtype, offset=offset).reshape(shape)


def write_idx(array, path) -> None:
    a = np.asarray(array)
    codes = {np.dtype(v).newbyteorder("="): k for k, v in _IDX_TYPES.items()}
    code = codes.get(a.dtype.newbyteorder("="))
    if code is None:
        raise ValueError(f"dtype {a.dtype} has no IDX type code")
    head = bytes([0, 0, code, a.ndim]) + struct.pack(f">{a.ndim}I", *a.shape)
    Path(path).write_bytes(head + a.astype(_IDX_TYPES[code]).tobytes())


def load_dataset(path, format: str = "csv", *, labels_path=None, header: bool = False,
                 name: Optional[str] = None) -> LabeledDataset:
    """IDX image + label files (pixels scaled by 1/255) or CSV rows ``label, features...``."""
    fmt = format.lower()
    name = name or Path(path).stem
    if fmt == "idx":
        if labels_path is None:
            raise ValueError("IDX datasets need a separate labels file")
        images = read_idx(path)
        labels = read_idx(labels_path)
        if labels.ndim != 1 or len(labels) != len(images):
            raise ParseError(f"{labels_path}: byte 4: {len(labels)} labels for {len(images)} images")
        X = images.reshape(len(images), -1).astype(np.float64)
        if images.dtype == np.uint8:
            X = X / 255.0
        return LabeledDataset(X, labels.astype(np.int64), name)
    if fmt != "csv":
        raise ValueError(f"unknown dataset format {format!r}")
    rows = []
    with open(path, newline="") as fh:
        for n, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if header and not rows and n == 1:
                continue
            try:
                rows.append([float(c) for c in row])
            except ValueError:
                hint = " (pass header=True to skip a header line)" if n == 1 else ""
                raise ParseError(f"{path}:{n}: non-numeric field{hint}") from None
            if len(rows[-1]) != len(rows[0]):
                raise ParseError(f"{path}:{n}: expected {len(rows[0])} fields, found {len(rows[-1])}")
    if not rows:
        raise ParseError(f"{path}: no data rows")
    a = np.array(rows)
    lab = a[:, 0]
    if np.any(lab != np.round(lab)):
        raise ParseError(f"{path}: labels in the first column must be integers")
    return LabeledDataset(a[:, 1:], lab.astype(np.int64), name)
