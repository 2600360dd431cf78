"""The repaired network: base network, repair regions, patches and allocation.

Inside the repair regions the patches whose regions contain the input are
added to the base output. Elsewhere an input borrows the patches of every
anchor the base network classifies the same way, and that choice is cached
for the whole radius-``r`` ball around the input.
"""
from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .deeppoly import BoxRegion
from .fileio import ParseError, network_from_dict, network_to_dict
from .netcore import Dnn, ShapeError, forward, input_gradient, split
from .viloss import PatchModule

log = logging.getLogger(__name__)

BUNDLE_VERSION = 1


@dataclass(frozen=True, eq=False)
class RegionEntry:
    box: BoxRegion
    anchor: np.ndarray
    label: int
    patch_index: int


class AllocationCache:
    """FIFO-bounded list of (ball, patch set) pairs; first containing ball wins."""

    def __init__(self, maxsize: int = 100_000):
        self.maxsize = maxsize
        self._entries: deque = deque(maxlen=maxsize)
        self._stacked = None

    def __len__(self):
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries)

    def clear(self):
        self._entries.clear()
        self._stacked = None

    def add(self, box: BoxRegion, patches: frozenset):
        self._entries.append((box, frozenset(patches)))
        self._stacked = None

    def lookup(self, x) -> Optional[frozenset]:
        if not self._entries:
            return None
        if self._stacked is None:
            self._stacked = (np.array([b.lower for b, _ in self._entries]),
                             np.array([b.upper for b, _ in self._entries]))
        lo, hi = self._stacked
        hits = np.flatnonzero(np.all((x >= lo) & (x <= hi), axis=1))
        return self._entries[hits[0]][1] if hits.size else None


class RepairedDnn:
    def __init__(self, base: Dnn, regions: Sequence[RegionEntry], patches: Sequence[PatchModule],
                 radius: float, split_layer: Optional[int] = None, *,
                 use_cache: bool = True, cache_size: int = 100_000):
        if len(regions) != len(patches):
            raise ValueError("need exactly one patch per region")
        self.base = base
        self.regions = list(regions)
        self.patches = list(patches)
        self.radius = float(radius)
        self.split_layer = split_layer
        self.split = split(base, split_layer) if split_layer is not None else None
        feat_dim = self.split.prefix.output_dim if self.split else base.input_dim
        for i, p in enumerate(self.patches):
            if p.input_dim != feat_dim or p.output_dim != base.output_dim:
                raise ShapeError(f"patch {i} maps {p.input_dim}->{p.output_dim}, "
                                 f"expected {feat_dim}->{base.output_dim}")
        self.use_cache = use_cache
        self.cache = AllocationCache(cache_size)
        self.allocations = 0
        if self.regions:
            self._lo = np.array([r.box.lower for r in self.regions])
            self._hi = np.array([r.box.upper for r in self.regions])
            self._anchor_pred = np.array([base.classify(r.anchor) for r in self.regions])
        else:
            self._lo = self._hi = np.zeros((0, base.input_dim))
            self._anchor_pred = np.zeros(0, dtype=int)

    @property
    def input_dim(self) -> int:
        return self.base.input_dim

    @property
    def output_dim(self) -> int:
        return self.base.output_dim

    def _vec(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.input_dim,):
            raise ShapeError(f"expected an input of length {self.input_dim}, got shape {x.shape}")
        return x

    def indicator(self, x) -> np.ndarray:
        x = self._vec(x)
        return np.all((x >= self._lo) & (x <= self._hi), axis=1)

    def allocate(self, x, register: bool = True) -> frozenset:
        """Patch indices for an input outside every repair region."""
        x = self._vec(x)
        if self.use_cache:
            hit = self.cache.lookup(x)
            if hit is not None:
                return hit
        pred = self.base.classify(x)
        chosen = frozenset(int(i) for i in np.flatnonzero(self._anchor_pred == pred))
        if register and self.use_cache:
            self.cache.add(BoxRegion.from_center(x, self.radius), chosen)
            self.allocations += 1
        return chosen

    def active_patches(self, x, register: bool = True) -> tuple[list[int], str]:
        bits = self.indicator(x)
        if bits.any():
            return [int(i) for i in np.flatnonzero(bits)], "region"
        return sorted(self.allocate(x, register)), "allocated"

    def patch_input(self, x) -> np.ndarray:
        return self.split.feature(x) if self.split else x

    def evaluate(self, x, register: bool = True) -> np.ndarray:
        x = self._vec(x)
        out = forward(self.base, x)
        idx, _ = self.active_patches(x, register)
        if idx:
            z = self.patch_input(x)
            for i in idx:
                out = out + self.patches[i](z)
        return out

    def forward(self, x) -> np.ndarray:
        """Evaluation that never registers new cache entries (used by attacks)."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            return np.array([self.evaluate(row, register=False) for row in x])
        return self.evaluate(x, register=False)

    __call__ = forward

    def classify(self, x, register: bool = True) -> int:
        return int(np.argmax(self.evaluate(x, register)))

    def input_gradient(self, x, objective) -> np.ndarray:
        """Gradient of ``objective . F(x)`` with the patch selection held fixed."""
        x = self._vec(x)
        c = np.asarray(objective, dtype=np.float64)
        g = input_gradient(self.base, x, c)
        idx, _ = self.active_patches(x, register=False)
        if idx:
            z = self.patch_input(x)
            gz = sum(input_gradient(self.patches[i].net, z, c) for i in idx)
            g = g + (input_gradient(self.split.prefix, x, gz) if self.split else gz)
        return g


def save_bundle(F: RepairedDnn, path, *, include_cache: bool = False) -> None:
    """Write a bundle directory: manifest, base network, regions, one file per patch."""
    root = Path(path)
    (root / "patches").mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": BUNDLE_VERSION,
        "mode": "input" if F.split_layer is None else "feature",
        "split_layer": F.split_layer,
        "radius": F.radius,
        "n_patches": len(F.patches),
        "cache_included": include_cache,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    (root / "base.json").write_text(json.dumps(network_to_dict(F.base)))
    regions = [{"anchor": r.anchor.tolist(), "label": r.label, "patch_index": r.patch_index,
                "lower": r.box.lower.tolist(), "upper": r.box.upper.tolist()} for r in F.regions]
    (root / "regions.json").write_text(json.dumps(regions))
    for i, p in enumerate(F.patches):
        doc = network_to_dict(p.net)
        doc["use_bias"] = p.use_bias
        (root / "patches" / f"patch_{i:05d}.json").write_text(json.dumps(doc))
    if include_cache:
        cache = [{"lower": b.lower.tolist(), "upper": b.upper.tolist(), "patches": sorted(s)} for b, s in F.cache]
        (root / "cache.json").write_text(json.dumps(cache))


def _load_json(path: Path):
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise ParseError(f"{path}: missing from bundle") from None
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None


def load_bundle(path, *, use_cache: bool = True) -> RepairedDnn:
    root = Path(path)
    manifest = _load_json(root / "manifest.json")
    version = manifest.get("format_version")
    if version != BUNDLE_VERSION:
        raise ParseError(f"{root / 'manifest.json'}: unsupported bundle version {version!r} "
                         f"(supported: {BUNDLE_VERSION})")
    try:
        radius = float(manifest["radius"])
        n = int(manifest["n_patches"])
        split_layer = manifest.get("split_layer")
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{root / 'manifest.json'}: bad manifest field {exc}") from None
    base = network_from_dict(_load_json(root / "base.json"), str(root / "base.json"))
    regions = []
    for k, r in enumerate(_load_json(root / "regions.json")):
        try:
            regions.append(RegionEntry(BoxRegion(r["lower"], r["upper"]), np.asarray(r["anchor"], dtype=np.float64),
                                       int(r["label"]), int(r["patch_index"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"{root / 'regions.json'}: entry {k}: {exc}") from None
    patches = []
    feature_layer = split_layer
    for i in range(n):
        f = root / "patches" / f"patch_{i:05d}.json"
        if not f.exists():
            raise ParseError(f"{root}: patch {i} is missing ({f.name})")
        doc = _load_json(f)
        patches.append(PatchModule(network_from_dict(doc, str(f)), feature_layer, bool(doc.get("use_bias", True))))
    F = RepairedDnn(base, regions, patches, radius, split_layer, use_cache=use_cache)
    cache_file = root / "cache.json"
    if manifest.get("cache_included") and cache_file.exists():
        for e in _load_json(cache_file):
            F.cache.add(BoxRegion(e["lower"], e["upper"]), frozenset(e["patches"]))
    return F
