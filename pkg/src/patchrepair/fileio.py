"""JSON network and property files, and the NNet text format."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .netcore import Affine, Dnn, Relu

FORMAT_VERSION = 1


class ParseError(ValueError):
    """A malformed input file; the message names the offending location."""


def network_to_dict(net: Dnn) -> dict:
    layers = []
    for layer in net.layers:
        if isinstance(layer, Affine):
            layers.append({"type": "affine", "weights": layer.weights.tolist(), "bias": layer.bias.tolist()})
        else:
            layers.append({"type": "relu"})
    return {"format_version": FORMAT_VERSION, "layers": layers}


def network_from_dict(doc, where: str = "<network>", *, final_affine: bool = True) -> Dnn:
    if not isinstance(doc, dict) or "layers" not in doc:
        raise ParseError(f"{where}: expected an object with a 'layers' list")
    version = doc.get("format_version", FORMAT_VERSION)
    if version != FORMAT_VERSION:
        raise ParseError(f"{where}: unsupported format_version {version!r} (supported: {FORMAT_VERSION})")
    layers = []
    width = None
    for k, spec in enumerate(doc["layers"]):
        loc = f"{where}: layers[{k}]"
        kind = spec.get("type") if isinstance(spec, dict) else None
        if kind == "affine":
            try:
                layer = Affine(spec["weights"], spec["bias"])
            except (KeyError, ValueError, TypeError) as exc:
                raise ParseError(f"{loc}: {exc}") from None
            width = layer.out_dim
        elif kind == "relu":
            if width is None:
                raise ParseError(f"{loc}: a relu layer needs a preceding affine layer to fix its width")
            layer = Relu(width)
        else:
            raise ParseError(f"{loc}: unknown layer type {kind!r}")
        layers.append(layer)
    try:
        return Dnn(layers, final_affine=final_affine)
    except ValueError as exc:
        raise ParseError(f"{where}: {exc}") from None


def _read_json(path) -> object:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"{path}: {exc.strerror or exc}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None


def save_network(net: Dnn, path) -> None:
    # json emits repr() floats, which round-trip float64 exactly.
    Path(path).write_text(json.dumps(network_to_dict(net)))


def load_network(path) -> Dnn:
    path = Path(path)
    if path.suffix.lower() == ".nnet":
        return read_nnet(path)
    return network_from_dict(_read_json(path), str(path))


@dataclass
class PropertySpec:
    center: np.ndarray
    radius: float
    label: Optional[int] = None
    adversarial: Optional[np.ndarray] = None

    def to_dict(self) -> dict:
        d = {"center": np.asarray(self.center).tolist(), "radius": float(self.radius)}
        if self.label is not None:
            d["label"] = int(self.label)
        if self.adversarial is not None:
            d["adversarial"] = np.asarray(self.adversarial).tolist()
        return d


def load_properties(path, input_dim: Optional[int] = None) -> list[PropertySpec]:
    doc = _read_json(path)
    if not isinstance(doc, list):
        raise ParseError(f"{path}: expected a JSON list of properties")
    props = []
    for i, entry in enumerate(doc):
        loc = f"{path}: [{i}]"
        if not isinstance(entry, dict) or "center" not in entry or "radius" not in entry:
            raise ParseError(f"{loc}: each property needs 'center' and 'radius'")
        try:
            center = np.asarray(entry["center"], dtype=np.float64)
            radius = float(entry["radius"])
            adv = entry.get("adversarial")
            adv = None if adv is None else np.asarray(adv, dtype=np.float64)
            label = entry.get("label")
            label = None if label is None else int(label)
        except (TypeError, ValueError) as exc:
            raise ParseError(f"{loc}: {exc}") from None
        if center.ndim != 1:
            raise ParseError(f"{loc}: center must be a flat list of numbers")
        if input_dim is not None and center.shape[0] != input_dim:
            raise ParseError(f"{loc}: center has {center.shape[0]} entries, network expects {input_dim}")
        if adv is not None and adv.shape != center.shape:
            raise ParseError(f"{loc}: adversarial example and center differ in length")
        if not radius > 0:
            raise ParseError(f"{loc}: radius must be positive")
        props.append(PropertySpec(center, radius, label, adv))
    return props


def save_properties(props, path) -> None:
    Path(path).write_text(json.dumps([p.to_dict() for p in props], indent=1))


def read_nnet(path, *, fold_normalization: bool = False) -> Dnn:
    """Parse an NNet file into a ReLU network.

    With ``fold_normalization`` the input normalisation ``(x - mean) / range``
    is folded into the first affine layer so the network takes raw inputs;
    the input clipping to ``[min, max]`` is not representable and is dropped.
    Output de-normalisation is never applied (it does not change the argmax).
    """
    path = Path(path)
    try:
        raw = path.read_text().splitlines()
    except OSError as exc:
        raise ParseError(f"{path}: {exc.strerror or exc}") from None
    lines = [(n + 1, ln.strip()) for n, ln in enumerate(raw)]
    lines = [(n, ln) for n, ln in lines if ln and not ln.startswith("//")]
    pos = 0

    def row(what: str, count: Optional[int] = None, conv=float) -> list:
        nonlocal pos
        if pos >= len(lines):
            raise ParseError(f"{path}:{len(raw)}: file ends while reading {what}")
        n, ln = lines[pos]
        pos += 1
        try:
            vals = [conv(tok) for tok in ln.split(",") if tok.strip()]
        except ValueError:
            raise ParseError(f"{path}:{n}: cannot parse {what}: {ln[:60]!r}") from None
        if count is not None and len(vals) < count:
            raise ParseError(f"{path}:{n}: expected {count} values for {what}, found {len(vals)}")
        return vals[:count] if count is not None else vals

    header = row("header", 4, conv=int)
    n_layers, n_in, n_out, _ = header
    sizes = row("layer sizes", conv=int)
    if len(sizes) != n_layers + 1:
        raise ParseError(
            f"{path}:{lines[pos - 1][0]}: header declares {n_layers} layers "
            f"but the size line lists {len(sizes)} sizes"
        )
    if sizes[0] != n_in or sizes[-1] != n_out:
        raise ParseError(f"{path}:{lines[pos - 1][0]}: layer sizes disagree with the declared input/output sizes")
    row("symmetric flag")
    row("input minimums", n_in)
    row("input maximums", n_in)
    means = row("means", n_in + 1)
    ranges = row("ranges", n_in + 1)
    weights, biases = [], []
    for k in range(n_layers):
        w = np.array([row(f"layer {k} weight row {i}", sizes[k]) for i in range(sizes[k + 1])])
        b = np.array([row(f"layer {k} bias {i}", 1)[0] for i in range(sizes[k + 1])])
        weights.append(w)
        biases.append(b)
    if pos != len(lines):
        raise ParseError(f"{path}:{lines[pos][0]}: unexpected data after the {n_layers} declared layers")
    if fold_normalization:
        mean = np.array(means[:n_in])
        rng = np.array(ranges[:n_in])
        W0 = weights[0] / rng
        biases[0] = biases[0] - W0 @ mean
        weights[0] = W0
    return Dnn.from_arrays(weights, biases)


def write_nnet(net: Dnn, path, *, input_min=None, input_max=None) -> None:
    """Write ``net`` as an NNet file with identity normalisation."""
    Ws, bs = zip(*net.parameters())
    sizes = [net.input_dim] + [w.shape[0] for w in Ws]
    n_in = net.input_dim
    lo = np.full(n_in, -1e9) if input_min is None else np.asarray(input_min, float)
    hi = np.full(n_in, 1e9) if input_max is None else np.asarray(input_max, float)

    def fmt(vals) -> str:
        return ",".join(repr(float(v)) for v in vals) + ","

    out = ["// written by patchrepair",
           f"{len(Ws)},{n_in},{sizes[-1]},{max(sizes)},",
           ",".join(map(str, sizes)) + ",",
           "0,", fmt(lo), fmt(hi), fmt(np.zeros(n_in + 1)), fmt(np.ones(n_in + 1))]
    for W, b in zip(Ws, bs):
        out += [fmt(r) for r in W]
        out += [fmt([v]) for v in b]
    Path(path).write_text("\n".join(out) + "\n")
