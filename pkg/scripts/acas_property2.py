"""Repair ACAS Xu networks that violate property 2 ("COC is never the maximal score").

Usage:
    python3 scripts/acas_property2.py DIR_OR_FILES... [--n 500] [--radius 0.002] [--max-networks 1]
    python3 scripts/acas_property2.py --fake     # smoke run on a random ACAS-shaped network

Inputs are in the networks' normalised coordinates. Counterexamples are drawn
uniformly from the property box (points where COC wins), kept only if their
repair boxes are pairwise disjoint, and repaired towards the best non-COC
advisory at that point.
"""
from __future__ import annotations

import argparse
import json
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from patchrepair.deeppoly import BoxRegion
from patchrepair.fileio import read_nnet, write_nnet
from patchrepair.harness import compute_drawdown
from patchrepair.netcore import Dnn
from patchrepair.repair import Anchor, RepairConfig, repair

COC = 0
PROPERTY_BOX = BoxRegion([0.6, -0.5, -0.5, 0.45, -0.5], [0.679858, 0.5, 0.5, 0.5, -0.45])
# normalised ACAS Xu input domain, used for the fidelity sample
DOMAIN = BoxRegion([-0.328423, -0.5, -0.5, -0.5, -0.5], [0.679858, 0.5, 0.5, 0.5, 0.5])


def counterexamples(net: Dnn, n: int, radius: float, rng: np.random.Generator,
                    max_draws: int = 200_000) -> np.ndarray:
    kept: list[np.ndarray] = []
    for _ in range(max_draws // 5000):
        X = PROPERTY_BOX.sample(rng, 5000)
        for x in X[np.argmax(net.forward(X), axis=1) == COC]:
            if all(np.max(np.abs(x - k)) > 2 * radius for k in kept):
                kept.append(x)
                if len(kept) == n:
                    return np.array(kept)
    return np.array(kept).reshape(-1, net.input_dim)


def repair_network(net: Dnn, name: str, n: int = 500, radius: float = 0.002, seed: int = 0,
                   fidelity_samples: int = 5000) -> dict:
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    X = counterexamples(net, n, radius, rng)
    row = {"network": name, "counterexamples": len(X), "radius": radius}
    if not len(X):
        return row | {"rsr": None, "fdd": None, "provable": None, "seconds": time.perf_counter() - t0}
    Y = net.forward(X)
    Y[:, COC] = -np.inf
    targets = np.argmax(Y, axis=1)
    anchors = [Anchor(x, int(t), x) for x, t in zip(X, targets)]
    F, report = repair(net, anchors, radius, RepairConfig(seed=seed))
    fixed = sum(F.classify(x, register=False) != COC for x in X)
    dd = compute_drawdown(F, net, DOMAIN.sample(rng, fidelity_samples))
    return row | {"rsr": 100.0 * fixed / len(X), "fdd": dd.fdd, "provable": report.provable,
                  "iterations": report.iterations, "allocations": F.allocations,
                  "seconds": time.perf_counter() - t0}


def run_property2(paths, n_counterexamples: int = 500, radius: float = 0.002, seed: int = 0,
                  max_networks: int = 1) -> list[dict]:
    """Repair up to ``max_networks`` violating networks; non-violating ones are listed with zero counterexamples."""
    out = []
    for p in paths:
        if sum(r["counterexamples"] > 0 for r in out) >= max_networks:
            break
        out.append(repair_network(read_nnet(p), Path(p).name, n_counterexamples, radius, seed))
    return out


def fake_network(seed: int = 0) -> Dnn:
    """Random 5-50x6-5 network biased so that COC often wins inside the property box."""
    rng = np.random.default_rng(seed)
    sizes = [5] + [50] * 6 + [5]
    Ws = [rng.normal(0, np.sqrt(2 / a), (b, a)) for a, b in zip(sizes[:-1], sizes[1:])]
    bs = [rng.normal(0, 0.05, b) for b in sizes[1:]]
    probe = PROPERTY_BOX.sample(rng, 2000)
    y = Dnn.from_arrays(Ws, bs).forward(probe)
    bs[-1][COC] += np.quantile(np.max(y[:, 1:], axis=1) - y[:, COC], 0.3)
    return Dnn.from_arrays(Ws, bs)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("paths", nargs="*", type=Path)
    ap.add_argument("--n", type=int, default=500)
    ap.add_argument("--radius", type=float, default=0.002)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--max-networks", type=int, default=1)
    ap.add_argument("--fake", action="store_true")
    args = ap.parse_args(argv)
    paths = [q for p in args.paths for q in (sorted(p.glob("*.nnet")) if p.is_dir() else [p])]
    with tempfile.TemporaryDirectory() as tmp:
        if args.fake:
            paths = [Path(tmp) / "fake_acas.nnet"]
            write_nnet(fake_network(args.seed), paths[0])
        if not paths:
            ap.error("give NNet files or a directory, or --fake")
        rows = run_property2(paths, args.n, args.radius, args.seed, args.max_networks)
    for r in rows:
        print(json.dumps(r))
    return 0 if all(r["rsr"] in (None, 100.0) for r in rows) else 1


if __name__ == "__main__":
    sys.exit(main())
