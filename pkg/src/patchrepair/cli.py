"""Command-line entry point: ``patchrepair {verify,repair,attack,eval}``.

Exit codes: 0 success, 1 some property left unverified (``verify`` only),
2 bad input files or arguments, 3 divergent training.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np

from . import deeppoly
from .attacks import AttackConfig, pgd
from .deeppoly import BoxRegion
from .fileio import ParseError, PropertySpec, load_network, load_properties, save_properties
from .harness import (MetricsReport, compute_drawdown, compute_dsr, compute_dgsr, compute_rgr, compute_rsr,
                      csv_text, generalization_set, load_dataset)
from .netcore import ShapeError, split
from .patched import load_bundle, save_bundle
from .repair import Anchor, DivergenceError, RepairConfig, repair

log = logging.getLogger("patchrepair")

EXIT_OK, EXIT_UNVERIFIED, EXIT_INPUT, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _emit(text: str, out: Optional[str]) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _common_radius(props, override: Optional[float]) -> float:
    if override is not None:
        return override
    radii = {p.radius for p in props}
    if len(radii) != 1:
        raise UsageError(f"properties use several radii {sorted(radii)}; pass --radius")
    return radii.pop()


def _labels(net, props, source: str) -> list[int]:
    out = []
    for i, p in enumerate(props):
        if source == "file":
            if p.label is None:
                raise UsageError(f"property {i} has no label but --label-source=file")
            out.append(p.label)
        else:
            out.append(int(net.classify(p.center)))
    return out


# -- verify -----------------------------------------------------------------

def cmd_verify(args) -> int:
    net = load_network(args.net)
    props = load_properties(args.props, net.input_dim)
    labels = _labels(net, props, args.label_source)
    rows, ok = [], True
    for i, (p, label) in enumerate(zip(props, labels)):
        box = BoxRegion.from_center(p.center, args.radius or p.radius)
        target, region = net, box
        if args.split_layer is not None:
            sp = split(net, args.split_layer)
            res = deeppoly.analyze(sp.prefix, box)
            target, region = sp.suffix, BoxRegion(res.layers[-1].lower, res.layers[-1].upper)
        forms = deeppoly.output_diff_upper(target, region, label)
        worst = max(deeppoly.affine_box_max(f, region) for f in forms.values())
        verdict = deeppoly.Verdict.VERIFIED if worst < 0 else deeppoly.Verdict.UNKNOWN
        ok &= bool(verdict)
        rows.append({"index": i, "label": label, "verdict": verdict.value, "max_bound": worst})
    if args.report == "json":
        _emit(json.dumps(rows, indent=1) + "\n", args.out)
    else:
        lines = [f"{'idx':>4} {'label':>5} {'verdict':>9} {'max_bound':>14}"]
        lines += [f"{r['index']:>4} {r['label']:>5} {r['verdict']:>9} {r['max_bound']:>14.6g}" for r in rows]
        _emit("\n".join(lines) + "\n", args.out)
    return EXIT_OK if ok else EXIT_UNVERIFIED


# -- repair -----------------------------------------------------------------

def _repair_config(args) -> RepairConfig:
    doc = {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise ParseError(f"{args.config}: {exc.strerror or exc}") from None
        except json.JSONDecodeError as exc:
            raise ParseError(f"{args.config}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
        if not isinstance(doc, dict):
            raise ParseError(f"{args.config}: expected a JSON object")
    for flag, key in (("M", "max_iterations"), ("R", "max_epochs"), ("eta", "learning_rate"), ("K", "slice_k"),
                      ("mode", "mode"), ("split_layer", "split_layer"), ("seed", "seed"), ("jobs", "jobs")):
        v = getattr(args, flag)
        if v is not None:
            doc[key] = v
    doc.setdefault("jobs", os.cpu_count() or 1)
    try:
        return RepairConfig.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad repair configuration: {exc}") from None


def _run_example(args) -> int:
    from .examples import (TOY_ADVERSARIAL, TOY_ANCHOR, TOY_LABEL, TOY_RADIUS, toy_config, toy_given_forms,
                           toy_network, toy_patch)
    net = toy_network()
    cfg = toy_config(jobs=1)
    F, report = repair(net, [Anchor(TOY_ANCHOR, TOY_LABEL, TOY_ADVERSARIAL)], TOY_RADIUS, cfg,
                       base_bounds=toy_given_forms(), initial_patches=[toy_patch()])
    return _finish_repair(args, net, F, report, [(TOY_ANCHOR, TOY_ADVERSARIAL)])


def _finish_repair(args, net, F, report, pairs) -> int:
    doc = report.to_dict(include_timing=not args.no_timing)
    if pairs:
        doc["rsr"] = compute_rsr(F, net, pairs).to_dict()
    if args.out_bundle:
        save_bundle(F, args.out_bundle)
    if args.report == "csv":
        lines = ["origin,depth,lower,upper,loss,status"]
        for p in doc["properties"]:
            lines.append(f"{p['origin']},{p['depth']},\"{p['lower']}\",\"{p['upper']}\",{p['loss']!r},"
                         f"{p.get('status', '')}")
        _emit("\n".join(lines) + "\n", args.out)
    else:
        _emit(json.dumps(doc, indent=1) + "\n", args.out)
    return EXIT_OK


def cmd_repair(args) -> int:
    if args.example:
        return _run_example(args)
    if not args.net or not args.props:
        raise UsageError("repair needs --net and --props (or --example)")
    net = load_network(args.net)
    props = load_properties(args.props, net.input_dim)
    cfg = _repair_config(args)
    r = _common_radius(props, args.radius)
    labels = _labels(net, props, args.label_source) if args.label_source == "file" else [None] * len(props)
    anchors = [Anchor(p.center, l, p.adversarial) for p, l in zip(props, labels)]
    F, report = repair(net, anchors, r, cfg)
    pairs = [(p.center, p.adversarial) for p in props if p.adversarial is not None]
    return _finish_repair(args, net, F, report, pairs)


# -- attack -----------------------------------------------------------------

def _target(args):
    if args.bundle:
        return load_bundle(args.bundle)
    if args.net:
        return load_network(args.net)
    raise UsageError("need --net or --bundle")


def cmd_attack(args) -> int:
    target = _target(args)
    base = target.base if hasattr(target, "base") else target
    props = load_properties(args.props, target.input_dim)
    labels = _labels(base, props, args.label_source)
    found = []
    for p, label in zip(props, labels):
        r = args.radius or p.radius
        cfg = AttackConfig(r, min(args.step or r / 4, 2 * r), args.steps, args.restarts, seed=args.seed)
        res = pgd(target, p.center, label, cfg)
        if res.success:
            found.append(PropertySpec(p.center, r, label, res.adversarial))
    if args.out:
        save_properties(found, args.out)
    else:
        sys.stdout.write(json.dumps([f.to_dict() for f in found], indent=1) + "\n")
    log.info("%d of %d properties attacked successfully", len(found), len(props))
    return EXIT_OK


# -- eval -------------------------------------------------------------------

def cmd_eval(args) -> int:
    t0 = time.perf_counter()
    target = _target(args)
    base = target.base if hasattr(target, "base") else target
    radius = args.radius or getattr(target, "radius", None)
    props = load_properties(args.props, base.input_dim) if args.props else []
    if radius is None:
        radius = _common_radius(props, None) if props else None
    test = None
    if args.test:
        test = load_dataset(args.test, args.format, labels_path=args.test_labels, header=args.header)
        if test.inputs.shape[1] != base.input_dim:
            raise ShapeError(f"{args.test}: samples have {test.inputs.shape[1]} features, "
                             f"network expects {base.input_dim}")
    report = MetricsReport(args.model or Path(args.bundle or args.net).stem, radius, len(props))
    att = None if radius is None else AttackConfig(radius, min(args.step or radius / 4, 2 * radius),
                                                   args.steps, args.restarts, seed=args.seed)
    if att is not None:
        report.attack = {"steps": att.steps, "restarts": att.restarts, "step_size": att.step_size, "seed": att.seed}
    pairs = [(p.center, p.adversarial) for p in props if p.adversarial is not None]
    if pairs:
        report.rsr = compute_rsr(target, base, pairs)
    if props and att is not None:
        labels = [int(base.classify(p.center)) for p in props]
        gen = generalization_set(base, [p.center for p in props], labels, radius, att,
                                 exclude=[p.adversarial for p in props])
        report.rgr = compute_rgr(target, gen)
        report.extra["rgr_shortfall"] = {str(k): v for k, v in gen.shortfall.items()}
        report.dsr = compute_dsr(target, base, [p.center for p in props], att)
    if test is not None:
        report.drawdown = compute_drawdown(target, base, test.inputs, test.labels)
        if att is not None and args.dgsr_samples:
            report.dgsr = compute_dgsr(target, base, test.inputs[:args.dgsr_samples], att)
    report.timing["total"] = time.perf_counter() - t0
    if args.report == "csv":
        _emit(csv_text([report]), args.out)
    else:
        _emit(json.dumps(report.to_dict(include_timing=not args.no_timing), indent=1) + "\n", args.out)
    return EXIT_OK


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="patchrepair", description="Provable local-robustness repair with patches.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, *, net_required=True):
        p.add_argument("--net", required=net_required)
        p.add_argument("--props")
        p.add_argument("--radius", type=float)
        p.add_argument("--label-source", choices=("base", "file"), default="base")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out")
        p.add_argument("--no-timing", action="store_true", help="omit wall-clock fields from reports")

    p = sub.add_parser("verify", help="DeepPoly verification of box properties")
    common(p)
    p.add_argument("--split-layer", type=int)
    p.add_argument("--report", choices=("table", "json"), default="table")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("repair", help="train patches until the properties verify")
    common(p, net_required=False)
    p.set_defaults(seed=None)
    p.add_argument("--config")
    p.add_argument("--mode", choices=("provable", "feature"))
    p.add_argument("--split-layer", type=int)
    p.add_argument("--M", type=int)
    p.add_argument("--R", type=int)
    p.add_argument("--eta", type=float)
    p.add_argument("--K", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--out-bundle")
    p.add_argument("--report", choices=("json", "csv"), default="json")
    p.add_argument("--example", choices=("appendix-b",))
    p.set_defaults(func=cmd_repair)

    for name, func, hlp in (("attack", cmd_attack, "PGD search for counterexamples"),
                            ("eval", cmd_eval, "repair metrics for a bundle or network")):
        p = sub.add_parser(name, help=hlp)
        common(p, net_required=False)
        p.add_argument("--bundle")
        p.add_argument("--steps", type=int, default=50)
        p.add_argument("--restarts", type=int, default=10)
        p.add_argument("--step", type=float)
        p.set_defaults(func=func)
    p.add_argument("--test")
    p.add_argument("--test-labels")
    p.add_argument("--format", choices=("csv", "idx"), default="csv")
    p.add_argument("--header", action="store_true")
    p.add_argument("--model")
    p.add_argument("--dgsr-samples", type=int, default=0)
    p.add_argument("--report", choices=("json", "csv"), default="json")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc} (patch {exc.patch_index})", file=sys.stderr)
        return EXIT_DIVERGED
    except (ParseError, ShapeError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
