import json

import numpy as np
import pytest

from patchrepair.attacks import AttackConfig
from patchrepair.deeppoly import BoxRegion, LinearForm, verify, verify_composite
from patchrepair.examples import (TOY_ADVERSARIAL, TOY_ANCHOR, TOY_LABEL, TOY_RADIUS, toy_box, toy_config,
                                  toy_given_forms, toy_patch)
from patchrepair.netcore import Affine, Dnn, forward, split
from patchrepair.repair import (Anchor, DivergenceError, Mode, RefinementExhausted, RepairConfig, RobustnessProperty,
                                bisect_property, bisection_dimension, repair, sample_feature_box, train_patch)
from patchrepair.viloss import (BaseForms, LabelMismatchError, LossMode, PatchModule, composite_bounds,
                                violation_loss)
from patchrepair.toydata import TrainConfig, find_anchors, train_mlp, two_clusters
from tests.conftest import random_net


def _toy_loss(patch, box=None):
    box = box or toy_box()
    return violation_loss(composite_bounds(toy_given_forms()(box, 1), patch, box, 1), box)


def test_config_validation_and_aliases():
    with pytest.raises(ValueError):
        RepairConfig(max_iterations=0)
    with pytest.raises(ValueError):
        RepairConfig(learning_rate=0.0)
    cfg = RepairConfig.from_dict({"M": 3, "R": 2, "eta": 0.5, "K": 7, "mode": "feature"})
    assert (cfg.max_iterations, cfg.max_epochs, cfg.learning_rate, cfg.slice_k, cfg.mode) == (3, 2, 0.5, 7, Mode.FEATURE)
    assert cfg.loss_mode is LossMode.UNCLIPPED
    with pytest.raises(ValueError):
        RepairConfig.from_dict({"bogus": 1})
    assert RepairConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_defaults():
    cfg = RepairConfig()
    assert (cfg.max_iterations, cfg.max_epochs, cfg.learning_rate, cfg.slice_k) == (25, 10, 10.0, 800)


def test_worked_example_single_step():
    prop = RobustnessProperty(toy_box(), 1, 0)
    out = train_patch(toy_given_forms(), toy_patch(), [prop], toy_config())
    W, _ = out.patch.parameters()[0]
    np.testing.assert_allclose(W, [[0.22, -0.8], [-0.02, 1.0]], atol=1e-12)
    assert not out.repaired and out.steps == 1
    assert [p for p, _ in out.refine] == [prop]
    assert abs(out.losses[0] - 1.15) < 1e-12 and abs(out.losses[1] - 0.062) < 1e-12


def test_worked_example_bisection_at_init():
    prop = RobustnessProperty(toy_box(), 1, 0)
    lv = _toy_loss(toy_patch())
    np.testing.assert_allclose(lv.input_gradient(), [0.7, 0.14], atol=1e-12)
    assert bisection_dimension(prop, lv) == 0
    a, b = bisect_property(prop, lv)
    np.testing.assert_allclose([a.box.lower, a.box.upper], [[-1.2, 0.5], [-0.7, 1.5]], atol=1e-12)
    np.testing.assert_allclose([b.box.lower, b.box.upper], [[-0.7, 0.5], [-0.2, 1.5]], atol=1e-12)
    assert (a.depth, a.origin, a.label) == (1, 0, 1)
    assert a.box.volume + b.box.volume == pytest.approx(prop.box.volume, abs=1e-15)


def test_bisection_is_width_weighted():
    forms = BaseForms.from_forms(0, {1: LinearForm(np.array([0.0, 5.0]), 1.0)})
    box = BoxRegion([0.0, 0.0], [10.0, 0.1])
    lv = violation_loss(composite_bounds(forms, PatchModule.affine(2, 2), box, 0), box)
    assert bisection_dimension(RobustnessProperty(box, 0, 0), lv) == 1


def test_bisection_ties_and_fallback():
    box = BoxRegion([0.0, 0.0], [1.0, 2.0])
    forms = BaseForms.from_forms(0, {1: LinearForm(np.array([2.0, 1.0]), 1.0)})
    lv = violation_loss(composite_bounds(forms, PatchModule.affine(2, 2), box, 0), box)
    assert bisection_dimension(RobustnessProperty(box, 0, 0), lv) == 0  # (2, 2) tie goes low
    flat = BaseForms.from_forms(0, {1: LinearForm(np.zeros(2), 1.0)})
    lv = violation_loss(composite_bounds(flat, PatchModule.affine(2, 2), box, 0), box)
    assert bisection_dimension(RobustnessProperty(box, 0, 0), lv) == 1  # widest


def test_degenerate_box_exhausted():
    box = BoxRegion([1.0, 1.0], [1.0, 1.0])
    forms = BaseForms.from_forms(0, {1: LinearForm(np.ones(2), 1.0)})
    lv = violation_loss(composite_bounds(forms, PatchModule.affine(2, 2), box, 0), box)
    with pytest.raises(RefinementExhausted):
        bisect_property(RobustnessProperty(box, 0, 0), lv)


def test_early_exit_when_already_verified():
    net = Dnn([Affine(np.zeros((2, 2)), [0.0, 1.0])])
    prop = RobustnessProperty(BoxRegion.from_center([0.0, 0.0], 1.0), 1, 0)
    out = train_patch(net, PatchModule.affine(2, 2), [prop], RepairConfig())
    assert out.repaired and out.steps == 0 and out.refine == []
    F, report = repair(net, [np.zeros(2)], 1.0)
    assert report.provable and report.iterations == 1 and report.history[0]["steps"][0] == 0


def test_slice_k_keeps_largest():
    W = np.array([[1.0, 0.0], [0.0, 0.0]])
    net = Dnn([Affine(W, [0.0, 0.0])])
    props = [RobustnessProperty(BoxRegion.from_center([0.01 * i, 0.0], 0.001), 1, 0, depth=0) for i in range(1, 1201)]
    # properties already patched enough stay out; all 1200 violate here
    cfg = RepairConfig(max_epochs=1, learning_rate=1e-9, slice_k=800, patch_bias=False)
    out = train_patch(net, PatchModule.affine(2, 2, use_bias=False), props, cfg)
    assert len(out.refine) == 800
    losses = [lv.total for _, lv in out.refine]
    assert losses == sorted(losses, reverse=True)
    assert min(losses) >= max(lv.total for p, lv in zip(props, out.final) if all(p is not q for q, _ in out.refine))


def test_mixed_labels_rejected(toy):
    props = [RobustnessProperty(toy_box(), 0, 0), RobustnessProperty(toy_box(), 1, 0)]
    with pytest.raises(LabelMismatchError):
        train_patch(toy, toy_patch(), props, RepairConfig())


def test_divergence_reported(toy):
    cfg = RepairConfig(learning_rate=1e307, max_epochs=3)
    far = TOY_ANCHOR * 1e3
    with pytest.raises(DivergenceError) as err:
        repair(toy, [Anchor(far, 0)], TOY_RADIUS, cfg)
    assert err.value.patch_index == 0


def _leaf_partition_ok(F, radius):
    for i, region in enumerate(F.regions):
        leaves = F.properties[i]
        vol = sum(p.box.volume for p in leaves)
        assert vol == pytest.approx(region.box.volume, rel=1e-12)
        for a in range(len(leaves)):
            for b in range(a + 1, len(leaves)):
                lo = np.maximum(leaves[a].box.lower, leaves[b].box.lower)
                hi = np.minimum(leaves[a].box.upper, leaves[b].box.upper)
                assert np.any(hi - lo <= 0), "leaf interiors overlap"


@pytest.mark.parametrize("given", [True, False])
def test_worked_example_end_to_end(toy, given):
    kwargs = {"base_bounds": toy_given_forms()} if given else {}
    F, report = repair(toy, [Anchor(TOY_ANCHOR, TOY_LABEL, TOY_ADVERSARIAL)], TOY_RADIUS, toy_config(), **kwargs,
                       initial_patches=[toy_patch()])
    assert report.provable
    assert F.classify(TOY_ADVERSARIAL) == 1
    for leaf in F.properties[0]:
        assert verify_composite([toy, F.patches[0].net], leaf.box, 1)
    _leaf_partition_ok(F, TOY_RADIUS)
    if given:
        np.testing.assert_allclose(report.trace[0]["weights"][0][0], [[0.22, -0.8], [-0.02, 1.0]], atol=1e-12)


@pytest.fixture(scope="module")
def cluster_case():
    data = two_clusters(400, seed=1)
    net = train_mlp(data, TrainConfig(hidden=(16, 16), epochs=300, seed=1))
    r = 0.2
    anchors = find_anchors(net, data, r, 5, AttackConfig(r, r / 4, seed=0))
    assert len(anchors) == 5
    return net, r, [Anchor(a.x, a.label, a.adversarial) for a in anchors]


def test_bisection_driven_repair_verifies_every_leaf(cluster_case):
    net, r, anchors = cluster_case
    probes = np.random.default_rng(0).normal(size=(50, 2))
    before = forward(net, probes).tobytes()
    cfg = RepairConfig(max_iterations=25, max_epochs=5, learning_rate=0.05)
    F, report = repair(net, anchors, r, cfg)
    assert forward(net, probes).tobytes() == before
    assert sum(a["leaves"] for a in report.anchors) > len(anchors), "expected some refinement"
    _leaf_partition_ok(F, r)
    for i, a in enumerate(report.anchors):
        if a["repaired"]:
            for leaf in F.properties[i]:
                assert verify_composite([net, F.patches[i].net], leaf.box, leaf.label)
    assert all(p["status"] == "repaired" for p in report.properties if report.anchors[p["origin"]]["repaired"])


def test_repair_is_deterministic(cluster_case):
    net, r, anchors = cluster_case
    cfg = RepairConfig(max_iterations=4, max_epochs=3, learning_rate=0.05, jobs=2)
    reports = [repair(net, anchors, r, cfg) for _ in range(2)]
    (F1, a), (F2, b) = reports
    assert json.dumps(a.to_dict(False)) == json.dumps(b.to_dict(False))
    for p, q in zip(F1.patches, F2.patches):
        for (w1, b1), (w2, b2) in zip(p.parameters(), q.parameters()):
            assert w1.tobytes() == w2.tobytes() and b1.tobytes() == b2.tobytes()


def test_loss_progress_is_mostly_monotone(cluster_case):
    net, r, anchors = cluster_case
    cfg = RepairConfig(max_iterations=10, max_epochs=2, learning_rate=0.05)
    _, report = repair(net, anchors, r, cfg)
    drops = total = 0
    last = {}
    for h in report.history:
        for j, v in h["loss"].items():
            if j in last:
                total += 1
                drops += v <= last[j] + 1e-12
            last[j] = v
    if total and drops / total < 0.9:
        pytest.skip(f"soft property: loss decreased in {drops}/{total} iterations")


def test_misclassified_anchor_warns(toy):
    _, report = repair(toy, [Anchor(TOY_ANCHOR, 0)], TOY_RADIUS, RepairConfig(max_iterations=1))
    assert any("anchor 0" in w for w in report.warnings)
    assert report.anchors[0]["label"] == 0


def test_duplicate_anchors_get_distinct_patches(toy):
    F, report = repair(toy, [TOY_ANCHOR, TOY_ANCHOR.copy()], TOY_RADIUS, RepairConfig())
    assert len(F.patches) == 2 and report.provable


def test_empty_anchor_list_rejected(toy):
    with pytest.raises(ValueError):
        repair(toy, [], 0.5)


def test_depth_cap_marks_unresolvable():
    # class 1 beats class 0 by 1 everywhere and the patch cannot move (eta tiny, no bias)
    net = Dnn([Affine(np.zeros((2, 2)), [1.0, 0.0])])
    cfg = RepairConfig(max_iterations=4, max_epochs=1, learning_rate=1e-12, max_depth=2, patch_bias=False)
    _, report = repair(net, [Anchor(np.zeros(2), 1)], 0.5, cfg)
    assert not report.provable
    assert any(p["status"] == "unresolvable" for p in report.properties)
    assert max(p["depth"] for p in report.properties) == 2


def test_sample_feature_box_hull(rng):
    net = random_net(rng, 4, [8, 6], 3)
    box = BoxRegion.from_center(rng.normal(size=4), 0.3)
    att = AttackConfig(0.3, 0.05, steps=5, restarts=3, fgsm_samples=5, seed=1)
    fb = sample_feature_box(net, 2, box, int(net.classify(box.center)), att)
    assert fb.sample_count == 1 + 3 + 5
    from patchrepair.attacks import collect_samples
    S = collect_samples(net, box.center, int(net.classify(box.center)), att, region=box)
    feats = forward(split(net, 2).prefix, S)
    assert np.all(fb.box.contains(feats))
    np.testing.assert_array_equal(fb.box.lower, feats.min(axis=0))


def test_feature_mode_runs_all_iterations(rng):
    net = random_net(rng, 4, [8, 6], 3)
    anchors = [rng.normal(size=4) for _ in range(3)]
    att = AttackConfig(0.2, 0.05, steps=5, restarts=2, fgsm_samples=3)
    cfg = RepairConfig(mode="feature", max_iterations=3, max_epochs=2, learning_rate=0.1, attack=att)
    F, report = repair(net, anchors, 0.2, cfg)
    assert report.iterations == 3 and report.provable is None
    assert all(h["unrepaired"] == [0, 1, 2] for h in report.history)
    assert all(h["steps"][j] == 2 for h in report.history for j in range(3))
    assert report.notes and F.split_layer == 2
    assert all(a["repaired"] is None for a in report.anchors)
