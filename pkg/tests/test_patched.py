import json

import numpy as np
import pytest

from patchrepair.deeppoly import BoxRegion
from patchrepair.examples import TOY_ADVERSARIAL, TOY_ANCHOR, TOY_RADIUS, toy_box
from patchrepair.fileio import ParseError
from patchrepair.netcore import Affine, Dnn, ShapeError, forward, split
from patchrepair.patched import BUNDLE_VERSION, AllocationCache, RegionEntry, RepairedDnn, load_bundle, save_bundle
from patchrepair.repair import Anchor, RepairConfig, repair
from patchrepair.viloss import PatchModule
from tests.conftest import random_net

STEP_PATCH = np.array([[0.22, -0.8], [-0.02, 1.0]])


def _patch(W, b=None):
    W = np.asarray(W, dtype=float)
    return PatchModule(Dnn([Affine(W, np.zeros(W.shape[0]) if b is None else b)]))


@pytest.fixture
def toy_repaired(toy):
    region = RegionEntry(toy_box(), TOY_ANCHOR, 1, 0)
    return RepairedDnn(toy, [region], [_patch(STEP_PATCH)], TOY_RADIUS)


def test_indicator_membership(toy):
    regions = [RegionEntry(BoxRegion.from_center([0.0, 0.0], 1.0), np.zeros(2), 0, 0),
               RegionEntry(BoxRegion.from_center([1.5, 0.0], 1.0), np.array([1.5, 0.0]), 0, 1)]
    F = RepairedDnn(toy, regions, [_patch(np.zeros((2, 2)))] * 2, 1.0)
    assert list(F.indicator([0.0, 0.0])) == [True, False]
    assert list(F.indicator([1.0, 0.0])) == [True, True]
    assert list(F.indicator([2.5, 1.0])) == [False, True]  # on the face


def test_worked_example_evaluation(toy_repaired):
    y = toy_repaired.evaluate(TOY_ADVERSARIAL)
    np.testing.assert_allclose(y, [-1.828, 1.471], atol=1e-12)
    assert toy_repaired.classify(TOY_ADVERSARIAL) == 1
    x = TOY_ANCHOR
    np.testing.assert_array_equal(toy_repaired.evaluate(x), forward(toy_repaired.base, x) + STEP_PATCH @ x)


def test_allocation_by_base_class(toy):
    a0, a1 = np.array([-0.7, 1.0]), np.array([1.0, -0.5])
    preds = [toy.classify(a0), toy.classify(a1)]
    assert preds[0] != preds[1]
    regions = [RegionEntry(BoxRegion.from_center(a, 0.01), a, p, i) for i, (a, p) in enumerate(zip((a0, a1), preds))]
    F = RepairedDnn(toy, regions, [_patch(np.eye(2)), _patch(-np.eye(2))], 0.01, use_cache=False)
    q = np.array([-0.6, 1.2])
    assert toy.classify(q) == preds[0]
    assert F.active_patches(q) == ([0], "allocated")


def test_empty_allocation_equals_base(toy):
    a = np.array([-0.7, 1.0])
    F = RepairedDnn(toy, [RegionEntry(BoxRegion.from_center(a, 0.01), a, 1, 0)], [_patch(np.eye(2))], 0.01,
                    use_cache=False)
    rng = np.random.default_rng(0)
    for q in rng.uniform(-3, 3, (200, 2)):
        if not F.indicator(q).any() and toy.classify(q) != toy.classify(a):
            assert F.evaluate(q).tobytes() == forward(toy, q).tobytes()


def test_cache_precedence():
    # class 0 iff x_0 > 0
    base = Dnn([Affine([[1.0, 0.0], [0.0, 0.0]], [0.0, 0.0])])
    a = np.array([5.0, 5.0])
    F = RepairedDnn(base, [RegionEntry(BoxRegion.from_center(a, 0.1), a, 0, 0)], [_patch(np.eye(2))], 0.5)
    q1, q2 = np.array([0.2, 0.0]), np.array([-0.2, 0.0])
    assert base.classify(q1) == 0 and base.classify(q2) == 1
    assert F.allocate(q1) == {0}
    assert F.allocate(q2) == {0}  # inside the ball cached for q1
    assert F.allocations == 1
    F.cache.clear()
    assert F.allocate(q2) == frozenset()


def test_indicator_precedes_allocation(toy_repaired):
    toy_repaired.evaluate(TOY_ANCHOR)
    assert len(toy_repaired.cache) == 0


def test_cache_is_bounded_fifo():
    cache = AllocationCache(2)
    for i in range(3):
        cache.add(BoxRegion.from_center([float(10 * i)], 1.0), frozenset({i}))
    assert len(cache) == 2
    assert cache.lookup([0.0]) is None and cache.lookup([20.0]) == {2}


def test_patch_shape_checked(toy):
    with pytest.raises(ShapeError):
        RepairedDnn(toy, [RegionEntry(toy_box(), TOY_ANCHOR, 1, 0)], [_patch(np.zeros((3, 2)))], 0.5)
    with pytest.raises(ValueError):
        RepairedDnn(toy, [], [_patch(np.zeros((2, 2)))], 0.5)


def test_feature_mode_uses_prefix(rng):
    net = random_net(rng, 3, [6, 5], 2)
    sp = split(net, 2)
    x = rng.normal(size=3)
    patch = PatchModule(Dnn([Affine(rng.normal(size=(2, 6)), rng.normal(size=2))]), feature_layer=2)
    F = RepairedDnn(net, [RegionEntry(BoxRegion.from_center(x, 0.1), x, 0, 0)], [patch], 0.1, split_layer=2)
    np.testing.assert_allclose(F.evaluate(x), forward(net, x) + patch(sp.feature(x)))
    c = np.array([1.0, -1.0])
    h = 1e-6
    fd = np.array([(c @ F.forward(x + h * e) - c @ F.forward(x - h * e)) / (2 * h) for e in np.eye(3)])
    np.testing.assert_allclose(F.input_gradient(x, c), fd, rtol=1e-4, atol=1e-7)


def test_bundle_roundtrip(tmp_path, toy_repaired):
    save_bundle(toy_repaired, tmp_path / "b")
    G = load_bundle(tmp_path / "b")
    rng = np.random.default_rng(0)
    for q in rng.uniform(-2, 2, (100, 2)):
        assert G.evaluate(q, register=False).tobytes() == toy_repaired.evaluate(q, register=False).tobytes()
    assert not (tmp_path / "b" / "cache.json").exists()


def test_bundle_with_cache(tmp_path, toy_repaired):
    toy_repaired.evaluate([2.0, -2.0])
    save_bundle(toy_repaired, tmp_path / "b", include_cache=True)
    G = load_bundle(tmp_path / "b")
    assert len(G.cache) == 1


def test_bundle_missing_patch(tmp_path, toy_repaired):
    save_bundle(toy_repaired, tmp_path / "b")
    (tmp_path / "b" / "patches" / "patch_00000.json").unlink()
    with pytest.raises(ParseError, match="patch 0"):
        load_bundle(tmp_path / "b")


def test_bundle_version_rejected(tmp_path, toy_repaired):
    save_bundle(toy_repaired, tmp_path / "b")
    m = tmp_path / "b" / "manifest.json"
    doc = json.loads(m.read_text())
    doc["format_version"] = 99
    m.write_text(json.dumps(doc))
    with pytest.raises(ParseError, match=f"supported: {BUNDLE_VERSION}"):
        load_bundle(tmp_path / "b")


def test_provable_repair_region_correctness(toy):
    F, report = repair(toy, [Anchor(TOY_ANCHOR, 1)], TOY_RADIUS, RepairConfig())
    assert report.provable
    X = toy_box().sample(np.random.default_rng(0), 10_000)
    assert all(F.classify(x, register=False) == 1 for x in X)
