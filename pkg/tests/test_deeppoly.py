import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from patchrepair.attacks import AttackConfig, pgd
from patchrepair.deeppoly import (BoxRegion, LinearForm, Verdict, affine_box_max, analyze, composite_network,
                                  output_diff_upper, relu_relaxation, verify, verify_composite)
from patchrepair.netcore import Affine, Dnn, Relu, ShapeError, forward
from tests.conftest import nets_and_boxes, random_box, random_net

SLACK = 1e-9


def _neuron_values(net, X):
    vals, h = [], X
    for layer in net.layers:
        h = layer(h)
        vals.append(h)
    return vals


def test_box_construction_and_validation():
    box = BoxRegion.from_center([0.0, 1.0], 0.5)
    np.testing.assert_array_equal(box.lower, [-0.5, 0.5])
    np.testing.assert_array_equal(box.widths, [1.0, 1.0])
    with pytest.raises(ValueError):
        BoxRegion([1.0], [0.0])
    with pytest.raises(ValueError):
        BoxRegion([0.0], [np.inf])


def test_box_hull_and_bisect():
    hull = BoxRegion.hull([[1.0, 2.0], [3.0, 0.0]])
    np.testing.assert_array_equal(hull.lower, [1.0, 0.0])
    np.testing.assert_array_equal(hull.upper, [3.0, 2.0])
    a, b = hull.bisect(0)
    assert a.volume + b.volume == hull.volume
    assert a.upper[0] == b.lower[0] == 2.0


def test_closed_membership():
    box = BoxRegion.from_center([0.0, 0.0], 1.0)
    assert box.contains([1.0, -1.0])
    assert not box.contains([1.0 + 1e-12, 0.0])


def test_single_relu_relaxation():
    lo_s, lo_i, up_s, up_i = relu_relaxation(np.array([-1.0]), np.array([1.0]))
    assert (lo_s[0], lo_i[0], up_s[0], up_i[0]) == (1.0, 0.0, 0.5, 0.5)
    lo_s, _, _, _ = relu_relaxation(np.array([-2.0]), np.array([1.0]))
    assert lo_s[0] == 0.0
    net = Dnn([Affine([[1.0]], [0.0]), Relu(1), Affine([[1.0]], [0.0])], final_affine=True)
    res = analyze(net, BoxRegion([-1.0], [1.0]))
    relu = res.layers[1].neuron(0)
    assert (relu.conc_lower, relu.conc_upper) == (0.0, 1.0)
    assert relu.sym_upper.coeffs[0] == 0.5 and relu.sym_upper.offset == 0.5
    assert relu.sym_lower.coeffs[0] == 1.0 and relu.sym_lower.offset == 0.0


def test_toy_hidden_bounds(toy):
    res = analyze(toy, BoxRegion.from_center([-0.7, 1.0], 0.5))
    np.testing.assert_allclose(res.layers[0].lower, [-0.41, -1.08], atol=1e-12)
    np.testing.assert_allclose(res.layers[0].upper, [1.49, 1.52], atol=1e-12)


def test_toy_property_is_unknown(toy):
    box = BoxRegion.from_center([-0.7, 1.0], 0.5)
    assert verify(toy, box, 1) is Verdict.UNKNOWN
    form = output_diff_upper(toy, box, 1)[0]
    X = box.sample(np.random.default_rng(0), 10_000)
    Y = forward(toy, X)
    assert np.all(X @ form.coeffs + form.offset >= Y[:, 0] - Y[:, 1] - SLACK)


def test_affine_net_is_exact(rng):
    W, b = rng.normal(size=(3, 4)), rng.normal(size=3)
    net = Dnn([Affine(W, b)])
    box = random_box(rng, 4)
    res = analyze(net, box)
    V = box.vertices()
    Y = V @ W.T + b
    np.testing.assert_allclose(res.layers[0].lower, Y.min(axis=0), atol=1e-9)
    np.testing.assert_allclose(res.layers[0].upper, Y.max(axis=0), atol=1e-9)
    forms = output_diff_upper(net, box, 2)
    for l, f in forms.items():
        np.testing.assert_array_equal(f.coeffs, W[l] - W[2])
        assert f.offset == b[l] - b[2]


def test_self_difference_rejected(toy):
    box = BoxRegion.from_center([-0.7, 1.0], 0.5)
    assert 1 not in output_diff_upper(toy, box, 1)
    with pytest.raises(ValueError):
        output_diff_upper(toy, box, 2)


@pytest.mark.parametrize("a,b,expected", [((0.0, 0.0), 3.25, 3.25), ((1.0, -2.0), 0.5, 3.5)])
def test_affine_box_max_examples(a, b, expected):
    box = BoxRegion([-1.0, -1.0], [1.0, 1.0])
    assert affine_box_max(LinearForm(np.array(a), b), box) == expected


def test_affine_box_max_dimension_check():
    with pytest.raises(ShapeError):
        affine_box_max(LinearForm(np.ones(3), 0.0), BoxRegion([0.0], [1.0]))


@given(seed=st.integers(0, 2**32 - 1), dim=st.integers(1, 10))
def test_affine_box_max_equals_vertex_enumeration(seed, dim):
    rng = np.random.default_rng(seed)
    box = random_box(rng, dim)
    form = LinearForm(rng.normal(size=dim), float(rng.normal()))
    brute = np.max(box.vertices() @ form.coeffs + form.offset)
    assert abs(affine_box_max(form, box) - brute) <= 1e-9


@given(nets_and_boxes())
def test_soundness_by_sampling(case):
    net, box = case
    res = analyze(net, box)
    X = box.sample(np.random.default_rng(0), 2_000)
    for layer, vals in zip(res.layers, _neuron_values(net, X)):
        assert np.all(vals >= layer.lower - SLACK) and np.all(vals <= layer.upper + SLACK)
    Y = forward(net, X)
    for l, f in output_diff_upper(net, box, 0, analysis=res).items():
        assert np.all(X @ f.coeffs + f.offset >= Y[:, l] - Y[:, 0] - SLACK)


def test_constant_dominant_net_verifies():
    net = Dnn([Affine(np.zeros((3, 2)), [0.0, 1.0, -1.0])])
    assert verify(net, BoxRegion.from_center([0.0, 0.0], 1.0), 1) is Verdict.VERIFIED
    # ties are not strict
    tied = Dnn([Affine(np.zeros((2, 2)), [1.0, 1.0])])
    assert verify(tied, BoxRegion.from_center([0.0, 0.0], 1.0), 0) is Verdict.UNKNOWN


def test_refinement_sanity_suite():
    """Verified boxes usually stay verified on bisected halves; flips are logged, not fatal."""
    flips = checked = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        net = random_net(rng, 2, [8, 8], 2)
        c = rng.uniform(-1, 1, 2)
        label = int(net.classify(c))
        r = 0.2
        while r > 1e-3 and not verify(net, BoxRegion.from_center(c, r), label):
            r /= 2
        box = BoxRegion.from_center(c, r)
        if not verify(net, box, label):
            continue
        for d in range(2):
            for child in box.bisect(d):
                checked += 1
                flips += not verify(net, child, label)
    assert checked > 0
    if flips:
        warnings.warn(f"{flips} of {checked} sub-boxes lost verification after bisection")


def test_verified_region_has_no_pgd_counterexample():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        net = random_net(rng, 3, [10], 3)
        c = rng.uniform(-1, 1, 3)
        label = int(net.classify(c))
        r = 0.5
        while r > 1e-4 and not verify(net, BoxRegion.from_center(c, r), label):
            r /= 2
        if r > 1e-4:
            assert not pgd(net, c, label, AttackConfig(r, r / 4, seed=seed)).success


@given(nets_and_boxes(max_hidden_layers=2, max_width=8), st.integers(0, 2**32 - 1))
def test_composite_network_is_exact_and_analysis_additive(case, seed):
    base, box = case
    rng = np.random.default_rng(seed)
    patch = random_net(rng, base.input_dim, [int(rng.integers(1, 6))] * int(rng.integers(0, 3)), base.output_dim)
    merged = composite_network([base, patch], box)
    X = box.sample(rng, 200)
    np.testing.assert_allclose(forward(merged, X), forward(base, X) + forward(patch, X), atol=1e-9)
    fb, fp, fm = (output_diff_upper(n, box, 0) for n in (base, patch, merged))
    for l in fm:
        np.testing.assert_allclose(fm[l].coeffs, fb[l].coeffs + fp[l].coeffs, atol=1e-9)
        assert abs(fm[l].offset - (fb[l].offset + fp[l].offset)) <= 1e-9
    assert isinstance(verify_composite([base, patch], box, 0), Verdict)
