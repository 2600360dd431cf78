"""The two-neuron worked example used as a regression and a CLI demo."""
from __future__ import annotations

import numpy as np

from .deeppoly import BoxRegion, LinearForm
from .netcore import Dnn
from .repair import RepairConfig
from .viloss import BaseForms, PatchModule

# Classes are 0-based here: the example's "class 2" is index 1.
TOY_ANCHOR = np.array([-0.7, 1.0])
TOY_ADVERSARIAL = np.array([-0.2, 1.5])
TOY_RADIUS = 0.5
TOY_LABEL = 1
TOY_GIVEN_FORM = LinearForm(np.array([0.7, 0.14]), 1.08)


def toy_network() -> Dnn:
    """2-2-2 ReLU network without biases."""
    return Dnn.from_arrays(
        [np.array([[0.8, 1.1], [1.4, 1.2]]), np.array([[-0.8, 0.4], [1.1, -1.1]])],
        [np.zeros(2), np.zeros(2)],
    )


def toy_box() -> BoxRegion:
    return BoxRegion.from_center(TOY_ANCHOR, TOY_RADIUS)


class FixedBaseForms:
    """Base-branch bounds that ignore the box and return one given form per wrong class.

    The worked example states its base bound as a given affine form; this
    provider feeds that form to the loss algebra instead of the analyser.
    """

    def __init__(self, label: int, forms: dict[int, LinearForm]):
        self.label = label
        self.forms = BaseForms.from_forms(label, forms)

    def __call__(self, box: BoxRegion, label: int) -> BaseForms:
        if label != self.label:
            raise ValueError(f"fixed forms are defined for label {self.label}, not {label}")
        return self.forms


def toy_given_forms() -> FixedBaseForms:
    return FixedBaseForms(TOY_LABEL, {0: TOY_GIVEN_FORM})


def toy_patch(init: float = 0.1) -> PatchModule:
    return PatchModule.affine(2, 2, init, use_bias=False)


def toy_config(**overrides) -> RepairConfig:
    doc = dict(max_iterations=2, max_epochs=1, learning_rate=0.6, slice_k=800, patch_init=0.1,
               patch_bias=False, trace_weights=True)
    doc.update(overrides)
    return RepairConfig(**doc)
