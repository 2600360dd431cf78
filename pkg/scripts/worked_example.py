"""Replay the two-neuron worked example step by step and print every intermediate value."""
import numpy as np

from patchrepair.examples import (TOY_ANCHOR, TOY_LABEL, TOY_RADIUS, toy_box, toy_config, toy_given_forms,
                                 toy_network, toy_patch)
from patchrepair.repair import Anchor, RobustnessProperty, bisect_property, repair, train_patch
from patchrepair.viloss import composite_bounds, loss_gradient, violation_loss


def main() -> None:
    np.set_printoptions(precision=6, suppress=True)
    box, given, patch = toy_box(), toy_given_forms(), toy_patch(0.1)
    cb = composite_bounds(given(box, TOY_LABEL), patch, box, TOY_LABEL)
    lv = violation_loss(cb, box)
    print("box", box.lower, box.upper)
    print("loss at init", lv.total, "terms", lv.terms)
    print("gradient", loss_gradient(cb, box, patch, loss=lv)[0][0].ravel())
    a, b = bisect_property(RobustnessProperty(box, TOY_LABEL, 0), lv)
    print("init split", (a.box.lower, a.box.upper), (b.box.lower, b.box.upper))
    out = train_patch(given, patch, [RobustnessProperty(box, TOY_LABEL, 0)], toy_config())
    print("after one step\n", out.patch.parameters()[0][0], "\nlosses", out.losses)
    for name, provider in (("given forms", given), ("analyzer", None)):
        _, rep = repair(toy_network(), [Anchor(TOY_ANCHOR, TOY_LABEL)], TOY_RADIUS,
                        toy_config(max_iterations=25), base_bounds=provider, initial_patches=[toy_patch()])
        print(f"{name}: provable={rep.provable} iterations={rep.iterations}")



if __name__ == "__main__":
    main()
