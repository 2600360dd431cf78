"""Provable local-robustness repair of ReLU networks with additive patch modules."""
from .attacks import AttackConfig, fgsm, pgd
from .deeppoly import BoxRegion, LinearForm, Verdict, affine_box_max, analyze, output_diff_upper, verify
from .fileio import ParseError, PropertySpec, load_network, load_properties, read_nnet, save_network
from .netcore import Affine, Dnn, Relu, ShapeError, SplitNetwork, classify, forward, input_gradient, split
from .patched import RepairedDnn, load_bundle, save_bundle
from .repair import Anchor, Mode, RepairConfig, RepairReport, RobustnessProperty, repair, train_patch
from .viloss import LossMode, PatchModule, composite_bounds, loss_gradient, violation_loss

__version__ = "0.1.0"
