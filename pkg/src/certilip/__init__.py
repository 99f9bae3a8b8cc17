"""Certified robustness radii, box-constrained adversarial samples and
Cross-Lipschitz regularised training for linear, Gaussian-kernel and
one-hidden-layer softplus classifiers."""

from .attack import (
    AdversarialSample,
    BoxLinearProblem,
    adversarial_resistance,
    attack_boundary_search,
    attack_linearized,
    solve_box,
    solve_box_l1,
    solve_box_l2,
    solve_box_linf,
)
from .certify import (
    GuaranteeReport,
    cross_lip_bound_kernel,
    cross_lip_bound_nn,
    cross_lip_global_nn,
    guarantee,
    kernel_ball_extrema,
    linear_guarantee,
    local_global_ratio,
)
from .data import LabeledDataset, generate, load_dataset, mnist_sample
from .errors import CertilipError, NumericalError, ValidationError
from .model import (
    GaussianKernelModel,
    LinearModel,
    OneHiddenLayerModel,
    input_gradient,
    load_model,
    predict,
    save_model,
    softplus,
    softplus_prime,
    spectral_norm,
)
from .train import TrainConfig, TrainReport, cross_entropy, omega_cross_lip, train, train_kernel, train_nn

__version__ = "0.1.0"
