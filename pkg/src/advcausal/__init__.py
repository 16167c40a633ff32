"""Adversarial double machine learning on small differentiable classifiers."""

from .attacks import AttackConfig, WorstBatch, bim, cw_inf, fgsm, pgd, project_linf, select_worst
from .causal import (CausalEstimate, PropensityEstimate, approx_propensity, estimate_theta,
                     finite_diff_theta, interventional_expectation, relative_ratio)
from .datasets import DatasetPair, LabeledDataset, SyntheticSpec, gen_synthetic, load_csv, load_idx
from .defenses import DefenseConfig, adml_loss, at_loss, balancing_ratio, split_and_crossfit, train_adml, train_at
from .errors import (AdvCausalError, ConfigError, ContractError, DegenerateDenominatorError, DimensionError,
                     FormatError, NumericalError)
from .models import Classifier, ClassifierSpec, TrainConfig, grad_wrt_input, init_classifier
from .report import RobustnessReport, bottom_k_cumulative, emit_plot_svg, emit_report, robust_accuracy
from .tensor import Tape, Tensor

__version__ = "0.1.0"
