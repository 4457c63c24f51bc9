"""ConvLSTM sequence classifiers on a small numpy autodiff engine."""

from .arch import ArchSpec, build_model, census, full_scale_spec, reduced_spec
from .data import SyntheticTaskSpec, generate_synthetic_dataset
from .probe import ProbeConfig, run_probe
from .tensor import Tensor, finite_diff_check, no_grad

__version__ = "0.1.0"

__all__ = [
    "ArchSpec", "ProbeConfig", "SyntheticTaskSpec", "Tensor", "build_model", "census",
    "finite_diff_check", "full_scale_spec", "generate_synthetic_dataset", "no_grad",
    "reduced_spec", "run_probe",
]
