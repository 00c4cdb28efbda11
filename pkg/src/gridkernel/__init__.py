"""Gaussian-process voltage models for power grids under topology changes.

Vertex-degree kernels (VDK), hyperparameter transfer and multi-task VDK
across contingency topologies, plus probabilistic voltage envelopes.
"""

from .errors import GridKernelError, NumericalError, ValidationError
from .netcase import GridCase, Topology, apply_outage, base_topology, build_ybus, load_case
from .acpf import enumerate_feasible, generate_dataset, sample_injections, solve_nr
from .kernels import Hyperparameters, KernelSpec
from .gpr import GpModel, TrainingSet, fit, predict
from .transfer import SourceRegistry, htl_init, train_htl, train_mt, train_sources, train_vdk
from .pve import PveConfig, build_envelopes

__version__ = "0.1.0"

__all__ = [
    "GridKernelError", "NumericalError", "ValidationError",
    "GridCase", "Topology", "apply_outage", "base_topology", "build_ybus", "load_case",
    "enumerate_feasible", "generate_dataset", "sample_injections", "solve_nr",
    "Hyperparameters", "KernelSpec", "GpModel", "TrainingSet", "fit", "predict",
    "SourceRegistry", "htl_init", "train_htl", "train_mt", "train_sources", "train_vdk",
    "PveConfig", "build_envelopes",
]
