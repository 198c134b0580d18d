"""Clustered offline policy evaluation and iteration for heterogeneous trajectory populations."""

__version__ = "0.1.0"

from .acpi import ACPIConfig, ACPIResult, ImproveConfig, improve_policy, run_acpi
from .admm import ADMMConfig, ADMMResult, solve
from .basis import BasisSpec, FeatureContext, parse_basis
from .data import (Schema, SoftmaxPolicy, TabularPolicy, Trajectory, TrajectoryBatch, load_batch,
                   load_policy, save_batch, save_policy)
from .errors import (ConfigError, DataError, DomainError, HetRLError, IllPosedError, IntegrityError,
                     NumericalError, SchemaError)
from .grouping import (GroupAssignment, GroupingConfig, InferenceResult, detect_groups, group_coefficients,
                       integrated_value, refit_groups, run_acpe, value_estimates)
from .moment import MomentSystem, assemble, pooled_loss_minimizer, sandwich, solve_group
from .penalty import PenaltyConfig, delta_prox, parse_penalty, penalty_value
from .sim import SimSpec, generate, mc_true_value, reference_sample

__all__ = [name for name in dir() if not name.startswith("_")]
