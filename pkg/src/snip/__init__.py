"""Structured pruning of transformer encoders through epsilon-gated strict identities."""

from .autograd import ConfigurationError, ContractError, DimensionError, Graph, Tensor
from .gates import ActivationStats, BlockId, GateConfig, identity_rate, s_epsilon, t_epsilon
from .model import Architecture, ModelConfig, ModelParams, count_flops, count_params, model_forward
from .pruning import PruneConfig, run_schedule
from .spectral import estimate_spectral_norm, normalize_weight

__version__ = "0.1.0"
