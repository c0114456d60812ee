"""Action-space channel-wise mixed-precision quantization for small policy networks."""

from .allocator import (
    BitAllocation,
    InfeasibleBudget,
    PruneGuard,
    average_bits,
    brute_force_allocate,
    greedy_allocate,
)
from .calibration import CalibrationSet
from .model import ChannelId, Layer, PolicyModel, channels, forward
from .quant import QuantizedModel, apply_allocation
from .sensitivity import SensitivityTable, exact_single_step, proxy_sensitivity, two_stage_scores
from .simenv import EnvConfig, make_calibration, reference_policy, rollout_pair

__version__ = "0.1.0"

__all__ = [
    "BitAllocation",
    "CalibrationSet",
    "ChannelId",
    "EnvConfig",
    "InfeasibleBudget",
    "Layer",
    "PolicyModel",
    "PruneGuard",
    "QuantizedModel",
    "SensitivityTable",
    "apply_allocation",
    "average_bits",
    "brute_force_allocate",
    "channels",
    "exact_single_step",
    "forward",
    "greedy_allocate",
    "make_calibration",
    "proxy_sensitivity",
    "reference_policy",
    "rollout_pair",
    "two_stage_scores",
]
