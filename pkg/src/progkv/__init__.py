"""Progressive mixed-precision KV-cache quantization toolkit."""

from .allocate import AllocationPlan, brute_force, solve
from .cache import CacheConfig, KVBlockCache, Ledger, kv_cache_bytes, mem_bytes, required_budget
from .calib import (
    Quantizer,
    ReparamFactors,
    RopeConfig,
    calibrate,
    channel_period,
    effective_length,
    grid_search_alpha,
    reparam_apply,
    reparam_factors,
    rope,
)
from .errors import (
    CapacityError,
    ConfigError,
    EmptyStateError,
    InfeasibleBudgetError,
    NumericError,
    ProgKVError,
    TensorFormatError,
    TensorLengthError,
)
from .quant import (
    GroupSpec,
    PackedTensor,
    QuantParams,
    dequantize_group,
    dequantize_tensor,
    pack,
    quantize_group,
    quantize_tensor,
    unpack,
)
from .sensitivity import SensitivityTable, fd_gradient, sensitivity, taylor_check
from .shrink import shrink_chain, shrink_direct, shrink_equivalent, shrink_modified
from .simulate import DecodeTrace, Policy, StreamSpec, compare_strategies, report, run
from .tensorio import Tensor, read_tensor, synth_kv_stream, write_tensor

__version__ = "0.1.0"
