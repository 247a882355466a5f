# QuanTA - LoRA Module
# Low-rank reference adapter: delta(x) = (alpha / r) * B A x

import logging
from dataclasses import dataclass

import numpy as np

from quanta.constants import LORA_ALPHA, LORA_INIT_SCALE
from quanta.errors import DimensionMismatchError, InvalidArgumentError, NumericalError

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class LoraAdapter:
    """
    Low-rank adapter with A of extent r x in_dim and B of extent out_dim x r

    Args:
        A (np.ndarray): Down projection
        B (np.ndarray): Up projection
        alpha (float): Scaling numerator
    """

    A: np.ndarray
    B: np.ndarray
    alpha: float = LORA_ALPHA

    def __post_init__(self):
        A = np.array(self.A, dtype=np.result_type(self.A, np.float32))
        B = np.array(self.B, dtype=np.result_type(self.B, np.float32))
        if A.ndim != 2 or B.ndim != 2 or B.shape[1] != A.shape[0]:
            raise DimensionMismatchError(f"LoRA factors do not chain: A {A.shape}, B {B.shape}")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
            raise NumericalError("LoRA factors have non-finite entries")
        A.flags.writeable = False
        B.flags.writeable = False
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "alpha", float(self.alpha))

    @property
    def rank(self):
        return self.A.shape[0]

    @property
    def in_dim(self):
        return self.A.shape[1]

    @property
    def out_dim(self):
        return self.B.shape[0]

    @property
    def scaling(self):
        return self.alpha / self.rank if self.rank else 0.0

    def with_factors(self, A, B):
        """Return an adapter with new factor values"""
        return LoraAdapter(A, B, self.alpha)


def init_lora(in_dim, out_dim, rank, alpha=LORA_ALPHA, seed=0, init_scale=LORA_INIT_SCALE,
              dtype=np.float64):
    """
    Standard initialization: A Gaussian, B zero, so the delta starts at zero

    Args:
        in_dim (int): Input extent
        out_dim (int): Output extent
        rank (int): Rank r
        alpha (float): Scaling numerator
        seed (int): Random seed
        init_scale (float): A entries have std init_scale / sqrt(in_dim)
        dtype: Scalar type

    Returns:
        LoraAdapter: Zero-delta adapter
    """
    if rank < 0 or in_dim < 1 or out_dim < 1:
        raise InvalidArgumentError(f"invalid LoRA extents r={rank}, in={in_dim}, out={out_dim}")
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((rank, in_dim)) * (init_scale / np.sqrt(in_dim))
    B = np.zeros((out_dim, rank))
    return LoraAdapter(A.astype(dtype), B.astype(dtype), alpha)


def lora_apply(adapter, x):
    """
    Delta for flat inputs of shape (..., in_dim)

    Returns:
        np.ndarray: (alpha / r) * B A x with shape (..., out_dim)
    """
    x = np.asarray(x)
    if x.ndim == 0 or x.shape[-1] != adapter.in_dim:
        raise DimensionMismatchError(f"input of shape {x.shape} does not have {adapter.in_dim} features")
    return adapter.scaling * ((x @ adapter.A.T) @ adapter.B.T)


def lora_delta(adapter):
    """Materialized update (alpha / r) * B A"""
    return adapter.scaling * (adapter.B @ adapter.A)


def lora_merge(adapter, base):
    """Base weight plus the materialized update"""
    base = np.asarray(base)
    if base.shape != (adapter.out_dim, adapter.in_dim):
        raise DimensionMismatchError(f"base {base.shape} does not match adapter {adapter.out_dim}x{adapter.in_dim}")
    return base + lora_delta(adapter)


def lora_param_count(rank, in_dim, out_dim):
    """Trainable parameters r * (in_dim + out_dim)"""
    if rank < 0 or in_dim < 0 or out_dim < 0:
        raise InvalidArgumentError(f"invalid LoRA extents r={rank}, in={in_dim}, out={out_dim}")
    return rank * (in_dim + out_dim)
