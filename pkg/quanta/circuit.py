# QuanTA - Circuit Module
# Gate plans, their application and materialization, zero-delta adapted layers

import logging
from dataclasses import dataclass, field

import numpy as np

from quanta.constants import ALL_PAIRS, DEFAULT_INIT_SCALE, GAUSSIAN_INIT, INIT_MODES, NEAR_IDENTITY_INIT
from quanta.errors import DimensionMismatchError, NumericalError, PlanValidationError
from quanta.tensor_core import (
    AxisShape, DenseTensor, all_pairs_axes, apply_gate, contract, gen_plan_exprs, reshape_to_axes,
    untouched_axes
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class GateSpec:
    """
    One two-axis tensor and the ordered pair of axes it acts on

    Args:
        axes (tuple[int, int]): Ordered pair (m, n)
        tensor (np.ndarray): Matrix of extent (out_m*out_n) x (in_m*in_n)
        label (int): Position label alpha
        out_dims (tuple[int, int] | None): Output extents for a rectangular gate
    """

    axes: tuple
    tensor: np.ndarray
    label: int = 0
    out_dims: tuple = None

    def __post_init__(self):
        m, n = (int(a) for a in self.axes)
        if m == n:
            raise PlanValidationError(f"gate {self.label} acts twice on axis {m}")
        tensor = np.array(self.tensor, dtype=np.result_type(self.tensor, np.float32))
        if tensor.ndim != 2:
            raise PlanValidationError(f"gate {self.label} must be a matrix, got shape {tensor.shape}")
        if not np.all(np.isfinite(tensor)):
            raise NumericalError(f"gate {self.label} has non-finite entries")
        tensor.flags.writeable = False
        object.__setattr__(self, "axes", (m, n))
        object.__setattr__(self, "tensor", tensor)
        if self.out_dims is not None:
            object.__setattr__(self, "out_dims", tuple(int(d) for d in self.out_dims))

    @property
    def n_params(self):
        return self.tensor.size


@dataclass(frozen=True, eq=False)
class QuantaPlan:
    """
    Ordered gate sequence taking in_shape to out_shape

    Flat inputs of length in_features are padded with zeros or truncated to
    in_shape.total before the circuit; circuit outputs are truncated or
    padded to out_features afterwards.
    """

    in_shape: AxisShape
    gates: tuple = ()
    out_shape: AxisShape = None
    in_features: int = None
    out_features: int = None
    frozen: bool = False
    _shapes: tuple = field(default=(), repr=False)

    def __post_init__(self):
        in_shape = AxisShape.parse(self.in_shape)
        object.__setattr__(self, "in_shape", in_shape)
        object.__setattr__(self, "gates", tuple(self.gates))

        # Trace axis extents through the circuit
        current, shapes = in_shape, []
        for gate in self.gates:
            m, n = gate.axes
            if not (0 <= m < current.n_axes and 0 <= n < current.n_axes):
                raise PlanValidationError(f"gate {gate.label} axes {gate.axes} out of range for {current}")
            dm, dn = current[m], current[n]
            om, on = gate.out_dims or (dm, dn)
            if gate.tensor.shape != (om * on, dm * dn):
                raise PlanValidationError(
                    f"gate {gate.label} on axes {gate.axes} has extent {gate.tensor.shape}, "
                    f"expected {(om * on, dm * dn)} at this position"
                )
            shapes.append(current)
            current = current.replace(m, om).replace(n, on)

        out_shape = current if self.out_shape is None else AxisShape.parse(self.out_shape)
        if out_shape != current:
            raise PlanValidationError(f"gates take {in_shape} to {current}, not {out_shape}")
        object.__setattr__(self, "out_shape", out_shape)
        object.__setattr__(self, "_shapes", tuple(shapes))

        in_features = in_shape.total if self.in_features is None else int(self.in_features)
        out_features = out_shape.total if self.out_features is None else int(self.out_features)
        if in_features < 1 or out_features < 1:
            raise PlanValidationError("feature counts must be positive")
        object.__setattr__(self, "in_features", in_features)
        object.__setattr__(self, "out_features", out_features)

    @property
    def n_gates(self):
        return len(self.gates)

    @property
    def pairs(self):
        return [gate.axes for gate in self.gates]

    @property
    def tensors(self):
        return [gate.tensor for gate in self.gates]

    @property
    def pad_len(self):
        """Zeros appended to flat inputs (negative means truncation)"""
        return self.in_shape.total - self.in_features

    @property
    def trunc_len(self):
        """Entries dropped from circuit outputs (negative means zero padding)"""
        return self.out_shape.total - self.out_features

    @property
    def is_square(self):
        return self.in_shape == self.out_shape and self.in_features == self.out_features

    @property
    def dtype(self):
        if not self.gates:
            return np.dtype(np.float64)
        return np.result_type(*self.tensors)

    def gate_input_shape(self, index):
        """Axis shape of the tensor entering gate `index`"""
        return self._shapes[index]

    def exprs(self):
        """Apply and operator expressions for this gate list"""
        return gen_plan_exprs(self.in_shape.n_axes, self.pairs)

    def gate_tensor4(self, index):
        """Gate `index` reshaped to [out_m, out_n, in_m, in_n]"""
        gate = self.gates[index]
        shape = self._shapes[index]
        dm, dn = shape[gate.axes[0]], shape[gate.axes[1]]
        om, on = gate.out_dims or (dm, dn)
        return gate.tensor.reshape(om, on, dm, dn)

    def with_tensors(self, tensors, frozen=None):
        """Return a structurally identical plan carrying new gate values"""
        if len(tensors) != len(self.gates):
            raise PlanValidationError(f"expected {len(self.gates)} tensors, got {len(tensors)}")
        gates = [
            GateSpec(gate.axes, tensor, gate.label, gate.out_dims)
            for gate, tensor in zip(self.gates, tensors)
        ]
        return QuantaPlan(
            self.in_shape, gates, self.out_shape, self.in_features, self.out_features,
            self.frozen if frozen is None else frozen
        )


@dataclass(frozen=True)
class GateCost:
    """Cost of one gate"""

    label: int
    axes: tuple
    params: int
    flops_per_token: int


@dataclass(frozen=True)
class ComplexityReport:
    """Trainable parameters and multiply-adds per token of a plan"""

    trainable_params: int
    flops_per_token: int
    per_gate: tuple


def stack_rounds(pairs, rounds):
    """Repeat a gate layout `rounds` times"""
    if rounds < 1:
        raise PlanValidationError(f"rounds must be >= 1, got {rounds}")
    return list(pairs) * rounds


def _scheme_pairs(shape, scheme):
    if isinstance(scheme, str):
        if scheme != ALL_PAIRS:
            raise PlanValidationError(f"unknown scheme {scheme!r}")
        if shape.n_axes < 2:
            raise PlanValidationError("the all-pairs scheme needs at least two axes")
        return all_pairs_axes(shape.n_axes)
    return list(scheme)


def build_plan(shape, scheme=ALL_PAIRS, seed=0, init_scale=DEFAULT_INIT_SCALE, rounds=1,
               dtype=np.float64, init=GAUSSIAN_INIT):
    """
    Build a square plan with Gaussian gates

    Entries are i.i.d. normal with standard deviation init_scale / sqrt(d_m*d_n).
    With init="near-identity" that noise is added to the identity instead.

    Args:
        shape (AxisShape | str): Axis factorization
        scheme (str | list): "all-pairs", a list of (m, n) pairs, or a list of GateSpec
        seed (int): Random seed
        init_scale (float): Gate scale
        rounds (int): Number of repetitions of the layout
        dtype: Scalar type of the gates
        init (str): "gaussian" or "near-identity"

    Returns:
        QuantaPlan: The new plan
    """
    if init not in INIT_MODES:
        raise PlanValidationError(f"init must be one of {INIT_MODES}, got {init!r}")
    shape = AxisShape.parse(shape)
    pairs = _scheme_pairs(shape, scheme)

    # Explicit gates are taken as given
    if pairs and all(isinstance(p, GateSpec) for p in pairs):
        return QuantaPlan(shape, stack_rounds(pairs, rounds))

    rng = np.random.default_rng(seed)
    gates = []
    for label, (m, n) in enumerate(stack_rounds(pairs, rounds)):
        if not (0 <= m < shape.n_axes and 0 <= n < shape.n_axes):
            raise PlanValidationError(f"gate axes {(m, n)} out of range for {shape}")
        k = shape[m] * shape[n]
        tensor = rng.standard_normal((k, k)) * (init_scale / np.sqrt(k))
        if init == NEAR_IDENTITY_INIT:
            tensor += np.eye(k)
        gates.append(GateSpec((m, n), tensor.astype(dtype), label))
    return QuantaPlan(shape, gates)


def identity_plan(shape, scheme=ALL_PAIRS, rounds=1):
    """Plan whose every gate is the identity"""
    shape = AxisShape.parse(shape)
    gates = []
    for label, (m, n) in enumerate(stack_rounds(_scheme_pairs(shape, scheme), rounds)):
        gates.append(GateSpec((m, n), np.eye(shape[m] * shape[n]), label))
    return QuantaPlan(shape, gates)


def build_rect_plan(in_shape, out_shape, in_features=None, out_features=None, scheme=ALL_PAIRS,
                    seed=0, init_scale=DEFAULT_INIT_SCALE, rounds=1):
    """
    Build a plan between different axis shapes

    The first gate touching an axis whose extent differs between in_shape
    and out_shape converts that axis; with shapes differing only on axis 0
    this places the rectangular gate on the first axis. Feature counts that
    differ from the axis totals are handled by padding and truncation.

    Args:
        in_shape (AxisShape | str): Input factorization
        out_shape (AxisShape | str): Output factorization, same axis count
        in_features (int | None): Base input extent, defaults to in_shape.total
        out_features (int | None): Base output extent, defaults to out_shape.total
        scheme (str | list): Gate layout
        seed (int): Random seed
        init_scale (float): Gate scale
        rounds (int): Number of repetitions of the layout

    Returns:
        QuantaPlan: The new plan
    """
    in_shape, out_shape = AxisShape.parse(in_shape), AxisShape.parse(out_shape)
    if in_shape.n_axes != out_shape.n_axes:
        raise PlanValidationError(f"{in_shape} and {out_shape} have different axis counts")
    pairs = stack_rounds(_scheme_pairs(in_shape, scheme), rounds)

    rng = np.random.default_rng(seed)
    current, gates = in_shape, []
    for label, (m, n) in enumerate(pairs):
        dm, dn = current[m], current[n]
        om, on = out_shape[m], out_shape[n]
        tensor = rng.standard_normal((om * on, dm * dn)) * (init_scale / np.sqrt(dm * dn))
        gates.append(GateSpec((m, n), tensor, label, (om, on)))
        current = current.replace(m, om).replace(n, on)

    return QuantaPlan(in_shape, gates, out_shape, in_features, out_features)


def resize_features(x, length):
    """Zero-pad or truncate the last axis to `length`"""
    if x.shape[-1] == length:
        return x
    if x.shape[-1] > length:
        return x[..., :length]
    pad = [(0, 0)] * (x.ndim - 1) + [(0, length - x.shape[-1])]
    return np.pad(x, pad)


def _run_gates(plan, tensor, fixed_order):
    for gate in plan.gates:
        tensor = apply_gate(tensor, gate.tensor, gate.axes, gate.out_dims, fixed_order)
    return tensor


def apply(plan, x, fixed_order=False):
    """
    Apply the plan's gates in order

    Args:
        plan (QuantaPlan): Circuit to apply
        x (DenseTensor | np.ndarray): Axis tensor of in_shape, or flat vectors
            whose last axis has length in_features
        fixed_order (bool): Use the fixed accumulation order of apply_gate

    Returns:
        DenseTensor | np.ndarray: Same kind as x
    """
    if isinstance(x, DenseTensor):
        if x.shape != plan.in_shape:
            raise DimensionMismatchError(f"tensor axes {x.shape} do not match plan input {plan.in_shape}")
        return _run_gates(plan, x, fixed_order)

    x = np.asarray(x)
    if x.ndim == 0 or x.shape[-1] != plan.in_features:
        raise DimensionMismatchError(
            f"input of shape {x.shape} does not have {plan.in_features} features"
        )
    tensor = reshape_to_axes(resize_features(x, plan.in_shape.total), plan.in_shape)
    y = _run_gates(plan, tensor, fixed_order).flatten()
    return resize_features(y, plan.out_features)


def apply_fused(plan, x, fixed_order=False):
    """Apply the whole circuit with a single contraction (same result as apply)"""
    if not plan.gates:
        return apply(plan, x)
    flat = not isinstance(x, DenseTensor)
    if flat:
        x = np.asarray(x)
        if x.ndim == 0 or x.shape[-1] != plan.in_features:
            raise DimensionMismatchError(f"input of shape {x.shape} does not have {plan.in_features} features")
        tensor = reshape_to_axes(resize_features(x, plan.in_shape.total), plan.in_shape)
    else:
        tensor = x

    expr, _ = plan.exprs()
    operands = [tensor] + [plan.gate_tensor4(i) for i in range(plan.n_gates)]
    y = DenseTensor(contract(expr, operands, fixed_order), plan.out_shape)
    if not flat:
        return y
    return resize_features(y.flatten(), plan.out_features)


def materialize(plan, fixed_order=False):
    """
    Full operator matrix of extent out_features x in_features

    The gates are contracted without any state; for every x,
    materialize(plan) @ x equals apply(plan, x) up to rounding.
    """
    if plan.gates:
        _, op_expr = plan.exprs()
        operands = [plan.gate_tensor4(i) for i in range(plan.n_gates)]
        operands += [np.eye(plan.in_shape[p], dtype=plan.dtype)
                     for p in untouched_axes(plan.in_shape.n_axes, plan.pairs)]
        full = contract(op_expr, operands, fixed_order).reshape(plan.out_shape.total, plan.in_shape.total)
    else:
        full = np.eye(plan.in_shape.total)

    if full.shape == (plan.out_features, plan.in_features):
        return full

    # Pad/truncate to the base extent
    result = np.zeros((plan.out_features, plan.in_features), dtype=full.dtype)
    rows = min(plan.out_features, full.shape[0])
    cols = min(plan.in_features, full.shape[1])
    result[:rows, :cols] = full[:rows, :cols]
    return result


def init_zero_delta(plan):
    """
    Split a plan into a trainable copy and a frozen copy with identical values

    Returns:
        tuple[QuantaPlan, QuantaPlan]: (trainable, frozen)
    """
    tensors = [t.copy() for t in plan.tensors]
    return plan.with_tensors(tensors, frozen=False), plan.with_tensors(tensors, frozen=True)


def cost(plan):
    """
    Count trainable parameters and multiply-adds per token

    A gate on axes (m, n) entered by a tensor of total size D costs
    D * out_m * out_n multiply-adds, which is d * d_m * d_n for square gates.
    """
    per_gate = []
    for index, gate in enumerate(plan.gates):
        shape = plan.gate_input_shape(index)
        rows = gate.tensor.shape[0]
        per_gate.append(GateCost(gate.label, gate.axes, gate.n_params, shape.total * rows))
    return ComplexityReport(
        trainable_params=sum(g.params for g in per_gate),
        flops_per_token=sum(g.flops_per_token for g in per_gate),
        per_gate=tuple(per_gate),
    )


class AdaptedLinear:
    """
    Linear layer with a QuanTA update: y = W0 x + T x - S x

    In merged form the frozen operator S is folded into the weight,
    W0' = W0 - S, and y = W0' x + T x.

    Args:
        base (np.ndarray): Base weight W0 of extent out_dim x in_dim
        plan (QuantaPlan): Trainable plan T
        frozen_plan (QuantaPlan | None): Frozen plan S, kept only in unmerged form
        fixed_order (bool): Evaluate gates in the fixed accumulation order
    """

    def __init__(self, base, plan, frozen_plan=None, fixed_order=False):
        self.base = np.asarray(base)
        if self.base.ndim != 2:
            raise DimensionMismatchError(f"base weight must be a matrix, got shape {self.base.shape}")
        if (plan.out_features, plan.in_features) != self.base.shape:
            raise DimensionMismatchError(
                f"plan maps {plan.in_features} -> {plan.out_features}, base is {self.base.shape}"
            )
        self.plan = plan
        self.frozen_plan = frozen_plan
        self.fixed_order = fixed_order
        self.weight = self.base
        self.merged_offset_applied = False

    @classmethod
    def from_base(cls, base, plan, keep_frozen=False, fixed_order=False):
        """
        Adapt a base weight with zero-delta initialization

        Args:
            base (np.ndarray): Base weight W0
            plan (QuantaPlan): Initial gate values, shared by T and S
            keep_frozen (bool): Keep the three-term form instead of merging S

        Returns:
            AdaptedLinear: Layer whose forward equals the base forward
        """
        trainable, frozen = init_zero_delta(plan)
        layer = cls(base, trainable, frozen, fixed_order)
        if not keep_frozen:
            layer.merge_frozen()
        return layer

    def merge_frozen(self):
        """Fold S into the weight and drop it"""
        if self.merged_offset_applied:
            return
        if self.frozen_plan is not None:
            self.weight = self.base - materialize(self.frozen_plan, self.fixed_order)
        self.frozen_plan = None
        self.merged_offset_applied = True
        logger.debug("merged frozen operator into base weight of shape %s", self.base.shape)

    def forward(self, x):
        """Adapted output for flat inputs of shape (..., in_dim)"""
        x = np.asarray(x)
        base_out = x @ self.weight.T
        delta = apply(self.plan, x, self.fixed_order)
        if not self.merged_offset_applied and self.frozen_plan is not None:
            delta = delta - apply(self.frozen_plan, x, self.fixed_order)
        return base_out + delta

    def delta_matrix(self):
        """Materialized update relative to the original base weight"""
        return merge(self) - self.base


def merge(adapted):
    """
    Dense weight equivalent to the adapted layer

    Returns:
        np.ndarray: W0' + T in merged form, W0 + (T - S) otherwise
    """
    trained = materialize(adapted.plan, adapted.fixed_order)
    if adapted.merged_offset_applied:
        return adapted.weight + trained
    if adapted.frozen_plan is None:
        return adapted.base + trained
    return adapted.base + (trained - materialize(adapted.frozen_plan, adapted.fixed_order))
