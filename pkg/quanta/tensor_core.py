# QuanTA - Tensor Core Module
# Axis-factored tensors, two-axis gate application and einsum expression generation

import itertools
import logging
import math
import re
from dataclasses import dataclass

import numpy as np
import opt_einsum as oe

from quanta.errors import (
    ContractionError, DimensionMismatchError, InvalidArgumentError, PlanValidationError
)

logger = logging.getLogger(__name__)

# Subscript alphabet: 0 -> 'a', 1 -> 'b', ..., 51 -> 'Z', then unicode code points
get_symbol = oe.get_symbol


@dataclass(frozen=True)
class AxisShape:
    """Factorization d = d1 x d2 x ... x dN of a hidden dimension"""

    dims: tuple

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) < 1:
            raise DimensionMismatchError("an axis shape needs at least one axis")
        if any(d < 1 for d in dims):
            raise DimensionMismatchError(f"axis extents must be positive, got {dims}")
        object.__setattr__(self, "dims", dims)

    @classmethod
    def parse(cls, text):
        """
        Build a shape from "16-8-8-4", "16x8x8x4" or a list of integers

        Args:
            text (str | list[int]): Shape description

        Returns:
            AxisShape: The parsed shape
        """
        if isinstance(text, AxisShape):
            return text
        if isinstance(text, str):
            parts = [p for p in re.split(r"[-x,\s]+", text.strip()) if p]
            try:
                return cls(tuple(int(p) for p in parts))
            except ValueError:
                raise DimensionMismatchError(f"cannot parse axis shape {text!r}") from None
        return cls(tuple(text))

    @property
    def total(self):
        return math.prod(self.dims)

    @property
    def n_axes(self):
        return len(self.dims)

    def __len__(self):
        return len(self.dims)

    def __getitem__(self, axis):
        return self.dims[axis]

    def __str__(self):
        return "-".join(str(d) for d in self.dims)

    def replace(self, axis, extent):
        """Return a copy with one axis extent changed"""
        dims = list(self.dims)
        dims[axis] = extent
        return AxisShape(tuple(dims))


def factorize(d, n_axes):
    """
    Propose a near-balanced factorization of d into n_axes factors

    Prime factors are handed out largest first to the currently smallest
    factor, so 4096 splits into 16-16-16 for three axes and 8-8-8-8 for four.

    Args:
        d (int): Hidden dimension
        n_axes (int): Number of axes

    Returns:
        AxisShape: Factors in non-increasing order
    """
    if d < 1 or n_axes < 1:
        raise InvalidArgumentError(f"cannot factorize {d} into {n_axes} axes")

    # Trial division is fine for hidden sizes
    primes, rest, p = [], d, 2
    while p * p <= rest:
        while rest % p == 0:
            primes.append(p)
            rest //= p
        p += 1
    if rest > 1:
        primes.append(rest)

    factors = [1] * n_axes
    for prime in sorted(primes, reverse=True):
        smallest = factors.index(min(factors))
        factors[smallest] *= prime
    return AxisShape(tuple(sorted(factors, reverse=True)))


@dataclass(frozen=True, eq=False)
class DenseTensor:
    """Row-major tensor with leading batch axes followed by the axes of `shape`"""

    data: np.ndarray
    shape: AxisShape

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim < self.shape.n_axes or data.shape[data.ndim - self.shape.n_axes:] != self.shape.dims:
            raise DimensionMismatchError(
                f"array of shape {data.shape} does not end with axes {self.shape.dims}"
            )
        view = data.view()
        view.flags.writeable = False
        object.__setattr__(self, "data", view)

    @property
    def batch_shape(self):
        return self.data.shape[:self.data.ndim - self.shape.n_axes]

    def flatten(self):
        """Return the data as (*batch, total) in row-major order"""
        return self.data.reshape(self.batch_shape + (self.shape.total,))


@dataclass(frozen=True)
class EinsumExpr:
    """Contraction expression with its operand count"""

    text: str
    operand_count: int

    def __str__(self):
        return self.text


def reshape_to_axes(vector, shape):
    """
    Reshape a flat vector (or a stack of them) into axis form

    Leading array axes stay batch axes. If the last axis holds several
    copies of `shape.total` the remainder becomes one more batch axis.

    Args:
        vector (np.ndarray): Array whose last axis length is a multiple of shape.total
        shape (AxisShape): Target axis shape

    Returns:
        DenseTensor: Tensor of shape (*batch, d1, ..., dN)
    """
    shape = AxisShape.parse(shape)
    arr = np.asarray(vector)
    if arr.ndim == 0:
        raise DimensionMismatchError("cannot reshape a scalar into axes")

    length = arr.shape[-1]
    if length % shape.total != 0:
        raise DimensionMismatchError(
            f"length {length} is not divisible by axis total {shape.total} ({shape})"
        )

    batch = arr.shape[:-1]
    if length != shape.total:
        batch = batch + (length // shape.total,)
    return DenseTensor(arr.reshape(batch + shape.dims), shape)


def flatten(tensor):
    """Inverse of reshape_to_axes for a DenseTensor"""
    return tensor.flatten()


def _check_gate_axes(shape, axes):
    """Validate an ordered axis pair against a shape"""
    if len(axes) != 2:
        raise PlanValidationError(f"a gate acts on exactly two axes, got {axes}")
    m, n = (int(a) for a in axes)
    if m == n:
        raise PlanValidationError(f"gate axes must differ, got ({m}, {n})")
    for axis in (m, n):
        if not 0 <= axis < shape.n_axes:
            raise PlanValidationError(f"axis {axis} out of range for shape {shape}")
    return m, n


def apply_gate(x, gate, axes, out_dims=None, fixed_order=False):
    """
    Apply a two-axis gate to an axis-factored tensor

    y[..., i_m, ..., i_n, ...] = sum_{j_m, j_n} T[i_m, i_n; j_m, j_n] x[..., j_m, ..., j_n, ...]

    Args:
        x (DenseTensor): Input tensor
        gate (np.ndarray): Matrix of extent (out_m*out_n) x (d_m*d_n)
        axes (tuple[int, int]): Ordered pair (m, n) of zero-based axes
        out_dims (tuple[int, int] | None): Output extents of the two axes, defaults to square
        fixed_order (bool): Accumulate column by column so every output element is
            computed identically whatever the batch extent

    Returns:
        DenseTensor: Output tensor; same shape as x for square gates
    """
    m, n = _check_gate_axes(x.shape, axes)
    gate = np.asarray(gate)
    dm, dn = x.shape[m], x.shape[n]
    om, on = (dm, dn) if out_dims is None else (int(out_dims[0]), int(out_dims[1]))
    if gate.shape != (om * on, dm * dn):
        raise PlanValidationError(
            f"gate extent {gate.shape} does not match axes ({m}, {n}) "
            f"with extents {dm}x{dn} -> {om}x{on}"
        )

    b = len(x.batch_shape)
    out_shape = x.shape.replace(m, om).replace(n, on)

    if fixed_order:
        moved = np.moveaxis(x.data, (b + m, b + n), (-2, -1))
        lead = moved.shape[:-2]
        vecs = moved.reshape(lead + (dm * dn,))
        acc = np.zeros(lead + (om * on,), dtype=np.result_type(vecs, gate))
        for j in range(dm * dn):
            acc += vecs[..., j, None] * gate[:, j]
        y = np.moveaxis(acc.reshape(lead + (om, on)), (-2, -1), (b + m, b + n))
    else:
        t = gate.reshape(om, on, dm, dn)
        y = np.tensordot(x.data, t, axes=([b + m, b + n], [2, 3]))
        y = np.moveaxis(y, (-2, -1), (b + m, b + n))

    return DenseTensor(np.ascontiguousarray(y), out_shape)


def all_pairs_axes(n_axes):
    """
    Axis pairs of the all-pairs layout in application order

    Pairs follow itertools.combinations over the negative axes -1, -2, ..., -N,
    mapped to zero-based positive axes (m, n) with m < n. For N = 3 the order
    is (1, 2), (0, 2), (0, 1).
    """
    return [
        (n_axes + second, n_axes + first)
        for first, second in itertools.combinations(range(-1, -n_axes - 1, -1), 2)
    ]


def gen_plan_exprs(n_axes, pairs):
    """
    Generate the apply and operator expressions for any ordered gate list

    Every time a gate touches axis p, the symbol index on that axis advances
    by N, so indices on axis p stay congruent to p mod N and never collide.
    Axes no gate touches get a fresh output symbol in the operator expression,
    tied to their input symbol by one extra two-index identity operand per
    axis, appended after the gates in ascending axis order.

    Args:
        n_axes (int): Number of axes N
        pairs (list[tuple[int, int]]): Gate axes in application order

    Returns:
        tuple[EinsumExpr, EinsumExpr]: (apply expression, operator expression)
    """
    current = list(range(n_axes))
    terms = []
    for m, n in pairs:
        in_m, in_n = current[m], current[n]
        out_m, out_n = in_m + n_axes, in_n + n_axes
        terms.append(get_symbol(out_m) + get_symbol(out_n) + get_symbol(in_m) + get_symbol(in_n))
        current[m], current[n] = out_m, out_n

    inputs = "".join(get_symbol(i) for i in range(n_axes))
    outputs = "".join(get_symbol(i) for i in current)
    if not terms:
        return EinsumExpr(f"...{inputs}->...{outputs}", 1), EinsumExpr("", 0)

    apply_text = f"...{inputs},{','.join(terms)}->...{outputs}"
    untouched = untouched_axes(n_axes, pairs)
    op_outputs = list(current)
    for p in untouched:
        op_outputs[p] = p + n_axes
        terms.append(get_symbol(p + n_axes) + get_symbol(p))
    op_text = f"{','.join(terms)}->{''.join(get_symbol(i) for i in op_outputs)}{inputs}"
    return EinsumExpr(apply_text, 1 + len(pairs)), EinsumExpr(op_text, len(terms))


def untouched_axes(n_axes, pairs):
    """Axes that no gate in the list acts on, ascending"""
    touched = {axis for pair in pairs for axis in pair}
    return [p for p in range(n_axes) if p not in touched]


def _check_axis_count(n_axes):
    if not isinstance(n_axes, (int, np.integer)) or n_axes < 2:
        raise InvalidArgumentError(f"expression generation needs N >= 2, got {n_axes!r}")


def gen_apply_expr(n_axes):
    """
    Expression applying one gate per axis pair to a batched state

    >>> gen_apply_expr(3).text
    '...abc,efbc,diaf,ghde->...ghi'
    """
    _check_axis_count(n_axes)
    return gen_plan_exprs(n_axes, all_pairs_axes(n_axes))[0]


def gen_operator_expr(n_axes):
    """
    Expression contracting the gates alone into the full operator (out-axes, in-axes)

    >>> gen_operator_expr(3).text
    'efbc,diaf,ghde->ghiabc'
    """
    _check_axis_count(n_axes)
    return gen_plan_exprs(n_axes, all_pairs_axes(n_axes))[1]


def contract(expr, operands, fixed_order=False):
    """
    Contract operands according to an expression

    The pairwise order comes from opt_einsum's greedy path unless
    fixed_order is set, in which case the path is always the first two
    remaining operands, [(0, 1)] * (k - 1).

    Args:
        expr (EinsumExpr | str): Contraction expression
        operands (list[np.ndarray | DenseTensor]): Operands in expression order
        fixed_order (bool): Force the left-to-right path

    Returns:
        np.ndarray: The contracted array
    """
    if isinstance(expr, str):
        expr = EinsumExpr(expr, expr.split("->")[0].count(",") + 1)
    arrays = [op.data if isinstance(op, DenseTensor) else np.asarray(op) for op in operands]
    if len(arrays) != expr.operand_count:
        raise ContractionError(
            f"expression {expr.text!r} takes {expr.operand_count} operands, got {len(arrays)}"
        )

    if len(arrays) == 1:
        path = [(0,)]
    elif fixed_order:
        path = [(0, 1)] * (len(arrays) - 1)
    else:
        path = "greedy"

    try:
        return np.asarray(oe.contract(expr.text, *arrays, optimize=path))
    except ValueError as e:
        raise ContractionError(f"cannot contract {expr.text!r}: {e}") from e
