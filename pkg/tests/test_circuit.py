import itertools

import numpy as np
import pytest

from quanta.circuit import (
    AdaptedLinear, GateSpec, QuantaPlan, apply, apply_fused, build_plan, build_rect_plan, cost,
    identity_plan, init_zero_delta, materialize, merge, stack_rounds
)
from quanta.errors import DimensionMismatchError, NumericalError, PlanValidationError
from quanta.tensor_core import AxisShape, all_pairs_axes, reshape_to_axes
from quanta.training import grad_plan


def operator_by_loops(plan):
    """Dense operator of a square plan, one basis vector and one index tuple at a time"""
    shape = plan.in_shape
    d = shape.total
    columns = []
    for k in range(d):
        state = np.zeros(shape.dims)
        state[np.unravel_index(k, shape.dims)] = 1.0
        for gate in plan.gates:
            m, n = gate.axes
            t = gate.tensor.reshape(shape[m], shape[n], shape[m], shape[n])
            out = np.zeros_like(state)
            for idx in itertools.product(*(range(e) for e in shape.dims)):
                total = 0.0
                for jm in range(shape[m]):
                    for jn in range(shape[n]):
                        src = list(idx)
                        src[m], src[n] = jm, jn
                        total += t[idx[m], idx[n], jm, jn] * state[tuple(src)]
                out[idx] = total
            state = out
        columns.append(state.reshape(-1))
    return np.stack(columns, axis=1)


def random_shape(rng, n_axes, limit=256):
    while True:
        dims = tuple(int(d) for d in rng.integers(2, 5, size=n_axes))
        if np.prod(dims) <= limit:
            return AxisShape(dims)


def test_build_plan_all_pairs():
    plan = build_plan("4-4-4", seed=3)
    assert plan.pairs == [(1, 2), (0, 2), (0, 1)]
    assert all(t.shape == (16, 16) for t in plan.tensors)
    assert plan.in_features == plan.out_features == 64
    assert plan.is_square
    assert plan.out_shape == plan.in_shape


def test_same_seed_same_plan():
    a = build_plan("2-3-4", seed=11)
    b = build_plan("2-3-4", seed=11)
    c = build_plan("2-3-4", seed=12)
    for ta, tb in zip(a.tensors, b.tensors):
        np.testing.assert_array_equal(ta, tb)
    assert not np.array_equal(a.tensors[0], c.tensors[0])


def test_gate_tensors_are_immutable():
    plan = build_plan("2-2-2", seed=0)
    with pytest.raises(ValueError):
        plan.tensors[0][0, 0] = 5.0


def test_plan_validation():
    with pytest.raises(PlanValidationError):
        QuantaPlan(AxisShape((2, 2, 2)), [GateSpec((0, 1), np.eye(8))])
    with pytest.raises(PlanValidationError):
        QuantaPlan(AxisShape((2, 2, 2)), [GateSpec((0, 3), np.eye(4))])
    with pytest.raises(PlanValidationError):
        GateSpec((1, 1), np.eye(4))
    with pytest.raises(NumericalError):
        GateSpec((0, 1), np.full((4, 4), np.nan))
    with pytest.raises(PlanValidationError):
        build_plan("2-2-2", scheme="ladder")
    with pytest.raises(PlanValidationError):
        build_plan("2-2-2", init="orthogonal")


def test_stack_rounds():
    pairs = all_pairs_axes(3)
    assert stack_rounds(pairs, 2) == pairs + pairs
    with pytest.raises(PlanValidationError):
        stack_rounds(pairs, 0)
    plan = build_plan("2-2-2", rounds=3)
    assert plan.n_gates == 9


def test_explicit_gate_list(rng):
    gates = [GateSpec((0, 2), rng.standard_normal((4, 4)), 0), GateSpec((1, 0), rng.standard_normal((4, 4)), 1)]
    plan = build_plan("2-2-2", scheme=gates)
    assert plan.pairs == [(0, 2), (1, 0)]
    np.testing.assert_array_equal(plan.tensors[1], gates[1].tensor)


def test_near_identity_init():
    plan = build_plan("4-4-4", seed=0, init_scale=0.0, init="near-identity")
    np.testing.assert_array_equal(materialize(plan), np.eye(64))


def test_materialize_matches_index_loops(rng):
    plan = build_plan("2-3-2", seed=5)
    np.testing.assert_allclose(materialize(plan), operator_by_loops(plan), atol=1e-12)


def test_apply_matches_materialize(rng):
    plan = build_plan("4-2-3", seed=1, rounds=2)
    x = rng.standard_normal((10, 24))
    np.testing.assert_allclose(apply(plan, x), x @ materialize(plan).T, atol=1e-12)
    np.testing.assert_allclose(apply_fused(plan, x), apply(plan, x), atol=1e-12)

    tensor = reshape_to_axes(x, plan.in_shape)
    np.testing.assert_allclose(apply(plan, tensor).flatten(), apply(plan, x), atol=1e-14)
    np.testing.assert_allclose(apply_fused(plan, tensor).data, apply(plan, tensor).data, atol=1e-12)


def test_apply_rejects_wrong_length(rng):
    plan = build_plan("2-2-2")
    with pytest.raises(DimensionMismatchError):
        apply(plan, rng.standard_normal(7))
    with pytest.raises(DimensionMismatchError):
        apply(plan, reshape_to_axes(rng.standard_normal(8), AxisShape((4, 2))))


def test_untouched_axes_pass_through(rng):
    plan = build_plan("2-2-2", scheme=[(0, 1)], seed=0)
    np.testing.assert_allclose(materialize(plan), np.kron(plan.tensors[0], np.eye(2)), atol=1e-14)

    middle = build_plan("2-3-2", scheme=[(0, 2), (2, 0)], seed=1)
    np.testing.assert_allclose(materialize(middle), operator_by_loops(middle), atol=1e-12)
    x = rng.standard_normal((5, 12))
    np.testing.assert_allclose(apply(middle, x), x @ materialize(middle).T, atol=1e-12)
    np.testing.assert_allclose(apply_fused(middle, x), apply(middle, x), atol=1e-12)

    layer = AdaptedLinear.from_base(np.eye(8), plan)
    np.testing.assert_allclose(merge(layer), np.eye(8), rtol=0, atol=1e-12)


def test_untouched_axis_in_rectangular_plan():
    plan = build_rect_plan("2-2-2", "4-2-2", seed=2, scheme=[(0, 1)])
    assert materialize(plan).shape == (16, 8)


def test_single_gate_is_the_gate(rng):
    gate = rng.standard_normal((12, 12))
    plan = QuantaPlan(AxisShape((3, 4)), [GateSpec((0, 1), gate)])
    np.testing.assert_allclose(materialize(plan), gate, atol=1e-14)


def test_empty_plan_is_identity(rng):
    plan = QuantaPlan(AxisShape((2, 4)))
    np.testing.assert_array_equal(materialize(plan), np.eye(8))
    x = rng.standard_normal(8)
    np.testing.assert_array_equal(apply(plan, x), x)


def test_identity_gate_insertion(rng):
    plan = build_plan("2-4-2", seed=2)
    gates = list(plan.gates)
    gates.insert(1, GateSpec((0, 1), np.eye(8), 99))
    padded = QuantaPlan(plan.in_shape, gates)
    np.testing.assert_allclose(materialize(padded), materialize(plan), atol=1e-13)
    np.testing.assert_array_equal(materialize(identity_plan("2-2-2", rounds=2)), np.eye(8))


def test_rectangular_plan_is_sliced_square_plan(rng):
    pairs = [(1, 2), (0, 1)]
    rect = build_rect_plan("4-2-2", "2-2-2", scheme=pairs, seed=7)
    assert rect.out_shape == AxisShape((2, 2, 2))
    assert rect.tensors[1].shape == (4, 8)
    M = materialize(rect)
    assert M.shape == (8, 16)

    # Square gate whose first output rows are the rectangular gate
    square_gate = np.vstack([rect.tensors[1], rng.standard_normal((4, 8))])
    square = QuantaPlan(AxisShape((4, 2, 2)), [rect.gates[0], GateSpec((0, 1), square_gate, 1)])
    np.testing.assert_allclose(M, materialize(square)[:8], atol=1e-13)

    x = rng.standard_normal((3, 16))
    np.testing.assert_allclose(apply(rect, x), x @ M.T, atol=1e-12)
    np.testing.assert_allclose(apply_fused(rect, x), x @ M.T, atol=1e-12)


def test_rectangular_target_extent():
    plan = build_rect_plan("2-2", "4-2")
    assert materialize(plan).shape == (8, 4)
    assert cost(plan).trainable_params == 32


def test_padding_and_truncation(rng):
    base = build_plan("4-4-4", seed=4)
    plan = QuantaPlan(base.in_shape, base.gates, in_features=60, out_features=60)
    assert plan.pad_len == 4
    assert plan.trunc_len == 4
    M = materialize(plan)
    assert M.shape == (60, 60)
    np.testing.assert_array_equal(M, materialize(base)[:60, :60])

    x = rng.standard_normal((5, 60))
    np.testing.assert_allclose(apply(plan, x), x @ M.T, atol=1e-12)
    padded = np.hstack([x, np.zeros((5, 4))])
    np.testing.assert_allclose(apply(plan, x), apply(base, padded)[:, :60], atol=1e-14)


def test_costs():
    report = cost(build_plan("4-4-4"))
    assert report.trainable_params == 768
    assert report.flops_per_token == 3072
    assert [g.params for g in report.per_gate] == [256, 256, 256]

    assert cost(build_plan("16-8-8-4")).trainable_params == 43008
    assert cost(QuantaPlan(AxisShape((4, 4)))).trainable_params == 0


def test_zero_delta_forward_is_base_forward_bitwise(rng):
    W0 = rng.standard_normal((64, 64))
    layer = AdaptedLinear.from_base(W0, build_plan("4-4-4", seed=9), keep_frozen=True, fixed_order=True)
    x = rng.standard_normal((100, 64))
    np.testing.assert_array_equal(layer.forward(x), x @ W0.T)


def test_zero_delta_split_shares_values():
    trainable, frozen = init_zero_delta(build_plan("2-2-2", seed=1))
    assert not trainable.frozen and frozen.frozen
    for a, b in zip(trainable.tensors, frozen.tensors):
        np.testing.assert_array_equal(a, b)


def test_merged_and_three_term_forms_agree(rng):
    W0 = rng.standard_normal((64, 64)) / 8
    trainable, frozen = init_zero_delta(build_plan("4-4-4", seed=2))
    moved = trainable.with_tensors([t + 0.05 * rng.standard_normal(t.shape) for t in trainable.tensors])

    three_term = AdaptedLinear(W0, moved, frozen)
    merged = AdaptedLinear(W0, moved, frozen)
    merged.merge_frozen()
    assert merged.merged_offset_applied and merged.frozen_plan is None

    x = rng.standard_normal((100, 64))
    np.testing.assert_allclose(merged.forward(x), three_term.forward(x), rtol=0, atol=1e-12)
    np.testing.assert_allclose(merge(merged), merge(three_term), rtol=0, atol=1e-12)


def test_merged_weight_reproduces_forward(rng):
    W0 = rng.standard_normal((64, 64)) / 8
    layer = AdaptedLinear.from_base(W0, build_plan("4-4-4", seed=6))
    layer.plan = layer.plan.with_tensors([t + 0.1 * rng.standard_normal(t.shape) for t in layer.plan.tensors])

    x = rng.standard_normal((1000, 64))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    np.testing.assert_allclose(x @ merge(layer).T, layer.forward(x), rtol=0, atol=1e-10)


def test_fresh_merge_returns_base(rng):
    W0 = rng.standard_normal((64, 64))
    layer = AdaptedLinear.from_base(W0, build_plan("4-4-4", seed=6))
    np.testing.assert_allclose(merge(layer), W0, rtol=0, atol=1e-12)
    np.testing.assert_allclose(layer.delta_matrix(), 0.0, atol=1e-12)


def test_adapted_linear_checks_extents(rng):
    with pytest.raises(DimensionMismatchError):
        AdaptedLinear(np.zeros((8, 4)), build_plan("2-2-2"))


def test_float32_is_preserved(rng):
    plan = build_plan("2-2-2", dtype=np.float32)
    assert plan.dtype == np.float32
    x = rng.standard_normal(8).astype(np.float32)
    assert apply(plan, x).dtype == np.float32


@pytest.mark.slow
def test_materialize_apply_sweep(rng):
    for trial in range(1000):
        n_axes = int(rng.integers(2, 6))
        shape = random_shape(rng, n_axes)
        if trial % 2:
            pairs = all_pairs_axes(n_axes)
        else:
            pairs = []
            for _ in range(int(rng.integers(1, 7))):
                m, n = rng.choice(n_axes, size=2, replace=False)
                pairs.append((int(m), int(n)))
        plan = build_plan(shape, scheme=pairs, seed=trial)
        x = rng.standard_normal(shape.total)
        err = np.max(np.abs(materialize(plan) @ x - apply(plan, x)))
        assert err <= 1e-12 * plan.n_gates * np.max(np.abs(x)), (trial, str(shape), pairs)


def test_one_gradient_step_moves_the_layer(rng):
    W0 = rng.standard_normal((16, 16))
    delta_star = rng.standard_normal((16, 16))
    layer = AdaptedLinear.from_base(W0, build_plan("4-4", seed=3))
    x = rng.standard_normal((32, 16))
    np.testing.assert_allclose(layer.forward(x), x @ W0.T, rtol=0, atol=1e-12)

    upstream = layer.forward(x) - x @ (W0 + delta_star).T
    grads = grad_plan(layer.plan, x, upstream)
    layer.plan = layer.plan.with_tensors([t - 1e-3 * g for t, g in zip(layer.plan.tensors, grads)])
    assert np.max(np.abs(layer.forward(x) - x @ W0.T)) > 1e-6
