# QuanTA - Training Module
# Analytic gradients, gradient checking and the synthetic high-rank recovery experiment

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import torch

from quanta.circuit import AdaptedLinear, apply, build_plan, cost, resize_features
from quanta.constants import (
    ALL_PAIRS, DEFAULT_BATCH_SIZE, DEFAULT_INIT_SCALE, DEFAULT_LEARNING_RATE, DEFAULT_OPTIMIZER,
    DEFAULT_STEPS, GAUSSIAN_INIT, GRAD_CHECK_BATCH, GRAD_CHECK_STEP, GRAD_CHECK_TOLERANCE, LOG_EVERY, LORA_ALPHA,
    LORA_INIT_SCALE, OPTIMIZERS, TRAIN_DTYPES
)
from quanta.errors import (
    DimensionMismatchError, InvalidArgumentError, NumericalError, TrainingDivergedError
)
from quanta.lora import init_lora, lora_apply, lora_delta, lora_param_count
from quanta.tensor_core import AxisShape, apply_gate, reshape_to_axes

logger = logging.getLogger(__name__)


def _gate_outer(cotangent, activation, axes):
    """Sum over batch and untouched axes of cotangent (x) activation on the gate axes"""
    m, n = axes
    b = len(cotangent.batch_shape)
    cot = np.moveaxis(cotangent.data, (b + m, b + n), (-2, -1))
    act = np.moveaxis(activation.data, (b + m, b + n), (-2, -1))
    cot = cot.reshape(-1, cot.shape[-2] * cot.shape[-1])
    act = act.reshape(-1, act.shape[-2] * act.shape[-1])
    return cot.T @ act


def grad_plan(plan, x, upstream, fixed_order=False):
    """
    Gradient of sum(upstream * apply(plan, x)) with respect to every gate

    The gate inputs are kept from a forward sweep; the cotangent is then
    carried backwards through the transposed gates, and each gate's gradient
    is the contraction of its output cotangent with its input.

    Args:
        plan (QuantaPlan): Circuit
        x (np.ndarray): Inputs of shape (..., in_features)
        upstream (np.ndarray): Output cotangents of shape (..., out_features)
        fixed_order (bool): Use the fixed accumulation order of apply_gate

    Returns:
        list[np.ndarray]: One gradient per gate, shaped like the gate tensor
    """
    x, upstream = np.asarray(x), np.asarray(upstream)
    if x.ndim == 0 or x.shape[-1] != plan.in_features:
        raise DimensionMismatchError(f"input of shape {x.shape} does not have {plan.in_features} features")
    if upstream.shape != x.shape[:-1] + (plan.out_features,):
        raise DimensionMismatchError(
            f"cotangent of shape {upstream.shape} does not match outputs {x.shape[:-1] + (plan.out_features,)}"
        )

    # Forward sweep, keeping each gate's input
    state = reshape_to_axes(resize_features(x, plan.in_shape.total), plan.in_shape)
    activations = []
    for gate in plan.gates:
        activations.append(state)
        state = apply_gate(state, gate.tensor, gate.axes, gate.out_dims, fixed_order)

    # Adjoint of the output truncation/padding
    cot = reshape_to_axes(resize_features(upstream, plan.out_shape.total), plan.out_shape)

    grads = [None] * plan.n_gates
    for index in reversed(range(plan.n_gates)):
        gate = plan.gates[index]
        grads[index] = _gate_outer(cot, activations[index], gate.axes)
        shape = plan.gate_input_shape(index)
        in_dims = (shape[gate.axes[0]], shape[gate.axes[1]])
        cot = apply_gate(cot, gate.tensor.T, gate.axes, in_dims, fixed_order)
    return grads


def grad_lora(adapter, x, upstream):
    """
    Gradient of sum(upstream * lora_apply(adapter, x)) with respect to A and B

    Returns:
        tuple[np.ndarray, np.ndarray]: (dA, dB)
    """
    x, upstream = np.asarray(x), np.asarray(upstream)
    x2 = x.reshape(-1, adapter.in_dim)
    u2 = upstream.reshape(-1, adapter.out_dim)
    s = adapter.scaling
    dB = s * (u2.T @ (x2 @ adapter.A.T))
    dA = s * ((u2 @ adapter.B).T @ x2)
    return dA, dB


@dataclass(frozen=True)
class GradCheckReport:
    """Outcome of comparing analytic gradients with central differences"""

    passed: bool
    max_rel_error: float
    per_gate: tuple
    tolerance: float


def grad_check(plan, tolerance=GRAD_CHECK_TOLERANCE, batch=GRAD_CHECK_BATCH, step=GRAD_CHECK_STEP,
               seed=0, grad_fn=grad_plan):
    """
    Compare analytic gate gradients against central finite differences

    The error per gate is max |analytic - numeric| over its entries divided
    by the larger of the two gradients' max magnitudes.

    Args:
        plan (QuantaPlan): Circuit with in_features <= 64
        tolerance (float): Pass threshold on the largest error
        batch (int): Number of random inputs
        step (float): Finite-difference step
        seed (int): Seed for inputs and cotangents
        grad_fn (callable): Gradient function with the signature of grad_plan

    Returns:
        GradCheckReport: Per-gate errors and the verdict
    """
    if plan.in_features > 64 or plan.out_features > 64:
        raise InvalidArgumentError("finite-difference checks are limited to 64 features")

    rng = np.random.default_rng(seed)
    x = rng.standard_normal((batch, plan.in_features))
    upstream = rng.standard_normal((batch, plan.out_features))

    def loss(p):
        return float(np.sum(upstream * apply(p, x)))

    analytic = grad_fn(plan, x, upstream)
    tensors = [t.copy() for t in plan.tensors]
    errors = []
    for index, tensor in enumerate(tensors):
        numeric = np.zeros_like(tensor)
        for entry in np.ndindex(tensor.shape):
            original = tensor[entry]
            tensor[entry] = original + step
            up = loss(plan.with_tensors(tensors))
            tensor[entry] = original - step
            down = loss(plan.with_tensors(tensors))
            tensor[entry] = original
            numeric[entry] = (up - down) / (2 * step)

        diff = np.max(np.abs(np.asarray(analytic[index]) - numeric))
        scale = max(np.max(np.abs(analytic[index])), np.max(np.abs(numeric)), 1e-30)
        errors.append(float(diff / scale))

    worst = max(errors, default=0.0)
    return GradCheckReport(worst <= tolerance, worst, tuple(errors), tolerance)


@dataclass(frozen=True, eq=False)
class SyntheticTask:
    """
    Recovery task: learn delta_star from input/output pairs of W0 + delta_star

    Args:
        W0 (np.ndarray): Base weight
        delta_star (np.ndarray): Target update
        rank_of_delta (int): Rank of delta_star by construction
        batch_size (int): Gaussian inputs per step
        seed (int): Seed the task was drawn with
    """

    W0: np.ndarray
    delta_star: np.ndarray
    rank_of_delta: int
    batch_size: int = DEFAULT_BATCH_SIZE
    seed: int = 0

    @property
    def dim(self):
        return self.W0.shape[1]


def make_task(dim, rank=None, seed=0, batch_size=DEFAULT_BATCH_SIZE):
    """
    Draw a synthetic task with controlled intrinsic rank

    Args:
        dim (int): Square extent d
        rank (int | None): Number of random outer products in delta_star; None for full-rank Gaussian
        seed (int): Random seed
        batch_size (int): Inputs per training step

    Returns:
        SyntheticTask: The task
    """
    if dim < 1:
        raise InvalidArgumentError(f"task dimension must be positive, got {dim}")
    rng = np.random.default_rng(seed)
    W0 = rng.standard_normal((dim, dim)) / np.sqrt(dim)
    if rank is None or rank >= dim:
        delta_star = rng.standard_normal((dim, dim)) / np.sqrt(dim)
        rank = dim
    else:
        U = rng.standard_normal((dim, rank))
        V = rng.standard_normal((rank, dim))
        delta_star = (U @ V) / np.sqrt(rank * dim)
    return SyntheticTask(W0, delta_star, int(rank), batch_size, seed)


def eckart_young_floor(delta_star, rank):
    """Smallest relative Frobenius error any rank-`rank` matrix can reach"""
    sv = scipy.linalg.svdvals(delta_star)
    total = np.sqrt(np.sum(sv ** 2))
    if total == 0:
        return 0.0
    return float(np.sqrt(np.sum(sv[rank:] ** 2)) / total)


@dataclass(frozen=True)
class AdapterSpec:
    """
    Which adapter to train

    Args:
        kind (str): "quanta" or "lora"
        shape (str | AxisShape): Axis factorization for QuanTA
        scheme (str | list): Gate layout for QuanTA
        rounds (int): Repetitions of the QuanTA layout
        init_scale (float): Gate or A-factor scale
        init (str): QuanTA gate initialization, "gaussian" or "near-identity"
        rank (int): LoRA rank
        alpha (float): LoRA scaling numerator
    """

    kind: str = "quanta"
    shape: object = None
    scheme: object = ALL_PAIRS
    rounds: int = 1
    init_scale: float = DEFAULT_INIT_SCALE
    init: str = GAUSSIAN_INIT
    rank: int = 4
    alpha: float = LORA_ALPHA

    def __post_init__(self):
        if self.kind not in ("quanta", "lora"):
            raise InvalidArgumentError(f"unknown adapter kind {self.kind!r}")
        if self.kind == "quanta" and self.shape is None:
            raise InvalidArgumentError("a QuanTA adapter needs an axis shape")


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer settings for a recovery run"""

    optimizer: str = DEFAULT_OPTIMIZER
    learning_rate: float = DEFAULT_LEARNING_RATE
    steps: int = DEFAULT_STEPS
    batch_size: int = None  # None means the task's batch size
    seed: int = 0
    dtype: str = "float64"
    fixed_order: bool = True
    log_every: int = LOG_EVERY

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise InvalidArgumentError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.steps < 1:
            raise InvalidArgumentError(f"steps must be >= 1, got {self.steps}")
        if not self.learning_rate > 0:
            raise InvalidArgumentError(f"learning rate must be positive, got {self.learning_rate}")
        if self.dtype not in TRAIN_DTYPES:
            raise InvalidArgumentError(f"dtype must be one of {TRAIN_DTYPES}, got {self.dtype!r}")


@dataclass
class TrainReport:
    """
    Loss curve and recovery metrics of one run

    Reports compare equal when everything but the measured wall_clock
    matches, so two runs with the same seeds and fixed_order compare equal.
    """

    adapter_kind: str
    seed: int
    param_count: int
    losses: list = field(default_factory=list)
    recovery_error: float = float("nan")
    wall_clock: float = field(default=0.0, compare=False)
    diverged: bool = False
    adapter: object = field(default=None, repr=False, compare=False)

    def summary(self):
        """JSON-ready summary without the loss curve"""
        return {
            "adapter_kind": self.adapter_kind,
            "seed": self.seed,
            "param_count": self.param_count,
            "steps_run": len(self.losses),
            "final_loss": self.losses[-1] if self.losses else None,
            "recovery_error": self.recovery_error,
            "wall_clock": self.wall_clock,
            "diverged": self.diverged,
        }

    def loss_rows(self):
        """(step, loss) rows for the CSV loss curve"""
        return [{"step": step, "loss": loss} for step, loss in enumerate(self.losses)]


def _make_optimizer(params, config):
    if config.optimizer == "adam":
        return torch.optim.Adam(params, lr=config.learning_rate)
    return torch.optim.SGD(params, lr=config.learning_rate)


class _QuantaLearner:
    """QuanTA adapter wrapped for the training loop"""

    def __init__(self, task, spec, config, dtype):
        plan = build_plan(spec.shape, spec.scheme, config.seed, spec.init_scale, spec.rounds, dtype, spec.init)
        if plan.in_features != task.dim:
            raise DimensionMismatchError(f"axis shape {plan.in_shape} does not factor task dimension {task.dim}")
        self.layer = AdaptedLinear.from_base(task.W0.astype(dtype), plan, fixed_order=config.fixed_order)
        self.param_count = cost(plan).trainable_params

    def tensors(self):
        return self.layer.plan.tensors

    def forward(self, x):
        return self.layer.forward(x)

    def grads(self, x, upstream):
        return grad_plan(self.layer.plan, x, upstream, self.layer.fixed_order)

    def update(self, tensors):
        self.layer.plan = self.layer.plan.with_tensors(tensors)

    def delta(self):
        return self.layer.delta_matrix()

    @property
    def adapter(self):
        return self.layer


class _LoraLearner:
    """LoRA adapter wrapped for the training loop"""

    def __init__(self, task, spec, config, dtype):
        self.base = task.W0.astype(dtype)
        self.lora = init_lora(task.dim, task.dim, spec.rank, spec.alpha, config.seed,
                              spec.init_scale, dtype)
        self.param_count = lora_param_count(spec.rank, task.dim, task.dim)

    def tensors(self):
        return [self.lora.A, self.lora.B]

    def forward(self, x):
        return x @ self.base.T + lora_apply(self.lora, x)

    def grads(self, x, upstream):
        return list(grad_lora(self.lora, x, upstream))

    def update(self, tensors):
        self.lora = self.lora.with_factors(*tensors)

    def delta(self):
        return lora_delta(self.lora)

    @property
    def adapter(self):
        return self.lora


def run_recovery(task, spec, config):
    """
    Train an adapter to recover task.delta_star from function-space MSE

    Each step draws Gaussian inputs from a generator seeded by config.seed,
    so QuanTA and LoRA runs with the same config see the same data.

    Args:
        task (SyntheticTask): Task to solve
        spec (AdapterSpec): Adapter kind and shape
        config (TrainConfig): Optimizer settings

    Returns:
        TrainReport: Loss curve and final relative recovery error

    Raises:
        TrainingDivergedError: If the loss or the parameters become non-finite
    """
    dtype = np.dtype(config.dtype)
    learner_cls = _QuantaLearner if spec.kind == "quanta" else _LoraLearner
    learner = learner_cls(task, spec, config, dtype)
    report = TrainReport(spec.kind, config.seed, learner.param_count)

    params = [torch.nn.Parameter(torch.from_numpy(np.array(t))) for t in learner.tensors()]
    optimizer = _make_optimizer(params, config)

    rng = np.random.default_rng(config.seed)
    target_weight = (task.W0 + task.delta_star).astype(dtype)
    batch_size = config.batch_size or task.batch_size
    started = time.perf_counter()

    for step in range(config.steps):
        x = rng.standard_normal((batch_size, task.dim)).astype(dtype)
        resid = learner.forward(x) - x @ target_weight.T
        loss = float(np.mean(resid ** 2))
        report.losses.append(loss)

        if not np.isfinite(loss):
            report.diverged = True
            report.wall_clock = time.perf_counter() - started
            logger.error("%s run diverged at step %d", spec.kind, step)
            raise TrainingDivergedError(f"loss became non-finite at step {step}", report)

        if step % config.log_every == 0:
            logger.debug("%s step %d loss %.6e", spec.kind, step, loss)

        upstream = (2.0 / resid.size) * resid
        for param, grad in zip(params, learner.grads(x, upstream)):
            param.grad = torch.from_numpy(np.ascontiguousarray(grad, dtype=dtype))
        optimizer.step()

        try:
            learner.update([p.detach().numpy() for p in params])
        except NumericalError as e:
            report.diverged = True
            report.wall_clock = time.perf_counter() - started
            raise TrainingDivergedError(f"parameters became non-finite at step {step}", report) from e

    report.wall_clock = time.perf_counter() - started
    delta = learner.delta().astype(np.float64)
    report.recovery_error = float(
        np.linalg.norm(delta - task.delta_star) / np.linalg.norm(task.delta_star)
    )
    report.adapter = learner.adapter
    logger.info("%s run finished: recovery error %.4f after %d steps",
                spec.kind, report.recovery_error, config.steps)
    return report
