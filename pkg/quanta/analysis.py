# QuanTA - Analysis Module
# Numerical rank and its bounds, universality fitting, subspace similarity, parameter accounting

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.optimize

from quanta.circuit import GateSpec, QuantaPlan, cost, identity_plan, materialize
from quanta.config import read_json_strict, require_keys
from quanta.constants import (
    ALL_PAIRS, AUTO_FIELD, COMPLEX_FIELD, FIT_FIELDS, FIT_MAX_ITER, FIT_RESTART_SCALE, FIT_TARGET_RESIDUAL,
    FIT_TOLERANCE, LLAMA2_7B_PARAMS, REAL_FIELD, SENSITIVITY_WINDOW
)
from quanta.errors import (
    ConfigError, DimensionMismatchError, InvalidArgumentError, NumericalError, PlanValidationError
)
from quanta.lora import LoraAdapter, lora_delta, lora_param_count
from quanta.tensor_core import AxisShape
from quanta.training import AdapterSpec, run_recovery

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RankReport:
    """
    Numerical rank of a matrix, with the circuit bounds when they apply

    Args:
        rank (int): Number of singular values above the threshold
        singular_values (tuple[float]): Descending singular values
        tolerance (float): Relative tolerance factor
        threshold (float): tolerance * sigma_max * max(extent)
        lower_bound (int | None): sum_a d R_a / d_a - d (N_T - 1)
        upper_bound (int | None): min_a d R_a / d_a
        gate_ranks (tuple[int]): Per-gate numerical ranks
        tolerance_sensitive (bool): Some gate has singular values near its threshold
    """

    rank: int
    singular_values: tuple
    tolerance: float
    threshold: float
    lower_bound: int = None
    upper_bound: int = None
    gate_ranks: tuple = ()
    tolerance_sensitive: bool = False

    @property
    def contained(self):
        """lower_bound <= rank <= upper_bound"""
        if self.lower_bound is None:
            return True
        return self.lower_bound <= self.rank <= self.upper_bound

    @property
    def verified(self):
        """Upper bound holds, and the lower bound too unless the case is tolerance-sensitive"""
        if self.upper_bound is None:
            return True
        if self.rank > self.upper_bound:
            return False
        return self.tolerance_sensitive or self.rank >= self.lower_bound


def _singular_values(M):
    M = np.asarray(M)
    if not np.all(np.isfinite(M)):
        raise NumericalError("matrix has non-finite entries")
    return scipy.linalg.svd(M, compute_uv=False)


def _threshold(M, sv, tolerance):
    if tolerance is None:
        tolerance = float(np.finfo(np.result_type(M, np.float32)).eps)
    sigma_max = float(sv[0]) if sv.size else 0.0
    return tolerance, tolerance * sigma_max * max(np.shape(M))


def numerical_rank(M, tolerance=None):
    """
    SVD rank: singular values above tolerance * sigma_max * max(extent)

    Args:
        M (np.ndarray): Finite matrix
        tolerance (float | None): Relative tolerance, machine epsilon by default

    Returns:
        RankReport: Rank without circuit bounds
    """
    sv = _singular_values(M)
    tolerance, threshold = _threshold(M, sv, tolerance)
    return RankReport(int(np.sum(sv > threshold)), tuple(sv.tolist()), tolerance, threshold)


def theorem2_bounds(plan, tolerance=None):
    """
    Rank of the full operator together with the bounds from the gate ranks

        sum_a d R_a / d_a - d (N_T - 1) <= R <= min_a d R_a / d_a

    Gate ranks use the same tolerance rule as the operator. A gate with a
    singular value within SENSITIVITY_WINDOW of its threshold makes the
    lower bound unreliable; such cases are flagged instead of failing.

    Args:
        plan (QuantaPlan): Square plan without padding or truncation
        tolerance (float | None): Relative tolerance

    Returns:
        RankReport: Rank, bounds, gate ranks and the sensitivity flag
    """
    if plan.in_shape != plan.out_shape or not plan.is_square or plan.pad_len or plan.trunc_len:
        raise PlanValidationError("rank bounds need a square plan without padding or truncation")

    d = plan.in_shape.total
    gate_ranks, ratios, sensitive = [], [], False
    for gate in plan.gates:
        sv = _singular_values(gate.tensor)
        tol, threshold = _threshold(gate.tensor, sv, tolerance)
        rank = int(np.sum(sv > threshold))
        gate_ranks.append(rank)
        ratios.append(d * rank // gate.tensor.shape[0])
        near = (sv > threshold / SENSITIVITY_WINDOW) & (sv < threshold * SENSITIVITY_WINDOW)
        sensitive = sensitive or bool(np.any(near))

    upper = min(ratios, default=d)
    lower = sum(ratios) - d * (plan.n_gates - 1)

    full = numerical_rank(materialize(plan), tolerance)
    report = RankReport(
        full.rank, full.singular_values, full.tolerance, full.threshold,
        lower, upper, tuple(gate_ranks), sensitive
    )
    if sensitive:
        logger.warning("gate singular values lie near the rank threshold; lower bound not asserted")
    if not report.verified:
        logger.warning("rank %d outside bounds [%d, %d]", report.rank, lower, upper)
    return report


@dataclass(frozen=True, eq=False)
class FitResult:
    """
    Best plan found by universality_fit

    Args:
        plan (QuantaPlan): Fitted gates, complex-valued when field is "complex"
        residual (float): Relative Frobenius misfit of the best restart
        restart_residuals (tuple[float]): Misfit of every restart that ran
        outside_theorem (bool): Some axis extent is not a power of two
        field (str): "real" or "complex"
    """

    plan: QuantaPlan
    residual: float
    restart_residuals: tuple
    outside_theorem: bool
    field: str = REAL_FIELD


class _Converged(Exception):
    """Raised from the residual once the target residual is reached"""

    def __init__(self, theta):
        super().__init__()
        self.theta = theta


def _flatten(tensors):
    return np.concatenate([t.ravel() for t in tensors])


def _embedding(shape, pair):
    """(d*d, k*k) matrix taking a flattened gate to its flattened full-space operator"""
    k = shape[pair[0]] * shape[pair[1]]
    columns = [materialize(QuantaPlan(shape, [GateSpec(pair, basis.reshape(k, k))])).ravel()
               for basis in np.eye(k * k)]
    return np.stack(columns, axis=1)


class _GateProduct:
    """
    Dense product M = E_K ... E_1 of embedded gates with its Jacobian

    Parameters are the flattened gates in plan order; in the complex field the
    real parts come first and the imaginary parts follow. Residuals are scaled
    by ||target||_F so their norm is the relative misfit.
    """

    def __init__(self, template, target, embeddings, complex_field):
        self.template = template
        self.target = target
        self.norm = float(np.linalg.norm(target)) or 1.0
        self.embeddings = [embeddings[pair] for pair in template.pairs]
        self.complex_field = complex_field
        self.d = template.in_shape.total
        self._split = np.cumsum([t.size for t in template.tensors])[:-1]
        self._cached = None

    def gates(self, theta):
        if self.complex_field:
            half = theta.size // 2
            theta = theta[:half] + 1j * theta[half:]
        return np.split(theta, self._split)

    def tensors(self, theta):
        return [g.reshape(t.shape) for g, t in zip(self.gates(theta), self.template.tensors)]

    def _products(self, theta):
        if self._cached is not None and np.array_equal(self._cached[0], theta):
            return self._cached[1]
        d = self.d
        embedded = [(P @ g).reshape(d, d) for P, g in zip(self.embeddings, self.gates(theta))]
        before = [np.eye(d)]
        for E in embedded[:-1]:
            before.append(E @ before[-1])
        after = [np.eye(d)]
        for E in embedded[:0:-1]:
            after.append(after[-1] @ E)
        after.reverse()
        products = (before, after, embedded[-1] @ before[-1])
        self._cached = (theta.copy(), products)
        return products

    def residual(self, theta):
        diff = (self._products(theta)[2] - self.target).ravel() / self.norm
        if self.complex_field:
            return np.concatenate([diff.real, diff.imag])
        return diff

    def jacobian(self, theta):
        # dM = A_i dE_i B_i with A_i the gates after i and B_i the gates before it
        before, after, _ = self._products(theta)
        d, blocks = self.d, []
        for P, A, B in zip(self.embeddings, after, before):
            kk = P.shape[1]
            AP = np.tensordot(A, P.reshape(d, d, kk), axes=(1, 0))
            blocks.append(np.tensordot(AP, B, axes=(1, 0)).transpose(0, 2, 1).reshape(d * d, kk))
        J = np.hstack(blocks) / self.norm
        if self.complex_field:
            return np.block([[J.real, -J.imag], [J.imag, J.real]])
        return J


def _fit_one(model, theta0, max_iter, target_residual):
    """Gauss-Newton (trust-region) descent on the scaled misfit from one start"""

    def residual(theta):
        r = model.residual(theta)
        if np.linalg.norm(r) <= target_residual:
            raise _Converged(theta.copy())
        return r

    try:
        result = scipy.optimize.least_squares(
            residual, theta0, jac=model.jacobian, method="trf", max_nfev=max_iter,
            ftol=FIT_TOLERANCE, xtol=FIT_TOLERANCE, gtol=FIT_TOLERANCE,
        )
        theta = result.x
    except _Converged as done:
        theta = done.theta
    return theta, float(np.linalg.norm(model.residual(theta)))


def _start_points(template, restarts, seed, complex_field):
    """Restart 0 sits at the identity gates, the others add seeded noise to it"""
    seeds = np.random.SeedSequence(seed).generate_state(restarts)
    starts = []
    for index, s in enumerate(seeds):
        rng = np.random.default_rng(int(s))
        scale = 0.0 if index == 0 else FIT_RESTART_SCALE
        theta = _flatten([t + scale * rng.standard_normal(t.shape) / np.sqrt(t.shape[1])
                          for t in template.tensors])
        if complex_field:
            # A real start never leaves the real subspace
            imag = _flatten([FIT_RESTART_SCALE * rng.standard_normal(t.shape) / np.sqrt(t.shape[1])
                             for t in template.tensors])
            theta = np.concatenate([theta, imag])
        starts.append(theta)
    return starts


def real_field_reaches(target, template):
    """
    Whether real gates can match the sign of det(target)

    A gate on axes (m, n) acts on the full space as G (x) I_r with
    r = d / (d_m d_n), so its determinant is det(G)^r. When every r is even
    a real circuit has det >= 0 and cannot reach targets with det < 0.
    """
    shape = template.in_shape
    if any((shape.total // (shape[m] * shape[n])) % 2 for m, n in template.pairs):
        return True
    return np.linalg.slogdet(target)[0] >= 0


def universality_fit(target, shape, rounds=1, restarts=1, seed=0, scheme=ALL_PAIRS,
                     max_iter=FIT_MAX_ITER, target_residual=FIT_TARGET_RESIDUAL, workers=1,
                     field=AUTO_FIELD):
    """
    Fit stacked rounds of a gate layout to a target matrix

    Each restart minimizes ||materialize(plan) - target||_F / ||target||_F
    with a trust-region Gauss-Newton solver on the dense gate product and its
    analytic Jacobian, stopping once the residual reaches target_residual.
    Restart 0 starts from identity gates, the others from seeded noise around
    them. The best restart wins, lowest index on ties.

    Gates are real unless field is "complex", or "auto" and the target's
    determinant is out of reach of real gates (see real_field_reaches).

    Args:
        target (np.ndarray): Square real matrix of extent shape.total
        shape (AxisShape | str): Axis factorization; powers of two are the proven regime
        rounds (int): Repetitions of the layout
        restarts (int): Number of starting points
        seed (int): Seed for the random starts
        scheme (str | list): Gate layout
        max_iter (int): Residual evaluations allowed per restart
        target_residual (float): Early-stopping residual
        workers (int): Restarts run concurrently in this many threads
        field (str): "auto", "real" or "complex"

    Returns:
        FitResult: Best plan, its relative residual and all restart residuals
    """
    shape = AxisShape.parse(shape)
    target = np.asarray(target, dtype=np.float64)
    if target.shape != (shape.total, shape.total):
        raise DimensionMismatchError(f"target of shape {target.shape} does not match axis total {shape.total}")
    if field not in FIT_FIELDS:
        raise InvalidArgumentError(f"field must be one of {FIT_FIELDS}, got {field!r}")
    if restarts < 1 or max_iter < 1:
        raise InvalidArgumentError("restarts and max_iter must be positive")

    outside = any(d & (d - 1) for d in shape.dims)
    if outside:
        logger.warning("axis shape %s has extents that are not powers of two", shape)

    template = identity_plan(shape, scheme, rounds)
    if not template.gates:
        residual = float(np.linalg.norm(np.eye(shape.total) - target) / (np.linalg.norm(target) or 1.0))
        return FitResult(template, residual, (residual,), outside)

    reachable = real_field_reaches(target, template)
    if field == AUTO_FIELD:
        field = REAL_FIELD if reachable else COMPLEX_FIELD
    elif field == REAL_FIELD and not reachable:
        logger.warning("det(target) < 0 cannot be reached with real gates on %s", shape)
    complex_field = field == COMPLEX_FIELD

    embeddings = {pair: _embedding(shape, pair) for pair in set(template.pairs)}
    starts = _start_points(template, restarts, seed, complex_field)

    def run(index):
        model = _GateProduct(template, target, embeddings, complex_field)
        theta, residual = _fit_one(model, starts[index], max_iter, target_residual)
        logger.debug("restart %d residual %.3e", index, residual)
        return template.with_tensors(model.tensors(theta)), residual

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, range(len(starts))))
    else:
        results = []
        for index in range(len(starts)):
            results.append(run(index))
            if results[-1][1] <= target_residual:
                break

    residuals = [r for _, r in results]
    best = min(range(len(results)), key=lambda k: (residuals[k], k))
    return FitResult(results[best][0], residuals[best], tuple(residuals), outside, field)


@dataclass(frozen=True, eq=False)
class SimilarityGrid:
    """
    Subspace similarity phi(i, j) between leading right singular vectors

    phi[i - 1, j - 1] holds phi(i, j); entries with i > j are NaN unless
    the full grid was requested.
    """

    phi: np.ndarray
    r1: int
    r2: int

    def rows(self):
        """(i, j, phi) records for every filled cell"""
        out = []
        for i in range(1, self.phi.shape[0] + 1):
            for j in range(1, self.phi.shape[1] + 1):
                if np.isnan(self.phi[i - 1, j - 1]):
                    continue
                out.append({"i": i, "j": j, "phi": float(self.phi[i - 1, j - 1])})
        return out


def subspace_similarity(W1, W2, max_i, max_j, full=False, tolerance=None):
    """
    phi(i, j) = ||V1[:, :i]^T V2[:, :j]||_F^2 / min(i, j)

    V1 and V2 hold the right singular vectors of W1 and W2. Requests beyond
    a matrix's numerical rank are truncated with a warning.

    Args:
        W1, W2 (np.ndarray): Matrices with the same number of columns
        max_i (int): Largest i
        max_j (int): Largest j
        full (bool): Also fill entries with i > j
        tolerance (float | None): Relative tolerance for the numerical ranks

    Returns:
        SimilarityGrid: The grid and the two numerical ranks
    """
    W1, W2 = np.asarray(W1), np.asarray(W2)
    if W1.ndim != 2 or W2.ndim != 2 or W1.shape[1] != W2.shape[1]:
        raise DimensionMismatchError(f"column counts differ: {W1.shape} vs {W2.shape}")

    _, s1, vh1 = scipy.linalg.svd(W1, full_matrices=False)
    _, s2, vh2 = scipy.linalg.svd(W2, full_matrices=False)
    r1 = int(np.sum(s1 > _threshold(W1, s1, tolerance)[1]))
    r2 = int(np.sum(s2 > _threshold(W2, s2, tolerance)[1]))

    if max_i > r1 or max_j > r2:
        message = f"requested grid {max_i}x{max_j} exceeds ranks ({r1}, {r2}); truncating"
        warnings.warn(message, stacklevel=2)
        logger.warning(message)
        max_i, max_j = min(max_i, r1), min(max_j, r2)

    # Cumulative squared overlaps over the leading i and j vectors
    overlap = (vh1[:max_i] @ vh2[:max_j].T) ** 2
    cumulative = np.cumsum(np.cumsum(overlap, axis=0), axis=1)
    i = np.arange(1, max_i + 1)[:, None]
    j = np.arange(1, max_j + 1)[None, :]
    phi = cumulative / np.minimum(i, j)
    if not full:
        phi = np.where(i <= j, phi, np.nan)
    return SimilarityGrid(phi, r1, r2)


def similarity_sweep(task, r1, r2, config):
    """
    Train LoRA adapters of ranks r1 and r2 on one task and compare their updates

    High phi only for small i or j indicates a low intrinsic rank; phi
    staying high across the grid indicates a high one.

    Returns:
        SimilarityGrid: Grid over 1 <= i <= r1, 1 <= j <= r2
    """
    deltas = []
    for rank in (r1, r2):
        report = run_recovery(task, AdapterSpec(kind="lora", rank=rank), config)
        deltas.append(lora_delta(report.adapter))
    return subspace_similarity(deltas[0], deltas[1], r1, r2)


@dataclass(frozen=True)
class ModuleSpec:
    """One adapted weight matrix per layer"""

    name: str
    out_dim: int
    in_dim: int


@dataclass(frozen=True)
class ModelConfig:
    """Layer count, adapted modules and base parameter count of a model"""

    name: str
    num_layers: int
    hidden_dim: int
    modules: tuple
    total_base_params: int = LLAMA2_7B_PARAMS

    def __post_init__(self):
        if self.total_base_params <= 0:
            raise ConfigError("total_base_params must be positive")
        if self.num_layers < 1:
            raise ConfigError("num_layers must be positive")


def load_model_config(path):
    """
    Load a ModelConfig from a JSON file

    Args:
        path (str | Path): JSON file with name, num_layers, hidden_dim,
            total_base_params and a list of modules {name, out_dim, in_dim}

    Returns:
        ModelConfig: The parsed configuration
    """
    data = read_json_strict(path, {"name", "num_layers", "hidden_dim", "total_base_params", "modules"})
    require_keys(data, {"num_layers", "hidden_dim", "modules"}, path)
    modules = []
    for entry in data["modules"]:
        if not isinstance(entry, dict) or set(entry) != {"name", "out_dim", "in_dim"}:
            raise ConfigError(f"{path}: each module needs exactly name, out_dim and in_dim")
        modules.append(ModuleSpec(str(entry["name"]), int(entry["out_dim"]), int(entry["in_dim"])))
    return ModelConfig(
        name=str(data.get("name", "model")),
        num_layers=int(data["num_layers"]),
        hidden_dim=int(data["hidden_dim"]),
        modules=tuple(modules),
        total_base_params=int(data.get("total_base_params", LLAMA2_7B_PARAMS)),
    )


def adapter_param_count(adapter, module):
    """Trainable parameters the adapter spends on one module"""
    if adapter is None:
        return 0
    if isinstance(adapter, LoraAdapter):
        return lora_param_count(adapter.rank, module.in_dim, module.out_dim)
    if (adapter.out_features, adapter.in_features) != (module.out_dim, module.in_dim):
        raise DimensionMismatchError(
            f"plan maps {adapter.in_features} -> {adapter.out_features}, "
            f"module {module.name} is {module.out_dim}x{module.in_dim}"
        )
    return cost(adapter).trainable_params


def param_fraction(adapter, model):
    """
    Trainable parameters over all adapted matrices and layers, as a percentage of the base model

    Args:
        adapter (QuantaPlan | LoraAdapter | None): Adapter placed on every listed module
        model (ModelConfig): Model description

    Returns:
        float: Percentage of total_base_params
    """
    per_layer = sum(adapter_param_count(adapter, module) for module in model.modules)
    return 100.0 * per_layer * model.num_layers / model.total_base_params
