# QuanTA - tensor-circuit adapters for linear layers

from quanta.analysis import (
    FitResult, ModelConfig, ModuleSpec, RankReport, SimilarityGrid, adapter_param_count,
    load_model_config, numerical_rank, param_fraction, real_field_reaches, similarity_sweep,
    subspace_similarity, theorem2_bounds, universality_fit
)
from quanta.circuit import (
    AdaptedLinear, ComplexityReport, GateSpec, QuantaPlan, apply, apply_fused, build_plan,
    build_rect_plan, cost, identity_plan, init_zero_delta, materialize, merge, stack_rounds
)
from quanta.errors import (
    ConfigError, ContractionError, DimensionMismatchError, InvalidArgumentError, NumericalError,
    PlanValidationError, QtfFormatError, QuantaError, TrainingDivergedError, ValidationError
)
from quanta.lora import LoraAdapter, init_lora, lora_apply, lora_delta, lora_merge, lora_param_count
from quanta.qtf import QtfRecord, dumps, loads, read_qtf, write_qtf
from quanta.tensor_core import (
    AxisShape, DenseTensor, EinsumExpr, apply_gate, contract, factorize, flatten,
    gen_apply_expr, gen_operator_expr, gen_plan_exprs, reshape_to_axes, untouched_axes
)
from quanta.training import (
    AdapterSpec, SyntheticTask, TrainConfig, TrainReport, eckart_young_floor, grad_check,
    grad_lora, grad_plan, make_task, run_recovery
)

__version__ = "0.1.0"
