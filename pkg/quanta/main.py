#!/usr/bin/env python3
# QuanTA - Main File
# Command-line entry point tying plans, analysis and experiments to QTF, CSV and JSON files

import argparse
import logging
import sys

import numpy as np

from quanta.analysis import (
    load_model_config, numerical_rank, param_fraction, subspace_similarity, theorem2_bounds,
    universality_fit
)
from quanta.circuit import (
    AdaptedLinear, QuantaPlan, build_plan, build_rect_plan, init_zero_delta, materialize, merge
)
from quanta.config import load_experiment_config
from quanta.constants import (
    ALL_PAIRS, AUTO_FIELD, COMPLEX_FIELD, DEFAULT_INIT_SCALE, EXIT_NUMERICAL, EXIT_OK, EXIT_VALIDATION,
    FIT_FIELDS, FIT_MAX_ITER, GAUSSIAN_INIT, INIT_MODES, LORA_ALPHA
)
from quanta.errors import NumericalError, QtfFormatError, TrainingDivergedError, ValidationError
from quanta.lora import LoraAdapter, init_lora, lora_merge
from quanta.qtf import QtfRecord, read_qtf, write_qtf
from quanta.tensor_core import AxisShape, gen_apply_expr, gen_operator_expr
from quanta.training import eckart_young_floor, make_task, run_recovery
from quanta.utils import default_thread_count, write_csv, write_json

logger = logging.getLogger(__name__)


def _records(path, kinds):
    """Records of the given value types from a QTF file"""
    found = [r for r in read_qtf(path) if isinstance(r.value, kinds)]
    if not found:
        raise QtfFormatError(f"{path} holds no record of the expected kind")
    return found


def _matrix(path):
    return _records(path, np.ndarray)[0].value


def _plans(path):
    """(trainable record, frozen plan or None) from a plan file"""
    records = _records(path, QuantaPlan)
    trainable = [r for r in records if not r.value.frozen]
    frozen = [r.value for r in records if r.value.frozen]
    if not trainable:
        raise QtfFormatError(f"{path} holds only frozen plans")
    return trainable[0], (frozen[0] if frozen else None)


def cmd_gen_expr(args):
    expr = gen_operator_expr(args.n) if args.operator else gen_apply_expr(args.n)
    print(expr.text)


def cmd_init(args):
    """Write a freshly initialized trainable/frozen plan pair or a LoRA adapter"""
    if args.lora_rank is not None:
        if args.dims is None:
            raise ValidationError("a LoRA adapter needs --dims OUT IN")
        out_dim, in_dim = args.dims
        adapter = init_lora(in_dim, out_dim, args.lora_rank, args.alpha, args.seed, args.init_scale)
        write_qtf(args.out, [QtfRecord(adapter, args.seed)])
        print(f"LoRA r={adapter.rank} {out_dim}x{in_dim}: {adapter.rank * (in_dim + out_dim)} parameters")
        return

    if args.shape is None:
        raise ValidationError("a QuanTA plan needs --shape")
    if args.out_shape is not None or args.features is not None:
        in_features, out_features = args.features or (None, None)
        plan = build_rect_plan(args.shape, args.out_shape or args.shape, in_features, out_features,
                               args.scheme, args.seed, args.init_scale, args.rounds)
    else:
        plan = build_plan(args.shape, args.scheme, args.seed, args.init_scale, args.rounds, init=args.init)
    trainable, frozen = init_zero_delta(plan)
    write_qtf(args.out, [QtfRecord(trainable, args.seed), QtfRecord(frozen, args.seed)])
    print(f"QuanTA {plan.in_shape} -> {plan.out_shape}: {plan.n_gates} gates, "
          f"{sum(g.n_params for g in plan.gates)} parameters")


def cmd_materialize(args):
    record, _ = _plans(args.plan)
    matrix = materialize(record.value)
    write_qtf(args.out, [QtfRecord(matrix, record.seed)])
    print(f"materialized {matrix.shape[0]}x{matrix.shape[1]} operator")


def cmd_merge(args):
    base_record = _records(args.base, np.ndarray)[0]
    adapters = _records(args.plan, (QuantaPlan, LoraAdapter))
    if isinstance(adapters[0].value, LoraAdapter):
        seed = adapters[0].seed
        merged = lora_merge(adapters[0].value, base_record.value)
    else:
        record, frozen = _plans(args.plan)
        seed = record.seed
        merged = merge(AdaptedLinear(base_record.value, record.value, frozen))
    write_qtf(args.out, [QtfRecord(merged, seed)])
    print(f"merged weight {merged.shape[0]}x{merged.shape[1]}")


def cmd_rank(args):
    if args.plan is not None:
        record, _ = _plans(args.plan)
        report = theorem2_bounds(record.value, args.tol)
        print(f"rank {report.rank}")
        print(f"bounds [{report.lower_bound}, {report.upper_bound}]")
        print(f"gate ranks {list(report.gate_ranks)}")
        if report.tolerance_sensitive:
            print("tolerance-sensitive: lower bound not asserted")
        if not report.verified:
            raise NumericalError(f"rank {report.rank} outside [{report.lower_bound}, {report.upper_bound}]")
        return

    matrix = _matrix(args.matrix)
    if args.minus is not None:
        other = _matrix(args.minus)
        if other.shape != matrix.shape:
            raise ValidationError(f"cannot subtract {other.shape} from {matrix.shape}")
        matrix = matrix - other
    report = numerical_rank(matrix, args.tol)
    print(f"rank {report.rank}")
    print(f"threshold {report.threshold:.6e}")


def cmd_subspace(args):
    grid = subspace_similarity(_matrix(args.w1), _matrix(args.w2), args.max_i, args.max_j, args.full)
    rows = grid.rows()
    if args.csv:
        write_csv(args.csv, rows, ["i", "j", "phi"])
    for row in rows:
        print(f"{row['i']}\t{row['j']}\t{row['phi']:.12f}")


def cmd_count(args):
    adapter = _records(args.plan, (QuantaPlan, LoraAdapter))[0].value
    model = load_model_config(args.model)
    print(f"{param_fraction(adapter, model):.3f}%")


def _write_outputs(config, task, report):
    summary = dict(report.summary(), name=config.name, task_dim=task.dim, task_rank=task.rank_of_delta)
    if config.adapter.kind == "lora":
        summary["eckart_young_floor"] = eckart_young_floor(task.delta_star, config.adapter.rank)
    if config.csv_path:
        write_csv(config.csv_path, report.loss_rows(), ["step", "loss"])
    if config.json_path:
        write_json(config.json_path, summary)
    if config.qtf_path and report.adapter is not None and not report.diverged:
        if isinstance(report.adapter, LoraAdapter):
            records = [QtfRecord(report.adapter, config.seed)]
        else:
            records = [QtfRecord(report.adapter.plan, config.seed),
                       QtfRecord(report.adapter.delta_matrix(), config.seed)]
        write_qtf(config.qtf_path, records)
    return summary


def cmd_train(args):
    config = load_experiment_config(args.config)
    task = make_task(config.task_dim, config.task_rank, config.seed, config.batch_size)
    try:
        report = run_recovery(task, config.adapter, config.train)
    except TrainingDivergedError as e:
        if e.report is not None:
            _write_outputs(config, task, e.report)
        raise
    summary = _write_outputs(config, task, report)
    print(f"{config.name}: {summary['adapter_kind']} params={summary['param_count']} "
          f"final_loss={summary['final_loss']:.6e} recovery_error={summary['recovery_error']:.6e}")


def cmd_fit(args):
    target = _matrix(args.target)
    workers = args.workers or default_thread_count()
    result = universality_fit(target, args.shape, args.rounds, args.restarts, args.seed,
                              max_iter=args.max_iter, workers=workers, field=args.field)
    print(f"residual {result.residual:.6e}")
    if result.field == COMPLEX_FIELD:
        print("gates are complex-valued")
    if args.out:
        write_qtf(args.out, [QtfRecord(result.plan, args.seed)])
    if result.outside_theorem:
        print("axis extents are not powers of two")


def _pair(text):
    parts = text.split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected two comma-separated integers, got {text!r}")
    return tuple(int(p) for p in parts)


def build_parser():
    parser = argparse.ArgumentParser(prog="quanta", description="Tensor-circuit adapters for linear layers")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for INFO, -vv for DEBUG")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-expr", help="print the all-pairs contraction expression")
    p.add_argument("--n", type=int, required=True, help="number of axes")
    p.add_argument("--operator", action="store_true", help="gates-only expression for the full operator")
    p.set_defaults(func=cmd_gen_expr)

    p = sub.add_parser("init", help="write a zero-delta plan pair or a LoRA adapter")
    p.add_argument("--shape", type=AxisShape.parse, help="axis shape such as 16-8-8-4")
    p.add_argument("--out-shape", type=AxisShape.parse, help="output axis shape for rectangular plans")
    p.add_argument("--features", type=_pair, help="IN,OUT feature counts when they differ from the shapes")
    p.add_argument("--scheme", default=ALL_PAIRS)
    p.add_argument("--rounds", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--init-scale", type=float, default=DEFAULT_INIT_SCALE)
    p.add_argument("--init", choices=INIT_MODES, default=GAUSSIAN_INIT, help="gate initialization")
    p.add_argument("--lora-rank", type=int, help="write a LoRA adapter of this rank instead")
    p.add_argument("--dims", type=int, nargs=2, metavar=("OUT", "IN"), help="LoRA extents")
    p.add_argument("--alpha", type=float, default=LORA_ALPHA)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("materialize", help="dense matrix of a plan")
    p.add_argument("--plan", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_materialize)

    p = sub.add_parser("merge", help="fold an adapter into a base weight")
    p.add_argument("--base", required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("rank", help="numerical rank of a matrix, or of a plan with its bounds")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--matrix")
    group.add_argument("--plan")
    p.add_argument("--minus", help="subtract this matrix first")
    p.add_argument("--tol", type=float, default=None)
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("subspace", help="subspace similarity grid of two matrices")
    p.add_argument("--w1", required=True)
    p.add_argument("--w2", required=True)
    p.add_argument("--max-i", type=int, required=True)
    p.add_argument("--max-j", type=int, required=True)
    p.add_argument("--full", action="store_true", help="also fill entries with i > j")
    p.add_argument("--csv")
    p.set_defaults(func=cmd_subspace)

    p = sub.add_parser("count", help="trainable parameters as a percentage of a model")
    p.add_argument("--plan", required=True)
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_count)

    p = sub.add_parser("train", help="run a recovery experiment from a JSON config")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("fit", help="fit stacked gate rounds to a target matrix")
    p.add_argument("--target", required=True)
    p.add_argument("--shape", type=AxisShape.parse, required=True)
    p.add_argument("--rounds", type=int, default=3)
    p.add_argument("--restarts", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-iter", type=int, default=FIT_MAX_ITER)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--field", choices=FIT_FIELDS, default=AUTO_FIELD,
                   help="gate scalars; auto switches to complex when real gates cannot reach det(target)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_fit)
    return parser


def main(argv=None):
    """Parse arguments, run one command and return its exit code"""
    args = build_parser().parse_args(argv)
    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")

    try:
        args.func(args)
    except (ValidationError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalError as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
