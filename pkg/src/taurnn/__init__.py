"""Delay-gated recurrent cells with hand-derived gradients.

The package bundles the cell family (a gated unit whose candidate update
mixes an instantaneous term with an explicitly delayed one), exact
backpropagation through the delayed connection, a fixed-step delay
differential equation integrator used to generate the benchmark series, a
small training harness, and randomized verification batteries for the
theoretical guarantees the cells are designed around.
"""

from .bptt import (
    BoundReport,
    ParamGrads,
    backward,
    fd_gradient,
    grad_norm_bound_check,
    linear_bptt_input_grads,
    prop1_oracle,
    run_linear,
    state_jacobian,
)
from .cells import (
    CellKind,
    CellParams,
    CellVariant,
    HiddenHistory,
    dead_param_groups,
    effective_param_count,
    init_params,
    load_params,
    param_shapes,
    run_batch,
    run_sequence,
    save_params,
    step_linear,
    step_simple_delay_gru,
    step_taugru,
)
from .dde import (
    DdeProblem,
    DenseSolution,
    LipschitzReport,
    gen_enso,
    gen_mackey_glass,
    gen_weierstrass_input,
    integrate,
    integrate_continuous_taugru,
    read_series_file,
    write_series_file,
)
from .numerics import inf_norm, operator_norm
from .rng import SplitMix64, split_seed
from .training import (
    AdamState,
    EpochRecord,
    SeedSpread,
    TrainConfig,
    TrainResult,
    ablate,
    adam_step,
    build_task_data,
    evaluate_seed_spread,
    gen_adding_task,
    make_prediction_task,
    train,
)
from .verify import VERIFY_SUITES, BatteryResult, run_suites

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "BatteryResult",
    "BoundReport",
    "CellKind",
    "CellParams",
    "CellVariant",
    "DdeProblem",
    "DenseSolution",
    "EpochRecord",
    "HiddenHistory",
    "LipschitzReport",
    "ParamGrads",
    "SeedSpread",
    "SplitMix64",
    "TrainConfig",
    "TrainResult",
    "VERIFY_SUITES",
    "ablate",
    "adam_step",
    "backward",
    "build_task_data",
    "dead_param_groups",
    "effective_param_count",
    "evaluate_seed_spread",
    "fd_gradient",
    "gen_adding_task",
    "gen_enso",
    "gen_mackey_glass",
    "gen_weierstrass_input",
    "grad_norm_bound_check",
    "inf_norm",
    "init_params",
    "integrate",
    "integrate_continuous_taugru",
    "linear_bptt_input_grads",
    "load_params",
    "make_prediction_task",
    "operator_norm",
    "param_shapes",
    "prop1_oracle",
    "read_series_file",
    "run_batch",
    "run_linear",
    "run_sequence",
    "run_suites",
    "save_params",
    "split_seed",
    "state_jacobian",
    "step_linear",
    "step_simple_delay_gru",
    "step_taugru",
    "train",
    "write_series_file",
]
