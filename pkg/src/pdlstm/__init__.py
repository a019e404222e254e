"""Physics-residual ConvLSTM surrogate for 2-D periodic PDEs with PDDO derivative filters."""

from .errors import ConfigError, FormatError, NumericError, PdlstmError, ShapeError
from .grid import Field, FieldSequence, Grid, make_grid, read_sequence, sample_field, write_sequence
from .network import ModelParams, init_params, predict, rollout
from .pddo import DerivativeFilterSet, build_filter_set, fdm_filter_set, read_filters, write_filters
from .physics import PdeSpec, pde_rhs, sample_burgers_ic
from .reference import SolveConfig, solve
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train

__all__ = [
    "ConfigError", "FormatError", "NumericError", "PdlstmError", "ShapeError",
    "Field", "FieldSequence", "Grid", "make_grid", "read_sequence", "sample_field", "write_sequence",
    "ModelParams", "init_params", "predict", "rollout",
    "DerivativeFilterSet", "build_filter_set", "fdm_filter_set", "read_filters", "write_filters",
    "PdeSpec", "pde_rhs", "sample_burgers_ic",
    "SolveConfig", "solve",
    "TrainConfig", "load_checkpoint", "save_checkpoint", "train",
]
