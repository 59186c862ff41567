"""Cost-sensitive dual-channel graph aggregation with a CSBM theorem lab."""

from .errors import ContractError, DimensionError, GraphFormatError, NumericError
from .graph import Graph, SplitSet, add_self_loops, edge_homophily, generate_splits, load_graph, save_graph
from .model import (
    CsnaLayerParams,
    EdgeRouting,
    ModelConfig,
    ModelParams,
    calibration_loss,
    concordance,
    csna_layer,
    edge_costs,
    gcn_layer,
    init_params,
    load_checkpoint,
    model_forward,
    save_checkpoint,
)
from .optim import AdamState, adam_step
from .tensor import Tape, Tensor, backward
from .training import BenchmarkReport, TrainHyper, TrainReport, run_benchmark, train, tune

__version__ = "0.1.0"
