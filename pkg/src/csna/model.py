"""Cost-routed dual-channel graph layer, GCN/MLP baselines, and losses.

The cost-sensitive layer projects node states, measures per-edge distance
in that projection, squashes it into a concordance score, and routes each
message through a concordant and a discordant channel whose weights are
segment-softmax-normalized per source node. A per-node gate mixes the two
channel outputs with an ego transform. The lite variant uses the observed
projection distance as the whole cost; the extended variant adds a learned
softplus term on the concatenated endpoint projections.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ContractError, DimensionError
from .graph import Graph
from .rng import substream
from .tensor import (
    DTYPES,
    Tensor,
    add_bias,
    concat_cols,
    dropout,
    gather_rows,
    matmul,
    mean_all,
    mul,
    relu,
    row_pair_distance,
    row_softmax,
    scale,
    scale_rows,
    segment_softmax,
    segment_weighted_sum,
    sigmoid,
    slice_cols,
    softmax_cross_entropy,
    softplus,
    sub,
    transpose,
)

GATE_CHANNELS = ("con", "dis", "self")
MODEL_KINDS = ("mlp", "gcn", "csna")
VARIANTS = ("lite", "extended")
NORMALIZATION_SIDES = ("source", "destination")


@dataclass
class ModelConfig:
    kind: str = "csna"
    layers: int = 2
    hidden: int = 64
    dropout: float = 0.5
    variant: str = "lite"
    edge_sampling_rate: float = 0.0
    normalization_side: str = "source"
    lambda_cal: float = 0.1
    tau: float = 1.0
    precision: str = "float64"

    def validate(self) -> None:
        if self.kind not in MODEL_KINDS:
            raise ContractError(f"unknown model kind {self.kind!r}")
        if self.variant not in VARIANTS:
            raise ContractError(f"unknown variant {self.variant!r}")
        if self.normalization_side not in NORMALIZATION_SIDES:
            raise ContractError(f"unknown normalization side {self.normalization_side!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractError(f"dropout must be in [0, 1), got {self.dropout}")
        if not 0.0 <= self.edge_sampling_rate < 1.0:
            raise ContractError(f"edge sampling rate must be in [0, 1), got {self.edge_sampling_rate}")
        if self.tau <= 0.0:
            raise ContractError(f"temperature must be positive, got {self.tau}")
        if self.layers < 1:
            raise ContractError("need at least one layer")
        if self.hidden < 1:
            raise ContractError("hidden width must be positive")
        if self.precision not in DTYPES:
            raise ContractError(f"precision must be one of {sorted(DTYPES)}")

    @property
    def np_dtype(self):
        return DTYPES[self.precision]


@dataclass
class CsnaLayerParams:
    """Learnables of one cost-routed layer (all square in the hidden width)."""

    proj: Tensor          # cost-space projection
    w_con: Tensor         # concordant-channel transform
    w_dis: Tensor         # discordant-channel transform
    w_self: Tensor        # ego transform
    w_gate: Tensor        # (3, 3*hidden) gate map
    b_gate: Tensor        # (1, 3) gate bias, initialized to [0, 0, 1]
    cost_vec: Tensor | None = None  # (2*hidden, 1), extended variant only
    tau: float = 1.0

    def tensors(self, prefix: str) -> list[tuple[str, Tensor]]:
        out = [
            (f"{prefix}.proj", self.proj),
            (f"{prefix}.w_con", self.w_con),
            (f"{prefix}.w_dis", self.w_dis),
            (f"{prefix}.w_self", self.w_self),
            (f"{prefix}.w_gate", self.w_gate),
            (f"{prefix}.b_gate", self.b_gate),
        ]
        if self.cost_vec is not None:
            out.append((f"{prefix}.cost_vec", self.cost_vec))
        return out


@dataclass
class GcnLayerParams:
    w: Tensor

    def tensors(self, prefix: str) -> list[tuple[str, Tensor]]:
        return [(f"{prefix}.w", self.w)]


@dataclass
class ModelParams:
    config: ModelConfig
    in_dim: int
    n_classes: int
    init_seed: int
    w_in: Tensor
    b_in: Tensor
    layers: list
    w_out: Tensor
    b_out: Tensor

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [("w_in", self.w_in), ("b_in", self.b_in)]
        for i, layer in enumerate(self.layers):
            out.extend(layer.tensors(f"layer{i}"))
        out.extend([("w_out", self.w_out), ("b_out", self.b_out)])
        return out


@dataclass
class EdgeRouting:
    """Per-edge routing state of one layer, on the edges actually used."""

    src: np.ndarray
    dst: np.ndarray
    cost: Tensor         # (E, 1) nonnegative edge cost
    score: Tensor        # (E, 1) concordance in (0, 1)
    con_weights: Tensor  # segment-normalized concordant weights
    dis_weights: Tensor  # segment-normalized discordant weights


@dataclass
class ModelAux:
    routings: list = field(default_factory=list)
    gates: list = field(default_factory=list)


def glorot(rng: np.random.Generator, rows: int, cols: int, dtype) -> Tensor:
    bound = np.sqrt(6.0 / (rows + cols))
    return Tensor(rng.uniform(-bound, bound, size=(rows, cols)).astype(dtype), requires_grad=True)


def init_params(config: ModelConfig, in_dim: int, n_classes: int, seed: int) -> ModelParams:
    """Deterministic init from substream(seed, "init").

    Weight matrices are Glorot-uniform; biases start at zero except the
    gate bias [0, 0, 1]; the gate map starts at zero so every gate row is
    softmax([0, 0, 1]) and the model begins near MLP-like behavior.
    """
    config.validate()
    rng = substream(seed, "init")
    dt = config.np_dtype
    h = config.hidden
    w_in = glorot(rng, h, in_dim, dt)
    b_in = Tensor(np.zeros((1, h), dtype=dt), requires_grad=True)
    layers: list = []
    if config.kind == "gcn":
        for _ in range(config.layers):
            layers.append(GcnLayerParams(w=glorot(rng, h, h, dt)))
    elif config.kind == "csna":
        for _ in range(config.layers):
            cost_vec = None
            if config.variant == "extended":
                cost_vec = glorot(rng, 2 * h, 1, dt)
            layers.append(
                CsnaLayerParams(
                    proj=glorot(rng, h, h, dt),
                    w_con=glorot(rng, h, h, dt),
                    w_dis=glorot(rng, h, h, dt),
                    w_self=glorot(rng, h, h, dt),
                    w_gate=Tensor(np.zeros((3, 3 * h), dtype=dt), requires_grad=True),
                    b_gate=Tensor(np.array([[0.0, 0.0, 1.0]], dtype=dt), requires_grad=True),
                    cost_vec=cost_vec,
                    tau=config.tau,
                )
            )
    w_out = glorot(rng, n_classes, h, dt)
    b_out = Tensor(np.zeros((1, n_classes), dtype=dt), requires_grad=True)
    return ModelParams(
        config=replace(config),
        in_dim=in_dim,
        n_classes=n_classes,
        init_seed=seed,
        w_in=w_in,
        b_in=b_in,
        layers=layers,
        w_out=w_out,
        b_out=b_out,
    )


def clone_params(params: ModelParams) -> ModelParams:
    """Deep copy of all parameter tensors (for checkpoints)."""
    copied = load_param_arrays(params, {name: t.data.copy() for name, t in params.named_parameters()})
    return copied


def load_param_arrays(template: ModelParams, arrays: dict[str, np.ndarray]) -> ModelParams:
    """Rebuild a ModelParams with the same structure but the given arrays."""
    fresh = init_params(template.config, template.in_dim, template.n_classes, template.init_seed)
    for name, t in fresh.named_parameters():
        if name not in arrays:
            raise ContractError(f"missing parameter {name!r}")
        arr = np.asarray(arrays[name], dtype=t.data.dtype)
        if arr.shape != t.data.shape:
            raise DimensionError(f"parameter {name!r}: shape {arr.shape} vs {t.data.shape}")
        t.data = arr
    return fresh


# cost routing ----------------------------------------------------------------


def edge_costs(h: Tensor, src: np.ndarray, dst: np.ndarray, layer: CsnaLayerParams, variant: str) -> Tensor:
    """Per-edge cost: projection distance, plus the learned term when extended.

    Self-pairs get a projection distance of exactly 0; the extended learned
    term stays active on them (it is generically positive there).
    """
    proj = matmul(h, _t(layer.proj))
    cost = row_pair_distance(proj, src, dst)
    if variant == "extended":
        if layer.cost_vec is None:
            raise ContractError("extended variant needs a cost_vec parameter")
        pair = concat_cols([gather_rows(proj, src), gather_rows(proj, dst)])
        learned = softplus(matmul(pair, layer.cost_vec))
        cost = cost + learned
    return cost


def concordance(cost: Tensor, tau: float) -> Tensor:
    """Soft concordance score sigmoid(-cost / tau), monotone decreasing in cost."""
    if tau <= 0:
        raise ContractError(f"temperature must be positive, got {tau}")
    return sigmoid(scale(cost, -1.0 / tau))


def sample_edges(g: Graph, rate: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Drop each undirected edge pair with probability `rate`.

    Both directions of a pair are kept or dropped together; self-loops are
    never dropped.
    """
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"edge sampling rate must be in [0, 1), got {rate}")
    loops = g.src == g.dst
    lo = np.minimum(g.src, g.dst)
    hi = np.maximum(g.src, g.dst)
    key = lo * g.n + hi
    uniq, inverse = np.unique(key[~loops], return_inverse=True)
    keep_pair = rng.random(uniq.size) >= rate
    keep = np.ones(g.n_edges, dtype=bool)
    keep[~loops] = keep_pair[inverse]
    return g.src[keep], g.dst[keep]


def _t(w: Tensor) -> Tensor:
    # weights are stored (out, in); forward multiplies h @ w.T
    return transpose(w)


def csna_layer(
    h: Tensor,
    g: Graph,
    layer: CsnaLayerParams,
    config: ModelConfig,
    train_mode: bool,
    edges: tuple[np.ndarray, np.ndarray] | None = None,
    edge_rng: np.random.Generator | None = None,
):
    """One cost-routed layer pass: returns (output, routing, gates).

    The output is the bare gated combination; residuals, activation, and
    dropout are the caller's business.
    """
    if not g.has_self_loops:
        raise ContractError("cost-routed layer requires self-loops")
    if edges is None:
        if train_mode and config.edge_sampling_rate > 0.0:
            if edge_rng is None:
                raise ContractError("edge sampling needs an rng")
            edges = sample_edges(g, config.edge_sampling_rate, edge_rng)
        else:
            edges = (g.src, g.dst)
    src, dst = edges
    if config.normalization_side == "source":
        seg, nbr = src, dst
    else:
        seg, nbr = dst, src

    cost = edge_costs(h, src, dst, layer, config.variant)
    score = concordance(cost, layer.tau)
    ones = Tensor(np.ones_like(score.data))
    con_w = segment_softmax(score, seg, g.n)
    dis_w = segment_softmax(sub(ones, score), seg, g.n)

    msgs_con = gather_rows(matmul(h, _t(layer.w_con)), nbr)
    msgs_dis = gather_rows(matmul(h, _t(layer.w_dis)), nbr)
    h_con = segment_weighted_sum(con_w, msgs_con, seg, g.n)
    h_dis = segment_weighted_sum(dis_w, msgs_dis, seg, g.n)
    h_self = matmul(h, _t(layer.w_self))

    gate_logits = add_bias(matmul(concat_cols([h_con, h_dis, h_self]), _t(layer.w_gate)), layer.b_gate)
    gates = row_softmax(gate_logits)
    out = scale_rows(h_con, slice_cols(gates, 0, 1))
    out = out + scale_rows(h_dis, slice_cols(gates, 1, 2))
    out = out + scale_rows(h_self, slice_cols(gates, 2, 3))

    routing = EdgeRouting(src=src, dst=dst, cost=cost, score=score, con_weights=con_w, dis_weights=dis_w)
    return out, routing, gates


def gcn_layer(h: Tensor, g: Graph, w: Tensor) -> Tensor:
    """Symmetric-normalized aggregation: row i gets sum_j (h W)[j] / sqrt(d_i d_j).

    Degrees count self-loops, which must already be present.
    """
    if not g.has_self_loops:
        raise ContractError("gcn layer requires self-loops")
    deg = np.bincount(g.src, minlength=g.n).astype(h.dtype)
    coef = Tensor((1.0 / np.sqrt(deg[g.src] * deg[g.dst])).reshape(-1, 1))
    msgs = gather_rows(matmul(h, _t(w)), g.dst)
    return segment_weighted_sum(coef, msgs, g.src, g.n)


def model_forward(
    params: ModelParams,
    g: Graph,
    train_mode: bool = False,
    dropout_rng: np.random.Generator | None = None,
    edge_rng: np.random.Generator | None = None,
):
    """Full pipeline: input MLP -> stacked graph layers (+identity residual) -> head.

    Returns (logits, aux) where aux carries per-layer routing and gates for
    the cost-routed kind. The mlp kind skips the graph layers entirely.
    """
    config = params.config
    config.validate()
    if g.d != params.in_dim:
        raise ContractError(f"graph has {g.d} features, model expects {params.in_dim}")
    if config.kind != "mlp" and not g.has_self_loops:
        raise ContractError("graph layers require self-loops (call add_self_loops first)")
    rate = config.dropout

    x = Tensor(g.x.astype(config.np_dtype, copy=False))
    h = dropout(relu(add_bias(matmul(x, _t(params.w_in)), params.b_in)), rate, dropout_rng, train_mode)

    aux = ModelAux()
    if config.kind != "mlp":
        edges = None
        if config.kind == "csna" and train_mode and config.edge_sampling_rate > 0.0:
            if edge_rng is None:
                raise ContractError("edge sampling needs an rng")
            edges = sample_edges(g, config.edge_sampling_rate, edge_rng)
        for layer in params.layers:
            if config.kind == "gcn":
                z = gcn_layer(h, g, layer.w)
            else:
                z, routing, gates = csna_layer(h, g, layer, config, train_mode, edges=edges)
                aux.routings.append(routing)
                aux.gates.append(gates)
            h = dropout(relu(z + h), rate, dropout_rng, train_mode)

    logits = add_bias(matmul(h, _t(params.w_out)), params.b_out)
    return logits, aux


# losses -----------------------------------------------------------------------


def cross_entropy_on(logits: Tensor, y: np.ndarray, idx: np.ndarray) -> Tensor:
    """Mean cross-entropy over the node subset `idx`."""
    return softmax_cross_entropy(gather_rows(logits, idx), y[np.asarray(idx, dtype=np.int64)])


def calibration_loss(routing: EdgeRouting, g: Graph, train_idx: np.ndarray) -> Tensor:
    """Squared hinge pushing cost below the 0/1 disagreement indicator.

    Uses only non-self-loop edges whose both endpoints are train nodes;
    returns exact 0 when no such edge exists.
    """
    in_train = np.zeros(g.n, dtype=bool)
    in_train[np.asarray(train_idx, dtype=np.int64)] = True
    mask = in_train[routing.src] & in_train[routing.dst] & (routing.src != routing.dst)
    if not mask.any():
        return Tensor(np.zeros((1, 1), dtype=routing.cost.dtype))
    idx = np.flatnonzero(mask)
    disagree = (g.y[routing.src[idx]] != g.y[routing.dst[idx]]).astype(routing.cost.dtype)
    sel = gather_rows(routing.cost, idx)
    hinge = relu(sub(sel, Tensor(disagree.reshape(-1, 1))))
    return mean_all(mul(hinge, hinge))


def training_loss(
    params: ModelParams,
    g: Graph,
    train_idx: np.ndarray,
    train_mode: bool = True,
    dropout_rng: np.random.Generator | None = None,
    edge_rng: np.random.Generator | None = None,
):
    """CE on train nodes, plus the calibration term for the cost-routed kind.

    The calibration penalty is averaged across layers and scaled by
    lambda_cal. Returns (loss, logits, aux).
    """
    logits, aux = model_forward(params, g, train_mode, dropout_rng, edge_rng)
    loss = cross_entropy_on(logits, g.y, train_idx)
    if params.config.kind == "csna" and params.config.lambda_cal > 0.0 and aux.routings:
        cal = calibration_loss(aux.routings[0], g, train_idx)
        for routing in aux.routings[1:]:
            cal = cal + calibration_loss(routing, g, train_idx)
        loss = loss + scale(cal, params.config.lambda_cal / len(aux.routings))
    return loss, logits, aux


# checkpoints --------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: ModelParams) -> None:
    """JSON dump of config + parameters; round-trips bitwise at 64-bit."""
    obj = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(params.config),
        "in_dim": params.in_dim,
        "n_classes": params.n_classes,
        "init_seed": params.init_seed,
        "params": {
            name: {"shape": list(t.data.shape), "data": t.data.ravel().tolist()}
            for name, t in params.named_parameters()
        },
    }
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoint(path) -> ModelParams:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    if obj.get("format_version") != CHECKPOINT_VERSION:
        raise ContractError(f"unsupported checkpoint version {obj.get('format_version')!r}")
    config = ModelConfig(**obj["config"])
    template = init_params(config, int(obj["in_dim"]), int(obj["n_classes"]), int(obj["init_seed"]))
    arrays = {
        name: np.asarray(spec["data"], dtype=config.np_dtype).reshape(spec["shape"])
        for name, spec in obj["params"].items()
    }
    return load_param_arrays(template, arrays)
