"""Deterministic training loop, grid tuner, and multi-split benchmark runner.

Protocol constants: 10 random 60/20/20 splits (seed 42), Adam with weight
decay 5e-4, early stopping with patience 50 and at most 300 epochs, best
validation-accuracy checkpoint evaluated exactly once on test. Tuning
runs the fixed grid on the first 3 splits (2 on large datasets) with
epochs capped at 200 (150 on large), ties broken toward lower learning
rate, smaller hidden width, smaller temperature.
"""

from __future__ import annotations

import sys
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import ContractError, NumericError
from .graph import Graph, SplitSet, add_self_loops
from .model import ModelParams, ModelConfig, clone_params, init_params, model_forward, training_loss
from .optim import AdamState, adam_step
from .rng import derive_seed, substream
from .tensor import backward, clear_grads

SPLIT_RATIOS = (0.6, 0.2, 0.2)
N_SPLITS = 10
SPLIT_SEED = 42
PATIENCE = 50
MAX_EPOCHS = 300
WEIGHT_DECAY = 5e-4
LR_GRID = (0.01, 0.005)
HIDDEN_GRID_SMALL = (64, 128)
HIDDEN_GRID_LARGE = (64,)
TAU_GRID = (0.1, 0.5, 1.0, 2.0)
TUNE_SPLITS_SMALL = 3
TUNE_SPLITS_LARGE = 2
TUNE_EPOCH_CAP_SMALL = 200
TUNE_EPOCH_CAP_LARGE = 150


@dataclass
class TrainHyper:
    lr: float = 0.01
    hidden: int = 64
    tau: float = 1.0
    weight_decay: float = WEIGHT_DECAY
    patience: int = PATIENCE
    max_epochs: int = MAX_EPOCHS
    seed: int = 0

    def validate(self) -> None:
        if self.lr <= 0:
            raise ContractError(f"learning rate must be positive, got {self.lr}")
        if self.max_epochs < 0:
            raise ContractError("max_epochs must be >= 0")
        if self.max_epochs > 0 and not self.patience < self.max_epochs:
            raise ContractError(f"patience {self.patience} must be < max_epochs {self.max_epochs}")


@dataclass
class TrainReport:
    epochs: list[dict]
    best_val_epoch: int
    best_val_accuracy: float
    test_accuracy: float | None
    failed: bool
    failure: str | None
    wall_clock: float
    seed: int
    hyper: dict
    config: dict

    def to_payload(self) -> dict:
        # wall_clock is volatile and lives outside the deterministic payload
        return {
            "epochs": self.epochs,
            "best_val_epoch": self.best_val_epoch,
            "best_val_accuracy": self.best_val_accuracy,
            "test_accuracy": self.test_accuracy,
            "failed": self.failed,
            "failure": self.failure,
            "seed": self.seed,
            "hyper": self.hyper,
            "config": self.config,
        }


@dataclass
class BenchmarkReport:
    accuracies: list[float]
    mean: float
    std: float
    failed_splits: list[int]
    k: int
    hyper: dict
    config: dict
    wall_clock: float = 0.0

    def to_payload(self) -> dict:
        return {
            "accuracies": self.accuracies,
            "mean": self.mean,
            "std": self.std,
            "failed_splits": self.failed_splits,
            "k": self.k,
            "hyper": self.hyper,
            "config": self.config,
        }


def subset_metrics(logits: np.ndarray, y: np.ndarray, idx: np.ndarray) -> tuple[float, float]:
    """(cross-entropy, accuracy) over a node subset, computed outside the tape.

    argmax ties resolve toward the lower class index.
    """
    idx = np.asarray(idx, dtype=np.int64)
    z = logits[idx]
    zmax = z.max(axis=1, keepdims=True)
    logp = z - (zmax + np.log(np.exp(z - zmax).sum(axis=1, keepdims=True)))
    labels = y[idx]
    loss = float(-logp[np.arange(idx.size), labels].mean())
    acc = float((z.argmax(axis=1) == labels).mean())
    return loss, acc


def _eval_test(params: ModelParams, graph: Graph, test_idx: np.ndarray) -> float:
    logits, _ = model_forward(params, graph, train_mode=False)
    _, acc = subset_metrics(logits.data, graph.y, test_idx)
    return acc


def train(config: ModelConfig, graph: Graph, split, hyper: TrainHyper) -> tuple[TrainReport, ModelParams | None]:
    """Train one model on one split; returns (report, best-checkpoint params).

    A run that produces non-finite values is aborted and reported as failed
    (test_accuracy None, params None) rather than raised.
    """
    t0 = time.perf_counter()
    hyper.validate()
    cfg = replace(config, hidden=hyper.hidden, tau=hyper.tau)
    cfg.validate()
    graph = add_self_loops(graph)
    train_idx, val_idx, test_idx = (np.asarray(s, dtype=np.int64) for s in split)

    params = init_params(cfg, graph.d, graph.n_classes, hyper.seed)
    plist = [t for _, t in params.named_parameters()]
    drop_rng = substream(hyper.seed, "dropout")
    edge_rng = substream(hyper.seed, "edge-sample")
    state = AdamState(lr=hyper.lr, weight_decay=hyper.weight_decay)

    def eval_epoch(epoch: int) -> dict:
        logits, _ = model_forward(params, graph, train_mode=False)
        tr_loss, tr_acc = subset_metrics(logits.data, graph.y, train_idx)
        va_loss, va_acc = subset_metrics(logits.data, graph.y, val_idx)
        return {
            "epoch": epoch,
            "train_loss": tr_loss,
            "train_accuracy": tr_acc,
            "val_loss": va_loss,
            "val_accuracy": va_acc,
        }

    epochs: list[dict] = []
    failure = None
    best_params = clone_params(params)
    try:
        stats = eval_epoch(0)
        epochs.append(stats)
        best_epoch, best_acc = 0, stats["val_accuracy"]
        for epoch in range(1, hyper.max_epochs + 1):
            loss, _, _ = training_loss(params, graph, train_idx, True, drop_rng, edge_rng)
            backward(loss)
            adam_step(plist, [p.grad for p in plist], state)
            clear_grads(plist)
            stats = eval_epoch(epoch)
            epochs.append(stats)
            if stats["val_accuracy"] > best_acc:
                best_epoch, best_acc = epoch, stats["val_accuracy"]
                best_params = clone_params(params)
            if epoch - best_epoch >= hyper.patience:
                break
    except NumericError as err:
        failure = str(err)

    if failure is not None:
        report = TrainReport(
            epochs=epochs,
            best_val_epoch=-1,
            best_val_accuracy=float("nan"),
            test_accuracy=None,
            failed=True,
            failure=failure,
            wall_clock=time.perf_counter() - t0,
            seed=hyper.seed,
            hyper=asdict(hyper),
            config=asdict(cfg),
        )
        return report, None

    test_acc = _eval_test(best_params, graph, test_idx)
    report = TrainReport(
        epochs=epochs,
        best_val_epoch=best_epoch,
        best_val_accuracy=best_acc,
        test_accuracy=test_acc,
        failed=False,
        failure=None,
        wall_clock=time.perf_counter() - t0,
        seed=hyper.seed,
        hyper=asdict(hyper),
        config=asdict(cfg),
    )
    return report, best_params


def default_grid(kind: str, large: bool = False, seed: int = 0) -> list[TrainHyper]:
    """The fixed tuning grid: lr x hidden (x temperature for the cost-routed kind)."""
    hiddens = HIDDEN_GRID_LARGE if large else HIDDEN_GRID_SMALL
    taus = TAU_GRID if kind == "csna" else (1.0,)
    return [
        TrainHyper(lr=lr, hidden=h, tau=tau, seed=seed)
        for lr in LR_GRID
        for h in hiddens
        for tau in taus
    ]


def tune(
    grid: list[TrainHyper],
    config: ModelConfig,
    graph: Graph,
    tuning_splits: list,
    epoch_cap: int,
    jobs: int = 1,
) -> tuple[TrainHyper, list[dict]]:
    """Exhaustive grid search by mean validation accuracy over the tuning splits.

    Ties break lexicographically toward (lower lr, smaller hidden, smaller
    tau). A grid cell with any failed run is ranked below every clean cell.
    """
    if not grid:
        raise ContractError("empty tuning grid")
    if not tuning_splits:
        raise ContractError("need at least one tuning split")
    work = []
    for cell, hyper in enumerate(grid):
        capped = replace(hyper, max_epochs=epoch_cap, patience=min(hyper.patience, epoch_cap - 1))
        for split in tuning_splits:
            work.append((config, graph, split, capped))
    results = _map_jobs(_train_report_only, work, jobs)

    table: list[dict] = []
    per_cell = len(tuning_splits)
    for cell, hyper in enumerate(grid):
        reports = results[cell * per_cell : (cell + 1) * per_cell]
        accs = [r.best_val_accuracy for r in reports]
        failed = any(r.failed for r in reports)
        mean = float("nan") if failed else float(np.mean(accs))
        table.append(
            {
                "lr": hyper.lr,
                "hidden": hyper.hidden,
                "tau": hyper.tau,
                "val_accuracies": [None if r.failed else a for r, a in zip(reports, accs)],
                "mean_val_accuracy": None if failed else mean,
                "failed": failed,
            }
        )

    def rank(i: int):
        row = table[i]
        mean = -1.0 if row["failed"] else row["mean_val_accuracy"]
        return (-mean, row["lr"], row["hidden"], row["tau"])

    best = min(range(len(grid)), key=rank)
    return grid[best], table


def run_benchmark(
    config: ModelConfig,
    graph: Graph,
    splits: SplitSet,
    hyper: TrainHyper,
    jobs: int = 1,
) -> BenchmarkReport:
    """Train on every split with the full epoch budget; aggregate mean and std.

    Each split trains with its own seed derived from (hyper.seed, split
    index). Failed runs are excluded from the aggregate with a warning.
    """
    t0 = time.perf_counter()
    work = [
        (config, graph, splits[i], replace(hyper, seed=derive_seed(hyper.seed, f"split-{i}")))
        for i in range(len(splits))
    ]
    reports = _map_jobs(_train_report_only, work, jobs)
    accs = []
    failed = []
    for i, r in enumerate(reports):
        if r.failed:
            failed.append(i)
            print(f"warning: split {i} failed ({r.failure}); excluded from aggregate", file=sys.stderr)
        else:
            accs.append(r.test_accuracy)
    mean = float(np.mean(accs)) if accs else float("nan")
    std = float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0
    return BenchmarkReport(
        accuracies=accs,
        mean=mean,
        std=std,
        failed_splits=failed,
        k=len(splits),
        hyper=asdict(hyper),
        config=asdict(config),
        wall_clock=time.perf_counter() - t0,
    )


def _train_report_only(args) -> TrainReport:
    config, graph, split, hyper = args
    report, _ = train(config, graph, split, hyper)
    return report


def _map_jobs(fn, items: list, jobs: int) -> list:
    """Order-preserving map, optionally fanned out over worker processes."""
    if jobs is None or jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as pool:
        return list(pool.map(fn, items))
