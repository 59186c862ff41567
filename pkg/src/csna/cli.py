"""Command-line front end.

Subcommands: validate, sample, splits, train, tune, benchmark, csbm,
diagnose. Every run writes its artifacts into one output directory with
a config_echo.json; report JSON files keep volatile timing under a
separate "timing" key so the "payload" region is byte-identical across
reruns with the same arguments and seed.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import csbm as csbm_lab
from . import diagnostics as diag
from . import training
from .errors import ContractError, GraphFormatError, NumericError
from .graph import (
    add_self_loops,
    edge_homophily,
    generate_splits,
    load_graph,
    load_splits,
    save_graph,
    save_splits,
)
from .model import ModelConfig, load_checkpoint, model_forward, save_checkpoint
from .training import TrainHyper

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _out_dir(args, parts: list[str]) -> Path:
    """Resolve the run directory: --out wins, else a named dir under the root."""
    if args.out:
        path = Path(args.out)
    else:
        root = Path(os.environ.get("CSNA_OUT_ROOT", "runs"))
        digest = hashlib.sha256(json.dumps(parts, sort_keys=True).encode()).hexdigest()[:10]
        path = root / f"{args.command}-{digest}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def _echo_config(out: Path, args) -> None:
    echo = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    (out / "config_echo.json").write_text(json.dumps(echo, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")


def _write_report(path: Path, payload: dict, timing: dict | None = None) -> None:
    obj = {"payload": payload, "timing": timing or {}}
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _probability(text: str) -> float:
    value = float(text)
    if not 0.0 < value < 1.0:
        raise argparse.ArgumentTypeError(f"probability must lie in (0, 1), got {text}")
    return value


def _rate(text: str) -> float:
    value = float(text)
    if not 0.0 <= value < 1.0:
        raise argparse.ArgumentTypeError(f"rate must lie in [0, 1), got {text}")
    return value


def _ratios(text: str) -> tuple[float, float, float]:
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 3 or abs(sum(parts) - 1.0) > 1e-9:
        raise argparse.ArgumentTypeError(f"--ratios needs three values summing to 1, got {text}")
    return tuple(parts)


def _float_list(text: str) -> list[float]:
    return [float(p) for p in text.split(",")]


# subcommands -------------------------------------------------------------


def cmd_validate(args) -> int:
    g = load_graph(args.data)
    print(f"name: {g.name}")
    print(f"nodes: {g.n}")
    print(f"undirected edges: {g.n_undirected}")
    print(f"features: {g.d}")
    print(f"classes: {g.n_classes}")
    print(f"edge homophily: {edge_homophily(g):.4f}")
    return EXIT_OK


def cmd_sample(args) -> int:
    params = csbm_lab.CsbmParams(n=args.n, p=args.p, q=args.q, mu=args.mu, n_classes=args.classes, d=args.d)
    g = csbm_lab.sample_csbm(params, args.seed)
    save_graph(g, args.out)
    print(f"wrote CSBM sample: n={g.n}, undirected edges={g.n_undirected}, "
          f"homophily={edge_homophily(g):.4f} -> {args.out}")
    return EXIT_OK


def cmd_splits(args) -> int:
    if args.n is not None:
        n = args.n
    elif args.n_from:
        n = load_graph(args.n_from).n
    else:
        raise ContractError("pass --n or --n-from")
    splits = generate_splits(n, ratios=args.ratios, k=args.k, seed=args.seed)
    out = Path(args.out) if args.out else Path("splits.json")
    save_splits(splits, out)
    print(f"wrote {len(splits)} splits of n={n} -> {out}")
    return EXIT_OK


def _model_config(args) -> ModelConfig:
    return ModelConfig(
        kind=args.model,
        layers=args.layers,
        hidden=args.hidden,
        dropout=args.dropout,
        variant=args.variant,
        edge_sampling_rate=args.edge_sampling,
        normalization_side=args.norm_side,
        lambda_cal=args.lambda_cal,
        tau=args.tau,
        precision=args.precision,
    )


def _hyper(args) -> TrainHyper:
    return TrainHyper(
        lr=args.lr,
        hidden=args.hidden,
        tau=args.tau,
        weight_decay=args.weight_decay,
        patience=args.patience,
        max_epochs=args.max_epochs,
        seed=args.seed,
    )


def cmd_train(args) -> int:
    g = load_graph(args.data)
    splits = load_splits(args.splits)
    out = _out_dir(args, [args.data, args.splits, str(args.seed)])
    _echo_config(out, args)
    report, best = training.train(_model_config(args), g, splits[args.split_index], _hyper(args))
    _write_report(out / "train_report.json", report.to_payload(), {"wall_clock": report.wall_clock})
    if report.failed:
        print(f"run failed: {report.failure}")
        return EXIT_NUMERIC
    save_checkpoint(out / "checkpoint.json", best)
    print(f"best val accuracy {report.best_val_accuracy:.4f} at epoch {report.best_val_epoch}; "
          f"test accuracy {report.test_accuracy:.4f}")
    return EXIT_OK


def cmd_tune(args) -> int:
    g = load_graph(args.data)
    splits = load_splits(args.splits)
    out = _out_dir(args, [args.data, args.splits, str(args.seed)])
    _echo_config(out, args)
    grid = training.default_grid(args.model, large=args.large, seed=args.seed)
    n_tune = args.tuning_splits or (training.TUNE_SPLITS_LARGE if args.large else training.TUNE_SPLITS_SMALL)
    cap = args.epoch_cap or (training.TUNE_EPOCH_CAP_LARGE if args.large else training.TUNE_EPOCH_CAP_SMALL)
    tuning = [splits[i] for i in range(min(n_tune, len(splits)))]
    best, table = training.tune(grid, _model_config(args), g, tuning, cap, jobs=args.jobs)
    _write_report(out / "tune_report.json", {"best": asdict(best), "grid": table})
    print(f"best hyper: lr={best.lr}, hidden={best.hidden}, tau={best.tau}")
    return EXIT_OK


def cmd_benchmark(args) -> int:
    g = load_graph(args.data)
    splits = load_splits(args.splits)
    out = _out_dir(args, [args.data, args.splits, str(args.seed)])
    _echo_config(out, args)
    report = training.run_benchmark(_model_config(args), g, splits, _hyper(args), jobs=args.jobs)
    _write_report(out / "benchmark_report.json", report.to_payload(), {"wall_clock": report.wall_clock})
    lines = ["split,test_accuracy"]
    lines += [f"{i},{acc!r}" for i, acc in enumerate(report.accuracies)]
    (out / "benchmark_splits.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"test accuracy over {report.k} splits: {report.mean:.4f} +/- {report.std:.4f}")
    return EXIT_OK


def cmd_csbm(args) -> int:
    params = csbm_lab.CsbmParams(n=args.n, p=args.p, q=args.q, mu=args.mu, n_classes=args.classes, d=args.d)
    out = _out_dir(args, [str(args.n), str(args.p), str(args.q), str(args.seed)])
    _echo_config(out, args)
    t0 = time.perf_counter()
    csv_lines = ["p,q,w_plus,w_minus,C,n,trial,empirical_factor"]
    if args.sweep_ratio:
        boundary = params.q / params.p
        ratios = [m * boundary for m in args.sweep_ratio]
        rows = csbm_lab.sign_boundary_sweep(params, ratios, trials=args.trials, seed=args.seed)
        print(f"sign boundary q/p = {boundary:.6g}")
        print(f"{'w+/w-':>12} {'predicted':>12} {'empirical':>12} {'std_err':>10}")
        for row in rows:
            se = row["std_error"] if row["std_error"] is not None else float("nan")
            print(f"{row['ratio']:>12.6g} {row['predicted']:>12.6g} {row['empirical']:>12.6g} {se:>10.2g}")
            for t, f in enumerate(row["factors"]):
                csv_lines.append(
                    f"{params.p!r},{params.q!r},{row['ratio']!r},1.0,{params.n_classes},{params.n},{t},{f!r}"
                )
        payload = {"sweep": [{k: v for k, v in row.items() if k != "factors"} for row in rows]}
    else:
        report, factors = csbm_lab.factor_trials(params, args.w_plus, args.w_minus, trials=args.trials, seed=args.seed)
        print(f"predicted factor: {report.predicted:.6g}")
        se = report.std_error if report.std_error is not None else float("nan")
        print(f"empirical factor: {report.empirical:.6g} (std error {se:.2g}, {report.trials} trials)")
        for t, f in enumerate(factors):
            csv_lines.append(
                f"{params.p!r},{params.q!r},{args.w_plus!r},{args.w_minus!r},{params.n_classes},{params.n},{t},{f!r}"
            )
        payload = {"report": report.to_dict()}
    _write_report(out / "theorem_report.json", payload, {"wall_clock": time.perf_counter() - t0})
    (out / "factors.csv").write_text("\n".join(csv_lines) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    params = load_checkpoint(args.checkpoint)
    g = load_graph(args.data)
    if g.d != params.in_dim or g.n_classes != params.n_classes:
        raise ContractError(
            f"checkpoint expects d={params.in_dim}, C={params.n_classes}; "
            f"dataset has d={g.d}, C={g.n_classes}"
        )
    out = _out_dir(args, [args.checkpoint, args.data])
    _echo_config(out, args)
    g = add_self_loops(g)
    test_idx = None
    if args.edges == "test":
        if not args.splits:
            raise ContractError("--edges test needs --splits")
        test_idx = load_splits(args.splits)[args.split_index][2]
    _, aux = model_forward(params, g, train_mode=False)
    report = diag.build_report(g, aux, test_idx=test_idx, bins=args.bins)
    _write_report(out / "diagnostics.json", report.to_dict())
    lines = ["bin,same_count,diff_count"]
    edges = report.bin_edges
    for i in range(len(report.same_counts)):
        mid = 0.5 * (edges[i] + edges[i + 1])
        lines.append(f"{mid!r},{report.same_counts[i]},{report.diff_counts[i]}")
    (out / "cost_hist.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    if report.auc is None:
        print("model has no edge routing; AUC and gate means absent")
    else:
        print(f"concordance AUC: {report.auc:.4f}")
        for i, gm in enumerate(report.gate_means):
            print(f"gate means layer {i}: con={gm[0]:.3f}, dis={gm[1]:.3f}, self={gm[2]:.3f}")
    return EXIT_OK


# parser -------------------------------------------------------------------


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", choices=("mlp", "gcn", "csna"), required=True)
    p.add_argument("--variant", choices=("lite", "extended"), default="lite")
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--dropout", type=_rate, default=0.5)
    p.add_argument("--edge-sampling", type=_rate, default=0.0, dest="edge_sampling")
    p.add_argument("--norm-side", choices=("source", "destination"), default="source", dest="norm_side")
    p.add_argument("--lambda-cal", type=float, default=0.1, dest="lambda_cal")
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--precision", choices=("float64", "float32"), default="float64")
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--weight-decay", type=float, default=training.WEIGHT_DECAY, dest="weight_decay")
    p.add_argument("--patience", type=int, default=training.PATIENCE)
    p.add_argument("--max-epochs", type=int, default=training.MAX_EPOCHS, dest="max_epochs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="csna", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="load a dataset directory and print its statistics")
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("sample", help="write one CSBM sample as a dataset directory")
    p.add_argument("--n", type=int, default=600)
    p.add_argument("--p", type=_probability, default=0.05)
    p.add_argument("--q", type=_probability, default=0.15)
    p.add_argument("--mu", type=float, default=2.0)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--d", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("splits", help="generate train/val/test splits")
    p.add_argument("--n", type=int)
    p.add_argument("--n-from", dest="n_from", help="dataset directory to read n from")
    p.add_argument("--k", type=int, default=training.N_SPLITS)
    p.add_argument("--seed", type=int, default=training.SPLIT_SEED)
    p.add_argument("--ratios", type=_ratios, default=training.SPLIT_RATIOS)
    p.add_argument("--out")
    p.set_defaults(func=cmd_splits)

    p = sub.add_parser("train", help="train one model on one split")
    p.add_argument("--data", required=True)
    p.add_argument("--splits", required=True)
    p.add_argument("--split-index", type=int, default=0, dest="split_index")
    _add_model_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("tune", help="grid-search hyperparameters on the tuning splits")
    p.add_argument("--data", required=True)
    p.add_argument("--splits", required=True)
    _add_model_flags(p)
    p.add_argument("--large", action="store_true", help="use the large-dataset grid and caps")
    p.add_argument("--tuning-splits", type=int, default=0, dest="tuning_splits")
    p.add_argument("--epoch-cap", type=int, default=0, dest="epoch_cap")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("benchmark", help="train on every split and aggregate")
    p.add_argument("--data", required=True)
    p.add_argument("--splits", required=True)
    _add_model_flags(p)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("csbm", help="Monte Carlo check of the aggregation scaling factor")
    p.add_argument("--n", type=int, default=4000)
    p.add_argument("--p", type=_probability, default=0.01)
    p.add_argument("--q", type=_probability, default=0.04)
    p.add_argument("--mu", type=float, default=2.0)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--d", type=int, default=8)
    p.add_argument("--w-plus", type=float, default=1.0, dest="w_plus")
    p.add_argument("--w-minus", type=float, default=1.0, dest="w_minus")
    p.add_argument("--sweep-ratio", type=_float_list, default=None, dest="sweep_ratio",
                   help="comma-separated multiples of the boundary q/p to sweep")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_csbm)

    p = sub.add_parser("diagnose", help="routing diagnostics from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--edges", choices=("all", "test"), default="all")
    p.add_argument("--splits")
    p.add_argument("--split-index", type=int, default=0, dest="split_index")
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--out")
    p.set_defaults(func=cmd_diagnose)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return int(err.code) if err.code else EXIT_OK
    try:
        return args.func(args)
    except (GraphFormatError,) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except (ContractError, FileNotFoundError, json.JSONDecodeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
