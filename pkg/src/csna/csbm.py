"""Contextual SBM sampling and Monte Carlo checks of the aggregation theory.

The lab measures how one round of weighted, symmetrically normalized
aggregation (self-loops included) rescales the class-mean separation:
the closed-form prediction is (p*w+ - q*w-) / (p*w+ + (C-1)*q*w-), which
reduces to (p-q)/(p+q) for uniform weights in the binary case. The sign
flips exactly at w+/w- = q/p.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractError
from .graph import Graph, add_self_loops
from .rng import derive_seed, substream
from .tensor import _scatter_sum_rows


@dataclass(frozen=True)
class CsbmParams:
    """Two- or multi-class contextual SBM with Gaussian class-mean features.

    For C == 2 the class means sit at +/- (mu/2) e1; for C > 2 they sit at
    (mu/2) times C orthogonal unit axes (requires d >= C).
    """

    n: int
    p: float
    q: float
    mu: float = 2.0
    n_classes: int = 2
    d: int = 8

    def validate(self) -> None:
        if self.n_classes < 2:
            raise ContractError("need at least two classes")
        if self.n % self.n_classes != 0:
            raise ContractError(f"n={self.n} not divisible by C={self.n_classes}")
        if not (0.0 <= self.p <= 1.0 and 0.0 <= self.q <= 1.0):
            raise ContractError("edge probabilities must lie in [0, 1]")
        if self.mu < 0:
            raise ContractError("mean separation must be nonnegative")
        if self.n_classes == 2:
            if self.d < 1:
                raise ContractError("need at least one feature dimension")
        elif self.d < self.n_classes:
            raise ContractError(f"C={self.n_classes} orthogonal means need d >= C, got d={self.d}")


def class_means(params: CsbmParams) -> np.ndarray:
    """(C, d) matrix of class means."""
    params.validate()
    means = np.zeros((params.n_classes, params.d))
    if params.n_classes == 2:
        means[0, 0] = +params.mu / 2.0
        means[1, 0] = -params.mu / 2.0
    else:
        for c in range(params.n_classes):
            means[c, c] = params.mu / 2.0
    return means


def sample_csbm(params: CsbmParams, seed: int) -> Graph:
    """Draw one graph: Bernoulli(p) intra-class pairs, Bernoulli(q) inter-class.

    Labels are balanced contiguous blocks; features are unit-variance
    Gaussians around the class means. Edges are drawn before features so
    the stream layout is stable.
    """
    params.validate()
    rng = substream(seed, "csbm")
    per = params.n // params.n_classes
    y = np.repeat(np.arange(params.n_classes), per)

    iu, ju = np.triu_indices(params.n, k=1)
    prob = np.where(y[iu] == y[ju], params.p, params.q)
    keep = rng.random(iu.size) < prob
    us, vs = iu[keep], ju[keep]

    x = class_means(params)[y] + rng.standard_normal((params.n, params.d))
    return Graph(
        n=params.n,
        src=np.concatenate([us, vs]),
        dst=np.concatenate([vs, us]),
        x=x,
        y=y,
        n_classes=params.n_classes,
        has_self_loops=False,
        name="csbm",
    )


def weights_by_edge_type(g: Graph, w_plus: float, w_minus: float) -> np.ndarray:
    """Per-directed-edge weights: w_plus on same-class edges (self-loops
    included, they are same-class by definition), w_minus otherwise."""
    same = g.y[g.src] == g.y[g.dst]
    return np.where(same, float(w_plus), float(w_minus))


def predicted_factor(p: float, q: float, w_plus: float, w_minus: float, n_classes: int = 2) -> float:
    """Closed-form class-mean scaling factor of one weighted aggregation round.

    Positive (sign-preserving) iff w_plus / w_minus > q / p.
    """
    if w_plus == 0.0 and w_minus == 0.0:
        raise ContractError("weights cannot both be zero")
    denom = p * w_plus + (n_classes - 1) * q * w_minus
    if denom <= 0.0:
        raise ContractError("aggregation denominator must be positive")
    return (p * w_plus - q * w_minus) / denom


def empirical_factor(g: Graph, weights: np.ndarray, params: CsbmParams) -> float:
    """Measured class-mean scaling after one weighted aggregation round.

    Aggregates with h_i = sum_j w_ij x_j / sqrt(d_i d_j), d_i the weighted
    degree (self-loops included), then projects each class-pair mean
    difference onto the original mean axis and divides by the original
    separation (averaged over pairs for C > 2). With mu == 0 the raw
    projected difference is returned.
    """
    g = add_self_loops(g)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (g.n_edges,):
        raise ContractError(f"need one weight per directed edge, got {weights.shape}")
    if g.n_classes != params.n_classes:
        raise ContractError(f"graph has {g.n_classes} classes, params expect {params.n_classes}")
    counts = np.bincount(g.y, minlength=params.n_classes)
    if (counts == 0).any():
        raise ContractError("every class needs at least one node")

    wdeg = np.bincount(g.src, weights=weights, minlength=g.n)
    if (wdeg <= 0).any():
        raise ContractError("every node needs positive weighted degree")
    coef = weights / np.sqrt(wdeg[g.src] * wdeg[g.dst])
    h = _scatter_sum_rows(coef[:, None] * g.x[g.dst], g.src, g.n)

    means = class_means(params)
    class_h = np.stack([h[g.y == c].mean(axis=0) for c in range(g.n_classes)])
    factors = []
    for a in range(g.n_classes):
        for b in range(a + 1, g.n_classes):
            axis = means[a] - means[b]
            sep = np.linalg.norm(axis)
            if sep > 0:
                factors.append(float((class_h[a] - class_h[b]) @ axis / (sep * sep)))
            else:
                unit = np.zeros(g.x.shape[1])
                if g.n_classes == 2:
                    unit[0] = 1.0
                else:
                    unit[a], unit[b] = 1.0 / np.sqrt(2), -1.0 / np.sqrt(2)
                factors.append(float((class_h[a] - class_h[b]) @ unit))
    return float(np.mean(factors))


@dataclass
class TheoremReport:
    predicted: float
    empirical: float
    trials: int
    std_error: float | None
    w_plus: float
    w_minus: float
    n_classes: int
    p: float
    q: float
    n: int

    def to_dict(self) -> dict:
        return {
            "predicted": self.predicted,
            "empirical": self.empirical,
            "trials": self.trials,
            "std_error": self.std_error,
            "w_plus": self.w_plus,
            "w_minus": self.w_minus,
            "C": self.n_classes,
            "p": self.p,
            "q": self.q,
            "n": self.n,
        }


def factor_trials(
    params: CsbmParams,
    w_plus: float,
    w_minus: float,
    trials: int = 20,
    seed: int = 0,
) -> tuple[TheoremReport, list[float]]:
    """Monte Carlo estimate of the scaling factor under type-based weights."""
    if trials < 1:
        raise ContractError("need at least one trial")
    factors = []
    for t in range(trials):
        g = sample_csbm(params, derive_seed(seed, f"trial-{t}"))
        g = add_self_loops(g)
        w = weights_by_edge_type(g, w_plus, w_minus)
        factors.append(empirical_factor(g, w, params))
    report = TheoremReport(
        predicted=predicted_factor(params.p, params.q, w_plus, w_minus, params.n_classes),
        empirical=float(np.mean(factors)),
        trials=trials,
        std_error=float(np.std(factors, ddof=1) / np.sqrt(trials)) if trials > 1 else None,
        w_plus=w_plus,
        w_minus=w_minus,
        n_classes=params.n_classes,
        p=params.p,
        q=params.q,
        n=params.n,
    )
    return report, factors


def sign_boundary_sweep(
    params: CsbmParams,
    ratios: Sequence[float],
    trials: int = 20,
    seed: int = 0,
) -> list[dict]:
    """Sweep weight ratios w+/w- across the sign boundary q/p.

    The ratio list must straddle q/p. Each trial samples one graph and
    evaluates every ratio on it (weights scale out, so w- is pinned at 1).
    Returns one row per ratio with the prediction and the trial statistics.
    """
    params.validate()
    ratios = [float(r) for r in ratios]
    if not ratios:
        raise ContractError("empty ratio list")
    if any(r <= 0 for r in ratios):
        raise ContractError("weight ratios must be positive")
    boundary = params.q / params.p if params.p > 0 else float("inf")
    if not (min(ratios) < boundary < max(ratios)):
        raise ContractError(f"ratios must straddle the sign boundary q/p = {boundary}")

    per_ratio: list[list[float]] = [[] for _ in ratios]
    for t in range(trials):
        g = add_self_loops(sample_csbm(params, derive_seed(seed, f"trial-{t}")))
        for k, ratio in enumerate(ratios):
            w = weights_by_edge_type(g, ratio, 1.0)
            per_ratio[k].append(empirical_factor(g, w, params))
    rows = []
    for k, ratio in enumerate(ratios):
        vals = per_ratio[k]
        rows.append(
            {
                "ratio": ratio,
                "predicted": predicted_factor(params.p, params.q, ratio, 1.0, params.n_classes),
                "empirical": float(np.mean(vals)),
                "std_error": float(np.std(vals, ddof=1) / np.sqrt(trials)) if trials > 1 else None,
                "trials": trials,
                "factors": vals,
            }
        )
    return rows


@dataclass
class ScatterReport:
    trace_within: float
    d_eff: float

    def to_dict(self) -> dict:
        return {"trace_within": self.trace_within, "d_eff": self.d_eff}


def scatter_measure(g: Graph, weights: np.ndarray) -> ScatterReport:
    """Within-class scatter of row-normalized weighted aggregation.

    Weights are normalized per source node; the report carries the trace
    of the within-class scatter (sum over nodes of squared deviation from
    the class mean of the aggregated rows) and the effective neighborhood
    size 1 / mean_i(sum_j w_ij^2). Measured only — no bound is asserted.
    """
    g = add_self_loops(g)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (g.n_edges,):
        raise ContractError(f"need one weight per directed edge, got {weights.shape}")
    wsum = np.bincount(g.src, weights=weights, minlength=g.n)
    if (wsum <= 0).any():
        raise ContractError("every node needs positive total weight")
    norm = weights / wsum[g.src]
    h = _scatter_sum_rows(norm[:, None] * g.x[g.dst], g.src, g.n)

    trace = 0.0
    for c in range(g.n_classes):
        rows = h[g.y == c]
        if rows.size:
            trace += float(((rows - rows.mean(axis=0)) ** 2).sum())
    sq = np.bincount(g.src, weights=norm * norm, minlength=g.n)
    return ScatterReport(trace_within=trace, d_eff=float(1.0 / sq.mean()))


def csna_routing_factor(g: Graph, scores: np.ndarray, params: CsbmParams) -> TheoremReport:
    """Plug measured concordance scores into the theory as edge weights.

    w+ and w- are estimated as the mean score on same-class and cross-class
    non-self-loop edges; the empirical factor aggregates with the raw
    per-edge scores (self-loops keep their own score).
    """
    g = add_self_loops(g)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (g.n_edges,):
        raise ContractError(f"need one score per directed edge, got {scores.shape}")
    off = g.src != g.dst
    same = off & (g.y[g.src] == g.y[g.dst])
    diff = off & ~ (g.y[g.src] == g.y[g.dst])
    if not same.any() or not diff.any():
        raise ContractError("need both same-class and cross-class edges")
    s_plus = float(scores[same].mean())
    s_minus = float(scores[diff].mean())
    return TheoremReport(
        predicted=predicted_factor(params.p, params.q, s_plus, s_minus, params.n_classes),
        empirical=empirical_factor(g, scores, params),
        trials=1,
        std_error=None,
        w_plus=s_plus,
        w_minus=s_minus,
        n_classes=params.n_classes,
        p=params.p,
        q=params.q,
        n=params.n,
    )
