"""Edge-routing regime diagnostics: concordance AUC, gate means, histograms.

The AUC treats the concordance score as a binary classifier for
same-class vs different-class edges. It is computed with the exact
rank-statistic (Mann-Whitney) formula with midrank tie handling, so it
is deterministic and invariant under strictly monotone transforms of
the scores.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .graph import Graph
from .model import ModelAux


def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(values.size, dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def concordance_auc(scores: np.ndarray, same_class: np.ndarray) -> float | None:
    """Rank AUC of scores for same-class (positive) vs different-class edges.

    Ties contribute 1/2. Returns None when either class is empty (the
    statistic is undefined there).
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    same_class = np.asarray(same_class, dtype=bool).ravel()
    if scores.shape != same_class.shape:
        raise ContractError("scores and edge-type labels differ in length")
    n_pos = int(same_class.sum())
    n_neg = int(same_class.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = _midranks(scores)
    u = ranks[same_class].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def gate_summary(gates_per_layer: list[np.ndarray]) -> list[tuple[float, float, float]]:
    """Column means of the per-node gate rows, per layer (con, dis, self)."""
    out = []
    for gates in gates_per_layer:
        arr = np.asarray(gates, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 3:
            raise ContractError(f"gate matrix must be (n, 3), got {arr.shape}")
        m = arr.mean(axis=0)
        out.append((float(m[0]), float(m[1]), float(m[2])))
    return out


def cost_histogram(scores: np.ndarray, same_class: np.ndarray, bins: int = 20):
    """Binned score counts over [0, 1] per edge type (rightmost bin closed).

    Returns (bin_edges, same_counts, diff_counts).
    """
    if bins < 2:
        raise ContractError(f"need at least 2 bins, got {bins}")
    scores = np.asarray(scores, dtype=np.float64).ravel()
    same_class = np.asarray(same_class, dtype=bool).ravel()
    edges = np.linspace(0.0, 1.0, bins + 1)
    same_counts, _ = np.histogram(scores[same_class], bins=edges)
    diff_counts, _ = np.histogram(scores[~same_class], bins=edges)
    return edges, same_counts, diff_counts


@dataclass
class DiagnosticsReport:
    auc: float | None
    gate_means: list[tuple[float, float, float]] | None
    bin_edges: list[float] = field(default_factory=list)
    same_counts: list[int] = field(default_factory=list)
    diff_counts: list[int] = field(default_factory=list)
    edge_scope: str = "full"

    def to_dict(self) -> dict:
        return {
            "auc": self.auc,
            "gate_means": None if self.gate_means is None else [list(g) for g in self.gate_means],
            "histogram": {
                "bin_edges": self.bin_edges,
                "same_counts": self.same_counts,
                "diff_counts": self.diff_counts,
            },
            "edge_scope": self.edge_scope,
        }


def undirected_scores(g: Graph, routing) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Canonical undirected view of one layer's routing scores.

    Takes the src < dst direction of every non-self-loop edge. Returns
    (us, vs, scores, same_class).
    """
    mask = routing.src < routing.dst
    us, vs = routing.src[mask], routing.dst[mask]
    return us, vs, routing.score.data[mask, 0], g.y[us] == g.y[vs]


def build_report(g: Graph, aux: ModelAux, test_idx=None, bins: int = 20) -> DiagnosticsReport:
    """Diagnostics from one forward pass's routing/gates (layer 0 scores).

    By default every non-self-loop edge counts; passing `test_idx`
    restricts to edges with at least one endpoint in the test set. Models
    without routing (mlp, gcn) yield absent AUC/gates.
    """
    if not aux.routings:
        return DiagnosticsReport(auc=None, gate_means=None, edge_scope="full")
    us, vs, scores, same = undirected_scores(g, aux.routings[0])
    scope = "full"
    if test_idx is not None:
        in_test = np.zeros(g.n, dtype=bool)
        in_test[np.asarray(test_idx, dtype=np.int64)] = True
        keep = in_test[us] | in_test[vs]
        scores, same = scores[keep], same[keep]
        scope = "test-incident"
    auc = concordance_auc(scores, same)
    edges, same_counts, diff_counts = cost_histogram(scores, same, bins)
    return DiagnosticsReport(
        auc=auc,
        gate_means=gate_summary([gt.data for gt in aux.gates]),
        bin_edges=edges.tolist(),
        same_counts=same_counts.tolist(),
        diff_counts=diff_counts.tolist(),
        edge_scope=scope,
    )
