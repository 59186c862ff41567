"""Graph container, dataset file I/O, homophily, and deterministic splits.

On-disk dataset format (one directory per dataset):
  meta.json     {"n": int, "d": int, "C": int, "name": str}
  features.csv  n rows, d comma-separated reals
  labels.csv    n rows, one integer in [0, C)
  edges.csv     one undirected edge "i,j" per line, i < j, no self-loops

Edges are stored internally as a directed list with both directions
present, so per-source segment kernels run in a single pass.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, GraphFormatError
from .rng import substream


@dataclass(frozen=True)
class Graph:
    """Immutable node-classification graph.

    `src`/`dst` hold every directed edge (each undirected edge appears in
    both directions); `has_self_loops` means exactly one (i, i) per node.
    """

    n: int
    src: np.ndarray
    dst: np.ndarray
    x: np.ndarray
    y: np.ndarray
    n_classes: int
    has_self_loops: bool = False
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "src", np.asarray(self.src, dtype=np.int64))
        object.__setattr__(self, "dst", np.asarray(self.dst, dtype=np.int64))
        object.__setattr__(self, "y", np.asarray(self.y, dtype=np.int64))
        if self.src.shape != self.dst.shape:
            raise ContractError("edge endpoint arrays differ in length")
        if self.src.size:
            lo = min(self.src.min(), self.dst.min())
            hi = max(self.src.max(), self.dst.max())
            if lo < 0 or hi >= self.n:
                raise ContractError(f"edge endpoint outside [0, {self.n})")
        key = self.src * self.n + self.dst
        if np.unique(key).size != key.size:
            raise ContractError("duplicate directed edges")
        loops = int((self.src == self.dst).sum())
        if self.has_self_loops and loops != self.n:
            raise ContractError(f"expected {self.n} self-loops, found {loops}")
        if not self.has_self_loops and loops:
            raise ContractError("unflagged graph contains self-loops")
        if self.x.shape[0] != self.n or self.y.shape[0] != self.n:
            raise ContractError("feature/label row count does not match n")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.n_classes):
            raise ContractError(f"labels outside [0, {self.n_classes})")

    @property
    def n_edges(self) -> int:
        """Directed edge count, self-loops included."""
        return int(self.src.size)

    @property
    def n_undirected(self) -> int:
        """Undirected non-self-loop edge count."""
        return int((self.src < self.dst).sum())

    @property
    def d(self) -> int:
        return int(self.x.shape[1])


def add_self_loops(g: Graph) -> Graph:
    """Return `g` with exactly one (i, i) per node. Idempotent."""
    if g.has_self_loops:
        return g
    loops = np.arange(g.n, dtype=np.int64)
    return Graph(
        n=g.n,
        src=np.concatenate([g.src, loops]),
        dst=np.concatenate([g.dst, loops]),
        x=g.x,
        y=g.y,
        n_classes=g.n_classes,
        has_self_loops=True,
        name=g.name,
    )


def edge_homophily(g: Graph) -> float:
    """Fraction of non-self-loop edges whose endpoints share a label.

    Self-loops are excluded by definition, so the ratio is invariant to
    add_self_loops.
    """
    mask = g.src != g.dst
    if not mask.any():
        raise ContractError("homophily undefined on a graph without edges")
    return float((g.y[g.src[mask]] == g.y[g.dst[mask]]).mean())


def permute(g: Graph, perm: np.ndarray) -> Graph:
    """Relabel nodes: old node i becomes perm[i]."""
    perm = np.asarray(perm, dtype=np.int64)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(g.n)
    x = np.empty_like(g.x)
    x[perm] = g.x
    y = np.empty_like(g.y)
    y[perm] = g.y
    return Graph(
        n=g.n,
        src=perm[g.src],
        dst=perm[g.dst],
        x=x,
        y=y,
        n_classes=g.n_classes,
        has_self_loops=g.has_self_loops,
        name=g.name,
    )


# dataset I/O ---------------------------------------------------------------


def _read_lines(path: Path) -> list[str]:
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise GraphFormatError("file not found", path=path)
    return [ln for ln in text.splitlines() if ln.strip()]


def load_graph(path) -> Graph:
    """Load a dataset directory into a validated Graph (no self-loops)."""
    root = Path(path)
    meta_path = root / "meta.json"
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise GraphFormatError("file not found", path=meta_path)
    except json.JSONDecodeError as err:
        raise GraphFormatError(f"invalid JSON: {err}", path=meta_path)
    for key in ("n", "d", "C"):
        if key not in meta:
            raise GraphFormatError(f"meta.json missing key {key!r}", path=meta_path)
    n, d, c = int(meta["n"]), int(meta["d"]), int(meta["C"])
    if n <= 0 or d <= 0 or c <= 0:
        raise GraphFormatError("n, d, C must be positive", path=meta_path)

    feat_path = root / "features.csv"
    lines = _read_lines(feat_path)
    if len(lines) != n:
        raise GraphFormatError(f"expected {n} feature rows, found {len(lines)}", path=feat_path)
    x = np.empty((n, d), dtype=np.float64)
    for i, ln in enumerate(lines):
        parts = ln.split(",")
        if len(parts) != d:
            raise GraphFormatError(f"expected {d} values, found {len(parts)}", path=feat_path, line=i + 1)
        try:
            x[i] = [float(p) for p in parts]
        except ValueError:
            raise GraphFormatError("non-numeric feature value", path=feat_path, line=i + 1)

    lab_path = root / "labels.csv"
    lines = _read_lines(lab_path)
    if len(lines) != n:
        raise GraphFormatError(f"expected {n} label rows, found {len(lines)}", path=lab_path)
    y = np.empty(n, dtype=np.int64)
    for i, ln in enumerate(lines):
        try:
            y[i] = int(ln.strip())
        except ValueError:
            raise GraphFormatError("non-integer label", path=lab_path, line=i + 1)
        if not 0 <= y[i] < c:
            raise GraphFormatError(f"label {y[i]} outside [0, {c})", path=lab_path, line=i + 1)

    edge_path = root / "edges.csv"
    lines = _read_lines(edge_path)
    seen: set[int] = set()
    us = np.empty(len(lines), dtype=np.int64)
    vs = np.empty(len(lines), dtype=np.int64)
    for k, ln in enumerate(lines):
        parts = ln.split(",")
        if len(parts) != 2:
            raise GraphFormatError("expected 'i,j'", path=edge_path, line=k + 1)
        try:
            i, j = int(parts[0]), int(parts[1])
        except ValueError:
            raise GraphFormatError("non-integer endpoint", path=edge_path, line=k + 1)
        if not (0 <= i < n and 0 <= j < n):
            raise GraphFormatError(f"endpoint outside [0, {n})", path=edge_path, line=k + 1)
        if i >= j:
            raise GraphFormatError("edges must satisfy i < j (no self-loops)", path=edge_path, line=k + 1)
        key = i * n + j
        if key in seen:
            raise GraphFormatError(f"duplicate edge {i},{j}", path=edge_path, line=k + 1)
        seen.add(key)
        us[k], vs[k] = i, j

    return Graph(
        n=n,
        src=np.concatenate([us, vs]),
        dst=np.concatenate([vs, us]),
        x=x,
        y=y,
        n_classes=c,
        has_self_loops=False,
        name=str(meta.get("name", root.name)),
    )


def save_graph(g: Graph, path) -> None:
    """Write a Graph to the documented dataset directory format."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    meta = {"n": g.n, "d": g.d, "C": g.n_classes, "name": g.name or root.name}
    (root / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    rows = [",".join(repr(v) for v in row) for row in g.x.tolist()]
    (root / "features.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    (root / "labels.csv").write_text("\n".join(str(v) for v in g.y.tolist()) + "\n", encoding="utf-8")
    mask = g.src < g.dst
    pairs = sorted(zip(g.src[mask].tolist(), g.dst[mask].tolist()))
    (root / "edges.csv").write_text("".join(f"{i},{j}\n" for i, j in pairs), encoding="utf-8")


# splits ---------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSet:
    """k disjoint train/val/test partitions of {0..n-1}."""

    seed: int
    ratios: tuple[float, float, float]
    splits: list[dict] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.splits)

    def __getitem__(self, i: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        s = self.splits[i]
        return (
            np.asarray(s["train"], dtype=np.int64),
            np.asarray(s["val"], dtype=np.int64),
            np.asarray(s["test"], dtype=np.int64),
        )

    def to_dict(self) -> dict:
        return {"seed": self.seed, "ratios": list(self.ratios), "splits": self.splits}

    @classmethod
    def from_dict(cls, obj: dict) -> "SplitSet":
        return cls(seed=int(obj["seed"]), ratios=tuple(obj["ratios"]), splits=list(obj["splits"]))


def generate_splits(n: int, ratios=(0.6, 0.2, 0.2), k: int = 10, seed: int = 42) -> SplitSet:
    """k fresh permutations of {0..n-1}, cut floor/floor/remainder.

    Regenerating with the same (n, ratios, k, seed) yields identical splits.
    """
    if n < 3:
        raise ContractError(f"need at least 3 nodes to split, got {n}")
    if len(ratios) != 3 or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ContractError(f"ratios must sum to 1, got {ratios}")
    if k < 1:
        raise ContractError("need at least one split")
    rng = substream(seed, "splits")
    n_train = int(math.floor(ratios[0] * n))
    n_val = int(math.floor(ratios[1] * n))
    splits = []
    for _ in range(k):
        perm = rng.permutation(n)
        splits.append(
            {
                "train": perm[:n_train].tolist(),
                "val": perm[n_train : n_train + n_val].tolist(),
                "test": perm[n_train + n_val :].tolist(),
            }
        )
    return SplitSet(seed=seed, ratios=tuple(ratios), splits=splits)


def save_splits(splits: SplitSet, path) -> None:
    Path(path).write_text(json.dumps(splits.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_splits(path) -> SplitSet:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise GraphFormatError("file not found", path=path)
    except json.JSONDecodeError as err:
        raise GraphFormatError(f"invalid JSON: {err}", path=path)
    return SplitSet.from_dict(obj)
