"""Graph loading, validation, normalization, and synthesis.

The one dataset object is SparseGraph: an undirected CSR adjacency, a dense
float64 feature matrix, and integer labels. Raw graphs never store
self-loops; normalization is the only place they appear. All arrays are
frozen after construction so graphs can be shared freely across workers.

Dataset directory format (UTF-8, tab-separated):
    edges.tsv      one "u<TAB>v" pair per line, 0-based node ids
    features.tsv   line i holds the feature row of node i
    labels.tsv     line i holds the integer class of node i
    meta.json      {"num_nodes": N, "num_classes": K, "feature_dim": d}

save_dataset writes edges once per undirected pair (u < v, sorted) and
renders floats with %.17g, so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp


class DatasetError(ValueError):
    """Malformed dataset input; the message carries file and line context."""


NORMALIZATION_KINDS = ("symmetric", "row_mean", "sum")


@dataclass(frozen=True)
class SparseGraph:
    """Undirected graph with node features and labels, stored as CSR.

    row_offsets/col_indices hold every directed arc of the symmetrized edge
    set; arc (u, v) is stored iff (v, u) is.
    """

    num_nodes: int
    num_classes: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    features: np.ndarray
    labels: np.ndarray

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def num_arcs(self) -> int:
        return int(self.col_indices.size)

    @property
    def num_edges(self) -> int:
        return self.num_arcs // 2

    def degrees(self) -> np.ndarray:
        return np.diff(self.row_offsets)

    def neighbors(self, node: int) -> np.ndarray:
        return self.col_indices[self.row_offsets[node]:self.row_offsets[node + 1]]

    def edge_list(self) -> np.ndarray:
        """Undirected edges as a (num_edges, 2) array with u < v, sorted."""
        rows = np.repeat(np.arange(self.num_nodes), self.degrees())
        mask = rows < self.col_indices
        return np.column_stack([rows[mask], self.col_indices[mask]])


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


def build_graph(num_nodes: int, edges, features, labels, num_classes: int) -> SparseGraph:
    """Assemble a validated SparseGraph from an arbitrary edge list.

    Edges are symmetrized and deduplicated; self-loops in the input are
    dropped (normalization adds its own where needed).
    """
    features = np.ascontiguousarray(features, dtype=np.float64)
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    if features.ndim != 2 or features.shape[0] != num_nodes:
        raise DatasetError(
            f"feature matrix shape {features.shape} does not match num_nodes={num_nodes}"
        )
    if not np.isfinite(features).all():
        raise DatasetError("feature matrix contains non-finite values")
    if labels.shape != (num_nodes,):
        raise DatasetError(f"label vector shape {labels.shape} does not match num_nodes={num_nodes}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise DatasetError(f"label {int(labels.max())} out of range (num_classes={num_classes})")

    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if edges.size and (edges.min() < 0 or edges.max() >= num_nodes):
        bad = int(edges.max()) if edges.max() >= num_nodes else int(edges.min())
        raise DatasetError(f"node index {bad} out of range (num_nodes={num_nodes})")
    edges = edges[edges[:, 0] != edges[:, 1]]

    both = np.vstack([edges, edges[:, ::-1]])
    arcs = np.unique(both, axis=0) if both.size else both.reshape(0, 2)
    row_offsets = np.zeros(num_nodes + 1, dtype=np.int64)
    np.add.at(row_offsets, arcs[:, 0] + 1, 1)
    row_offsets = np.cumsum(row_offsets)
    col_indices = np.ascontiguousarray(arcs[:, 1])

    return SparseGraph(
        num_nodes=num_nodes,
        num_classes=num_classes,
        row_offsets=_freeze(row_offsets),
        col_indices=_freeze(col_indices),
        features=_freeze(features),
        labels=_freeze(labels),
    )


# ---------------------------------------------------------------------------
# dataset directory I/O
# ---------------------------------------------------------------------------

def _read_lines(path: Path) -> list[str]:
    if not path.is_file():
        raise DatasetError(f"{path}: missing dataset file")
    return path.read_text(encoding="utf-8").splitlines()


def load_dataset(dir_path) -> SparseGraph:
    """Load and validate a dataset directory into a SparseGraph."""
    root = Path(dir_path)
    meta_path = root / "meta.json"
    if not meta_path.is_file():
        raise DatasetError(f"{meta_path}: missing dataset file")
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        num_nodes = int(meta["num_nodes"])
        num_classes = int(meta["num_classes"])
        feature_dim = int(meta["feature_dim"])
    except (json.JSONDecodeError, KeyError, TypeError) as err:
        raise DatasetError(f"{meta_path}: invalid metadata ({err})") from err

    edges_path = root / "edges.tsv"
    edges = []
    for lineno, line in enumerate(_read_lines(edges_path), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2:
            raise DatasetError(f"{edges_path}:{lineno}: expected 'u<TAB>v', got {line!r}")
        try:
            u, v = int(parts[0]), int(parts[1])
        except ValueError as err:
            raise DatasetError(f"{edges_path}:{lineno}: non-integer node id in {line!r}") from err
        for node in (u, v):
            if node < 0 or node >= num_nodes:
                raise DatasetError(
                    f"{edges_path}:{lineno}: node index {node} out of range (num_nodes={num_nodes})"
                )
        edges.append((u, v))

    feats_path = root / "features.tsv"
    lines = _read_lines(feats_path)
    if len(lines) != num_nodes:
        raise DatasetError(f"{feats_path}: expected {num_nodes} rows, found {len(lines)}")
    features = np.empty((num_nodes, feature_dim))
    for lineno, line in enumerate(lines, start=1):
        parts = line.split("\t") if line else []
        if len(parts) != feature_dim:
            raise DatasetError(
                f"{feats_path}:{lineno}: expected {feature_dim} features, got {len(parts)}"
            )
        try:
            row = np.array([float(p) for p in parts])
        except ValueError as err:
            raise DatasetError(f"{feats_path}:{lineno}: unparseable feature value") from err
        if not np.isfinite(row).all():
            bad = parts[int(np.argwhere(~np.isfinite(row))[0][0])]
            raise DatasetError(f"{feats_path}:{lineno}: non-finite feature value {bad!r}")
        features[lineno - 1] = row

    labels_path = root / "labels.tsv"
    lines = _read_lines(labels_path)
    if len(lines) != num_nodes:
        raise DatasetError(f"{labels_path}: expected {num_nodes} rows, found {len(lines)}")
    labels = np.empty(num_nodes, dtype=np.int64)
    for lineno, line in enumerate(lines, start=1):
        try:
            label = int(line.strip())
        except ValueError as err:
            raise DatasetError(f"{labels_path}:{lineno}: non-integer label {line!r}") from err
        if label < 0 or label >= num_classes:
            raise DatasetError(
                f"{labels_path}:{lineno}: label {label} out of range (num_classes={num_classes})"
            )
        labels[lineno - 1] = label

    return build_graph(num_nodes, edges, features, labels, num_classes)


def save_dataset(graph: SparseGraph, dir_path) -> None:
    """Write the canonical on-disk form of a graph (see module docstring)."""
    root = Path(dir_path)
    root.mkdir(parents=True, exist_ok=True)

    edges = graph.edge_list()
    order = np.lexsort((edges[:, 1], edges[:, 0])) if edges.size else []
    with open(root / "edges.tsv", "w", encoding="utf-8") as fh:
        for u, v in edges[order]:
            fh.write(f"{u}\t{v}\n")

    with open(root / "features.tsv", "w", encoding="utf-8") as fh:
        for row in graph.features:
            fh.write("\t".join("%.17g" % x for x in row))
            fh.write("\n")

    with open(root / "labels.tsv", "w", encoding="utf-8") as fh:
        for label in graph.labels:
            fh.write(f"{label}\n")

    meta = {
        "num_nodes": graph.num_nodes,
        "num_classes": graph.num_classes,
        "feature_dim": graph.feature_dim,
    }
    with open(root / "meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

@dataclass
class NormalizedAdjacency:
    """CSR adjacency with per-arc weights for one normalization kind.

    kind "symmetric" is (deg+1)^{-1/2} (A+I) (deg+1)^{-1/2} and includes
    self-loops; "row_mean" is deg^{-1} A with all-zero rows for isolated
    nodes; "sum" is A with unit weights.
    """

    num_nodes: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    weights: np.ndarray
    kind: str
    _csr: sp.csr_matrix | None = field(default=None, repr=False, compare=False)
    _csr_t: sp.csr_matrix | None = field(default=None, repr=False, compare=False)

    def to_csr(self) -> sp.csr_matrix:
        if self._csr is None:
            self._csr = sp.csr_matrix(
                (self.weights, self.col_indices, self.row_offsets),
                shape=(self.num_nodes, self.num_nodes),
            )
        return self._csr

    def to_csr_transpose(self) -> sp.csr_matrix:
        if self._csr_t is None:
            self._csr_t = self.to_csr().T.tocsr()
        return self._csr_t

    def to_dense(self) -> np.ndarray:
        return self.to_csr().toarray()

    def arc_weight(self, u: int, v: int) -> float:
        lo, hi = self.row_offsets[u], self.row_offsets[u + 1]
        cols = self.col_indices[lo:hi]
        hit = np.nonzero(cols == v)[0]
        return float(self.weights[lo + hit[0]]) if hit.size else 0.0


def normalize(graph: SparseGraph, kind: str) -> NormalizedAdjacency:
    """Build the weighted adjacency a backbone propagates with."""
    if kind not in NORMALIZATION_KINDS:
        raise ValueError(f"unknown normalization kind {kind!r}; expected one of {NORMALIZATION_KINDS}")

    n = graph.num_nodes
    adj = sp.csr_matrix(
        (np.ones(graph.num_arcs), graph.col_indices, graph.row_offsets), shape=(n, n)
    )
    deg = np.asarray(graph.degrees(), dtype=np.float64)

    if kind == "symmetric":
        dinv_sqrt = 1.0 / np.sqrt(deg + 1.0)
        scaler = sp.diags(dinv_sqrt)
        mat = (scaler @ (adj + sp.identity(n, format="csr")) @ scaler).tocsr()
    elif kind == "row_mean":
        dinv = np.where(deg > 0, 1.0 / np.maximum(deg, 1.0), 0.0)
        mat = (sp.diags(dinv) @ adj).tocsr()
    else:
        mat = adj

    mat.sort_indices()
    return NormalizedAdjacency(
        num_nodes=n,
        row_offsets=mat.indptr.astype(np.int64),
        col_indices=mat.indices.astype(np.int64),
        weights=mat.data.astype(np.float64),
        kind=kind,
    )


class AdjacencyCache:
    """Lazy per-graph cache of NormalizedAdjacency objects, one per kind."""

    def __init__(self, graph: SparseGraph):
        self.graph = graph
        self._cache: dict[str, NormalizedAdjacency] = {}

    def get(self, kind: str) -> NormalizedAdjacency:
        if kind not in self._cache:
            self._cache[kind] = normalize(self.graph, kind)
        return self._cache[kind]


# ---------------------------------------------------------------------------
# synthetic graphs
# ---------------------------------------------------------------------------

def generate_synthetic(
    num_classes: int,
    nodes_per_class: int,
    feature_dim: int,
    intra_edge_prob: float,
    inter_edge_prob: float,
    signal_strength: float = 1.0,
    seed: int = 0,
) -> SparseGraph:
    """Sample a stochastic-block-model graph with class-informative features.

    Node i belongs to class i // nodes_per_class. Each class draws a mean
    feature vector of norm signal_strength; node features add unit Gaussian
    noise to their class mean. Edge probability is intra_edge_prob inside a
    class and inter_edge_prob across classes. Fully deterministic per seed.
    """
    if num_classes < 1 or nodes_per_class < 1 or feature_dim < 1:
        raise ValueError(
            f"degenerate synthetic graph request: classes={num_classes}, "
            f"per_class={nodes_per_class}, dim={feature_dim}"
        )
    if not (0.0 <= inter_edge_prob <= intra_edge_prob <= 1.0):
        raise ValueError(
            f"edge probabilities must satisfy 0 <= inter <= intra <= 1, "
            f"got intra={intra_edge_prob}, inter={inter_edge_prob}"
        )
    if signal_strength < 0.0:
        raise ValueError(f"signal_strength must be nonnegative, got {signal_strength}")

    rng = np.random.default_rng(seed)
    n = num_classes * nodes_per_class
    labels = np.repeat(np.arange(num_classes), nodes_per_class)

    directions = rng.standard_normal((num_classes, feature_dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    means = signal_strength * directions
    features = means[labels] + rng.standard_normal((n, feature_dim))

    same_class = labels[:, None] == labels[None, :]
    prob = np.where(same_class, intra_edge_prob, inter_edge_prob)
    draws = rng.random((n, n))
    hit = np.triu(draws < prob, k=1)
    edges = np.argwhere(hit)

    return build_graph(n, edges, features, labels, num_classes)
