"""Class-split management and n-way k-shot episode sampling.

Meta-training and meta-testing see disjoint class sets; an episode draws n
classes from one phase, then k support and m query nodes per class, all
without replacement. Node order inside an episode is class-major: the
support block lists class 0's k nodes, then class 1's, and so on, and query
blocks follow the same layout with m nodes each.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .graph import SparseGraph

log = logging.getLogger(__name__)


class EpisodeError(ValueError):
    """A split or episode request the data cannot satisfy."""


@dataclass(frozen=True)
class ClassSplit:
    """Disjoint class id sets for the train/val/test phases."""

    train_classes: tuple[int, ...]
    val_classes: tuple[int, ...]
    test_classes: tuple[int, ...]
    seed: int = 0

    def __post_init__(self):
        sets = [set(self.train_classes), set(self.val_classes), set(self.test_classes)]
        total = sum(len(s) for s in sets)
        if len(sets[0] | sets[1] | sets[2]) != total:
            raise EpisodeError("class split phases must be pairwise disjoint")

    def phase(self, name: str) -> tuple[int, ...]:
        return {"train": self.train_classes, "val": self.val_classes,
                "test": self.test_classes}[name]

    def to_dict(self) -> dict:
        return {
            "train": list(self.train_classes),
            "val": list(self.val_classes),
            "test": list(self.test_classes),
            "seed": self.seed,
        }

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "ClassSplit":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(
            train_classes=tuple(payload["train"]),
            val_classes=tuple(payload["val"]),
            test_classes=tuple(payload["test"]),
            seed=int(payload.get("seed", 0)),
        )


@dataclass(frozen=True)
class Episode:
    """One n-way k-shot task over concrete node ids.

    support has shape (n, k) and query (n, m); row j holds nodes of the
    episode's j-th class, which is also its local label.
    """

    n: int
    k: int
    m: int
    classes: tuple[int, ...]
    support: np.ndarray
    query: np.ndarray

    def __post_init__(self):
        if self.support.shape != (self.n, self.k):
            raise EpisodeError(f"support shape {self.support.shape} != ({self.n}, {self.k})")
        if self.query.shape != (self.n, self.m):
            raise EpisodeError(f"query shape {self.query.shape} != ({self.n}, {self.m})")
        if len(set(self.classes)) != self.n:
            raise EpisodeError("episode classes must be distinct")
        sup = set(self.support.ravel().tolist())
        qry = set(self.query.ravel().tolist())
        if sup & qry:
            raise EpisodeError(f"support and query overlap on nodes {sorted(sup & qry)[:5]}")

    @property
    def local_label(self) -> dict[int, int]:
        return {c: j for j, c in enumerate(self.classes)}

    @property
    def support_nodes(self) -> np.ndarray:
        """Flattened class-major support node ids, length n*k."""
        return self.support.ravel()

    @property
    def query_nodes(self) -> np.ndarray:
        """Flattened class-major query node ids, length n*m."""
        return self.query.ravel()

    @property
    def query_local_labels(self) -> np.ndarray:
        """Local label of each flattened query row."""
        return np.repeat(np.arange(self.n), self.m)


def eligible_classes(graph: SparseGraph, classes, min_nodes: int) -> list[int]:
    """Classes from the given set with at least min_nodes labeled nodes."""
    sizes = np.bincount(graph.labels, minlength=graph.num_classes)
    return [c for c in classes if sizes[c] >= min_nodes]


def split_classes(
    graph: SparseGraph,
    counts: tuple[int, int, int],
    seed: int,
    min_nodes_per_class: int = 0,
) -> ClassSplit:
    """Shuffle class ids and partition them into train/val/test sets.

    Classes with fewer than min_nodes_per_class labeled nodes are excluded
    with a warning before the shuffle (long-tailed real data has such
    classes; aborting on them would be worse).
    """
    train_count, val_count, test_count = counts
    if min(counts) < 0:
        raise EpisodeError(f"split counts must be nonnegative, got {counts}")

    pool = list(range(graph.num_classes))
    if min_nodes_per_class > 0:
        kept = eligible_classes(graph, pool, min_nodes_per_class)
        dropped = sorted(set(pool) - set(kept))
        if dropped:
            log.warning(
                "excluding %d classes with < %d nodes from the split: %s",
                len(dropped), min_nodes_per_class, dropped,
            )
        pool = kept

    total = train_count + val_count + test_count
    if total > len(pool):
        raise EpisodeError(
            f"split counts {counts} need {total} classes but only {len(pool)} are available"
        )

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(pool))
    shuffled = [pool[i] for i in order]
    return ClassSplit(
        train_classes=tuple(sorted(shuffled[:train_count])),
        val_classes=tuple(sorted(shuffled[train_count:train_count + val_count])),
        test_classes=tuple(sorted(shuffled[train_count + val_count:total])),
        seed=seed,
    )


def sample_episode(
    graph: SparseGraph,
    phase_classes,
    n: int,
    k: int,
    m: int,
    rng: np.random.Generator,
    phase: str = "train",
) -> Episode:
    """Draw one episode: n classes, then k+m distinct nodes per class."""
    pool = sorted(eligible_classes(graph, phase_classes, k + m))
    if len(pool) < n:
        raise EpisodeError(
            f"{phase} phase has {len(pool)} classes with >= {k + m} nodes, "
            f"but the episode needs n={n}"
        )
    chosen = rng.choice(np.asarray(pool), size=n, replace=False)

    support = np.empty((n, k), dtype=np.int64)
    query = np.empty((n, m), dtype=np.int64)
    for j, c in enumerate(chosen):
        nodes = np.nonzero(graph.labels == c)[0]
        picked = rng.choice(nodes, size=k + m, replace=False)
        support[j] = picked[:k]
        query[j] = picked[k:]

    return Episode(n=n, k=k, m=m, classes=tuple(int(c) for c in chosen),
                   support=support, query=query)
