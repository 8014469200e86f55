"""Synthetic classification data and Dirichlet label-skew partitioning."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import List

import numpy as np

from aflsim.core import rng_stream


class DegeneratePartition(ValueError):
    """A client ended up with no examples."""


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray  # (size, d_feat)
    labels: np.ndarray  # (size,) ints in [0, C)
    n_classes: int

    @property
    def size(self) -> int:
        return int(self.labels.shape[0])


@dataclass(frozen=True)
class Partition:
    assignment: List[np.ndarray]
    alpha: float

    @property
    def n_clients(self) -> int:
        return len(self.assignment)

    def sizes(self) -> List[int]:
        return [int(a.size) for a in self.assignment]

    def to_json(self) -> str:
        return json.dumps(
            {"alpha": self.alpha, "clients": {str(i): a.tolist() for i, a in enumerate(self.assignment)}},
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "Partition":
        raw = json.loads(text)
        clients = raw["clients"]
        return cls([np.asarray(clients[str(i)], dtype=np.int64) for i in range(len(clients))], float(raw["alpha"]))


def synth_classification_dataset(C: int, d_feat: int, size: int, sep: float, rng: np.random.Generator) -> Dataset:
    """Unit-variance Gaussian clusters whose means are ``sep`` apart.

    With ``C <= d_feat`` the means sit on a rotated orthogonal simplex, so
    every pair of classes is exactly ``sep`` apart; otherwise means are random
    directions of norm ``sep / sqrt(2)``.
    """
    if C < 2 or size < C:
        raise ValueError(f"need C >= 2 and size >= C, got C={C}, size={size}")
    if C <= d_feat:
        Q, _ = np.linalg.qr(rng.standard_normal((d_feat, d_feat)))
        means = (sep / np.sqrt(2.0)) * Q[:, :C].T
    else:
        raw = rng.standard_normal((C, d_feat))
        means = (sep / np.sqrt(2.0)) * raw / np.linalg.norm(raw, axis=1, keepdims=True)
    labels = np.concatenate([np.arange(C), rng.integers(0, C, size - C)])
    labels = labels[rng.permutation(size)]
    features = means[labels] + rng.standard_normal((size, d_feat))
    return Dataset(features, labels.astype(np.int64), C)


def _largest_remainder(total: int, proportions: np.ndarray) -> np.ndarray:
    raw = proportions * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        # stable sort keeps ties in client order
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def dirichlet_partition(labels: np.ndarray, n: int, alpha: float, rng: np.random.Generator) -> Partition:
    """Class-conditional Dirichlet split of example indices over ``n`` clients.

    For every class a proportion vector ``p ~ Dir(alpha * 1_n)`` is drawn and
    that class's (shuffled) examples are dealt out in contiguous chunks sized
    by largest-remainder rounding of ``p``. Raises
    :class:`DegeneratePartition` if any client receives nothing.
    """
    if n < 1 or not alpha > 0:
        raise ValueError(f"need n >= 1 and alpha > 0, got n={n}, alpha={alpha}")
    labels = np.asarray(labels)
    buckets: List[List[np.ndarray]] = [[] for _ in range(n)]
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(idx.size)]
        p = rng.dirichlet(np.full(n, float(alpha))) if n > 1 else np.ones(1)
        counts = _largest_remainder(idx.size, p)
        bounds = np.concatenate([[0], np.cumsum(counts)])
        for i in range(n):
            if counts[i]:
                buckets[i].append(idx[bounds[i] : bounds[i + 1]])
    assignment = [np.sort(np.concatenate(b)) if b else np.zeros(0, dtype=np.int64) for b in buckets]
    empty = [i for i, a in enumerate(assignment) if a.size == 0]
    if empty:
        raise DegeneratePartition(f"clients {empty[:5]}{'...' if len(empty) > 5 else ''} received no examples")
    return Partition(assignment, float(alpha))


def sample_partition(labels: np.ndarray, n: int, alpha: float, seed: int, max_attempts: int = 100) -> Partition:
    """Dirichlet partition, re-drawn under fresh sub-seeds until no shard is empty."""
    for attempt in range(max_attempts):
        try:
            return dirichlet_partition(labels, n, alpha, rng_stream(seed, f"partition:{attempt}"))
        except DegeneratePartition:
            continue
    raise DegeneratePartition(f"no non-degenerate partition in {max_attempts} attempts (n={n}, alpha={alpha})")


def label_tv_distance(labels: np.ndarray, part: Partition) -> float:
    """Mean total-variation distance of client label histograms from the global one."""
    C = int(labels.max()) + 1
    glob = np.bincount(labels, minlength=C) / labels.size
    tv = [0.5 * np.abs(np.bincount(labels[a], minlength=C) / a.size - glob).sum() for a in part.assignment]
    return float(np.mean(tv))
