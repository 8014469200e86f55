"""Shared run configuration, step-size rules and deterministic RNG streams."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np


class ConfigError(ValueError):
    """Raised for a configuration that cannot be run."""


@dataclass
class ModelState:
    weights: np.ndarray
    iter: int = 0

    def copy(self) -> "ModelState":
        return ModelState(self.weights.copy(), self.iter)


@dataclass(frozen=True)
class StepSizeRule:
    kind: str = "sqrt_n_over_T"  # or "constant"
    c: float = 0.2


def resolve_step_size(rule: StepSizeRule, n: int, T: int) -> float:
    """Global step size for a run with ``n`` clients and ``T`` server iterations."""
    if n < 1 or T < 1:
        raise ConfigError(f"need n >= 1 and T >= 1, got n={n}, T={T}")
    if rule.kind == "constant":
        eta = float(rule.c)
    elif rule.kind == "sqrt_n_over_T":
        eta = float(rule.c) * math.sqrt(n / T)
    else:
        raise ConfigError(f"unknown step size rule {rule.kind!r}")
    if not eta > 0.0 or not math.isfinite(eta):
        raise ConfigError(f"step size must be positive, got {eta}")
    return eta


@dataclass
class RunConfig:
    n_clients: int = 20
    total_iters: int = 500
    eta_rule: StepSizeRule = field(default_factory=StepSizeRule)
    seed: int = 0
    dim: int = 10
    tau_max_admin: int = 1000
    # (client id, when) pairs; ``when`` is wall-clock time or a server
    # iteration depending on ``dropout_unit``.
    dropout_schedule: List[Tuple[int, float]] = field(default_factory=list)
    dropout_unit: str = "time"
    enforce_tau_cap: bool = False

    @property
    def eta(self) -> float:
        return resolve_step_size(self.eta_rule, self.n_clients, self.total_iters)


def validate_config(cfg: RunConfig) -> List[str]:
    """Every violated invariant of ``cfg``, as messages. Empty means runnable."""
    problems = []
    if cfg.n_clients < 1:
        problems.append("n_clients must be ≥ 1")
    if cfg.total_iters < 1:
        problems.append("total_iters must be ≥ 1")
    if cfg.tau_max_admin < 1:
        problems.append("tau_max_admin must be ≥ 1")
    if cfg.dim < 1:
        problems.append("dim must be ≥ 1")
    if not 0 <= cfg.seed < 2**64:
        problems.append("seed must be a 64-bit unsigned integer")
    if cfg.eta_rule.kind not in ("constant", "sqrt_n_over_T"):
        problems.append(f"eta_rule.kind must be constant or sqrt_n_over_T, got {cfg.eta_rule.kind!r}")
    elif not cfg.eta_rule.c > 0:
        problems.append("eta_rule.c must be > 0")
    if cfg.dropout_unit not in ("time", "iter"):
        problems.append("dropout_unit must be 'time' or 'iter'")
    whens = [w for _, w in cfg.dropout_schedule]
    if any(b < a for a, b in zip(whens, whens[1:])):
        problems.append("dropout_schedule times must be non-decreasing")
    for cid, _ in cfg.dropout_schedule:
        if not 0 <= cid < max(cfg.n_clients, 0):
            problems.append(f"dropout_schedule names unknown client {cid}")
    return problems


def _label_key(label: str) -> Tuple[int, ...]:
    digest = hashlib.blake2b(label.encode("utf-8"), digest_size=16).digest()
    return tuple(int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4))


def rng_stream(seed: int, label: str) -> np.random.Generator:
    """Generator keyed by ``(seed, label)``.

    Streams are independent of one another and of the order in which they are
    created, so per-client noise does not depend on event ordering.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=_label_key(label))
    return np.random.Generator(np.random.PCG64(ss))


class RngStreams:
    """Lazily created labelled streams for one run."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams = {}

    def __call__(self, label: str) -> np.random.Generator:
        gen = self._streams.get(label)
        if gen is None:
            gen = self._streams[label] = rng_stream(self.seed, label)
        return gen


def content_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def check_finite(vec: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(vec)):
        raise FloatingPointError(f"non-finite values in {what}")


def dropout_fraction(n: int, frac: float, when: float, seed: int) -> List[Tuple[int, float]]:
    """Schedule dropping ``round(frac * n)`` clients, chosen by seed, at ``when``."""
    k = int(round(frac * n))
    chosen = sorted(rng_stream(seed, "dropout").permutation(n)[:k].tolist())
    return [(int(c), when) for c in chosen]
