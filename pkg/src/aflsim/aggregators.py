"""Server aggregation strategies behind one delivery interface.

Every strategy receives client payloads one at a time through
:meth:`Aggregator.deliver` and answers with an :class:`UpdateDecision` when a
server iteration should happen, or ``None`` while it keeps buffering.

Sign convention: the engine always applies ``w <- w - eta_t * u``. Payloads
are descent displacements (``w_start - w_end`` of local training), so for a
single local step with ``eta_l = 1`` a payload is just the stochastic
gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from aflsim.core import ConfigError
from aflsim.kernels import masked_mean
from aflsim.quant import quantize8

KINDS = (
    "ace_direct",
    "ace_incremental",
    "aced",
    "fedbuff",
    "ca2fl",
    "vanilla_asgd",
    "delay_adaptive_asgd",
)
ALL_CLIENT_KINDS = ("ace_direct", "ace_incremental", "aced")
SINGLE_STEP_KINDS = ALL_CLIENT_KINDS + ("vanilla_asgd", "delay_adaptive_asgd")
BUFFERED_KINDS = ("fedbuff", "ca2fl")

# (client, basis iteration, coefficient) - the update is sum(coef * payload)
Contribution = Tuple[int, int, float]


@dataclass(frozen=True)
class LocalTrainSpec:
    K: int = 1
    eta_l: float = 1.0


@dataclass(frozen=True)
class AggregatorSpec:
    kind: str = "ace_direct"
    local: LocalTrainSpec = field(default_factory=LocalTrainSpec)
    tau_algo: Optional[int] = None
    M: Optional[int] = None
    concurrency: Optional[int] = None
    tau_C: Optional[int] = None
    L_est: Optional[float] = None
    quantize8: bool = False
    blocking: bool = False
    adaptive_drop: bool = False


@dataclass
class UpdateDecision:
    update: Optional[np.ndarray]  # None means "iteration happens, model unchanged"
    eta: float
    n_t: int
    max_staleness: int
    contributions: List[Contribution] = field(default_factory=list)


def validate_spec(spec: AggregatorSpec, n: int) -> List[str]:
    out = []
    if spec.kind not in KINDS:
        return [f"aggregator.kind must be one of {', '.join(KINDS)}; got {spec.kind!r}"]
    if spec.local.K < 1:
        out.append("aggregator.K must be ≥ 1")
    if not spec.local.eta_l > 0:
        out.append("aggregator.eta_l must be > 0")
    if spec.kind in SINGLE_STEP_KINDS and spec.local.K != 1:
        out.append(f"aggregator.K must be 1 for {spec.kind}")
    if spec.kind == "aced":
        if spec.tau_algo is None:
            out.append("aggregator.tau_algo is required for aced")
        elif spec.tau_algo < 1:
            out.append("aggregator.tau_algo must be ≥ 1")
    elif spec.tau_algo is not None:
        out.append(f"aggregator.tau_algo is only valid for aced, not {spec.kind}")
    if spec.kind in BUFFERED_KINDS:
        if spec.M is None:
            out.append(f"aggregator.M is required for {spec.kind}")
        elif not 1 <= spec.M <= n:
            out.append("aggregator.M must satisfy 1 ≤ M ≤ n")
    elif spec.M is not None:
        out.append(f"aggregator.M is only valid for fedbuff/ca2fl, not {spec.kind}")
    if spec.concurrency is not None:
        if spec.kind in ALL_CLIENT_KINDS and spec.concurrency != n:
            out.append(f"{spec.kind} keeps all n clients busy; aggregator.concurrency must be n")
        elif not 1 <= spec.concurrency <= n:
            out.append("aggregator.concurrency must satisfy 1 ≤ M_c ≤ n")
    if spec.kind == "delay_adaptive_asgd":
        if spec.tau_C is not None and spec.tau_C < 1:
            out.append("aggregator.tau_C must be ≥ 1")
        if spec.L_est is not None and not spec.L_est > 0:
            out.append("aggregator.L_est must be > 0")
    elif spec.tau_C is not None:
        out.append(f"aggregator.tau_C is only valid for delay_adaptive_asgd, not {spec.kind}")
    if spec.quantize8 and spec.kind not in ("ace_direct", "aced"):
        out.append("aggregator.quantize8 is only valid for ace_direct and aced")
    return out


def local_train(obj, i: int, w: np.ndarray, spec: LocalTrainSpec, rng: np.random.Generator) -> np.ndarray:
    """Displacement ``eta_l * sum_k g_k`` produced by ``K`` local SGD steps from ``w``."""
    if spec.K == 1:
        return spec.eta_l * obj.stochastic_gradient(i, w, rng)
    total = np.zeros_like(w)
    local = w.copy()
    for _ in range(spec.K):
        g = obj.stochastic_gradient(i, local, rng)
        total += g
        local = local - spec.eta_l * g
    return spec.eta_l * total


def delay_adaptive_step_size(tau_t: int, tau_C: int, L_est: float, eta: float, drop: bool = False) -> float:
    """``eta`` for delays up to ``tau_C``, else ``min(eta, 1 / (4 L tau_t))`` (or 0 when dropping)."""
    if tau_t <= tau_C:
        return eta
    if drop:
        return 0.0
    return min(eta, 1.0 / (4.0 * L_est * tau_t))


class Aggregator:
    kind = "base"
    init_wave = False

    def __init__(self, n: int, d: int, eta: float, spec: AggregatorSpec):
        self.n = n
        self.d = d
        self.eta = eta
        self.spec = spec
        self.concurrency = spec.concurrency or n
        self.blocking = spec.blocking
        # contributions are only needed by the probe
        self.track = False

    def initialize(self, payloads: np.ndarray) -> UpdateDecision:
        raise NotImplementedError

    def deliver(self, client: int, payload: np.ndarray, basis: int, t: int) -> Optional[UpdateDecision]:
        raise NotImplementedError

    def cache_nbytes(self) -> int:
        return 0

    def _check_client(self, client: int) -> None:
        if not 0 <= client < self.n:
            raise ConfigError(f"arrival from unknown client {client} (n={self.n})")


class _CacheStore:
    """Per-client gradient cache, optionally held as 8-bit codes."""

    def __init__(self, n: int, d: int, quantized: bool, rng: Optional[np.random.Generator]):
        self.quantized = quantized
        self.rng = rng
        if quantized:
            self.codes = np.zeros((n, d), dtype=np.uint8)
            self.scale = np.zeros(n)
            self.zero = np.zeros(n)
        else:
            self.rows = np.zeros((n, d))

    def write(self, i: int, v: np.ndarray) -> None:
        if self.quantized:
            q = quantize8(v, self.rng)
            self.codes[i] = q.codes
            self.scale[i] = q.scale
            self.zero[i] = q.zero_point
        else:
            self.rows[i] = v

    def read(self) -> np.ndarray:
        if self.quantized:
            return self.zero[:, None] + self.scale[:, None] * self.codes
        return self.rows

    def nbytes(self) -> int:
        if self.quantized:
            return int(self.codes.nbytes + self.scale.nbytes + self.zero.nbytes)
        return int(self.rows.nbytes)


class AceDirect(Aggregator):
    """Average of the latest cached gradient from every client, on every arrival."""

    kind = "ace_direct"
    init_wave = True

    def __init__(self, n, d, eta, spec, rng=None):
        super().__init__(n, d, eta, spec)
        self.concurrency = n
        self.cache = _CacheStore(n, d, spec.quantize8, rng)
        self.basis = np.zeros(n, dtype=np.int64)
        self._all = np.ones(n, dtype=np.bool_)

    def initialize(self, payloads):
        for i in range(self.n):
            self.cache.write(i, payloads[i])
        return self._emit(0, self._all)

    def _emit(self, t, mask):
        n_t = int(mask.sum())
        if n_t == 0:
            return UpdateDecision(None, self.eta, 0, 0, [])
        u = masked_mean(self.cache.read(), mask)
        active = np.flatnonzero(mask)
        contrib = [(int(i), int(self.basis[i]), 1.0 / n_t) for i in active] if self.track else []
        return UpdateDecision(u, self.eta, n_t, int(t - self.basis[active].min()), contrib)

    def deliver(self, client, payload, basis, t):
        self._check_client(client)
        self.cache.write(client, payload)
        self.basis[client] = basis
        return self._emit(t, self._all)

    def cache_nbytes(self):
        return self.cache.nbytes()


class AceIncremental(Aggregator):
    """Running aggregate ``u <- u + (g_new - g_prev) / n``.

    ``prev`` stands in for the copy of its last gradient that each client
    keeps locally; the server-side state is only ``u``.
    """

    kind = "ace_incremental"
    init_wave = True

    def __init__(self, n, d, eta, spec, rng=None):
        super().__init__(n, d, eta, spec)
        self.concurrency = n
        self.u = np.zeros(d)
        self.prev = np.zeros((n, d))
        self.basis = np.zeros(n, dtype=np.int64)

    def initialize(self, payloads):
        self.prev[:] = payloads
        self.u = masked_mean(self.prev, np.ones(self.n, dtype=np.bool_))
        return self._decision(0)

    def deliver_diff(self, diff: np.ndarray) -> np.ndarray:
        if diff.shape != self.u.shape:
            raise ValueError(f"difference has shape {diff.shape}, aggregate has {self.u.shape}")
        self.u = self.u + diff / self.n
        return self.u

    def deliver(self, client, payload, basis, t):
        self._check_client(client)
        diff = payload - self.prev[client]
        self.prev[client] = payload
        self.basis[client] = basis
        self.deliver_diff(diff)
        return self._decision(t)

    def _decision(self, t):
        contrib = [(i, int(self.basis[i]), 1.0 / self.n) for i in range(self.n)] if self.track else []
        return UpdateDecision(self.u.copy(), self.eta, self.n, int(t - self.basis.min()), contrib)

    def cache_nbytes(self):
        return int(self.u.nbytes)


class Aced(AceDirect):
    """All-client averaging restricted to clients dispatched within ``tau_algo`` iterations."""

    kind = "aced"

    def __init__(self, n, d, eta, spec, rng=None):
        super().__init__(n, d, eta, spec, rng)
        self.tau_algo = int(spec.tau_algo)
        self.t_start = np.ones(n, dtype=np.int64)

    def active_mask(self, t):
        return (t - self.t_start) <= self.tau_algo

    def deliver(self, client, payload, basis, t):
        self._check_client(client)
        self.cache.write(client, payload)
        self.basis[client] = basis
        decision = self._emit(t, self.active_mask(t))
        self.t_start[client] = t + 1
        return decision


class VanillaAsgd(Aggregator):
    kind = "vanilla_asgd"

    def deliver(self, client, payload, basis, t):
        return UpdateDecision(payload, self.eta, 1, t - basis, [(client, basis, 1.0)])


class DelayAdaptiveAsgd(Aggregator):
    kind = "delay_adaptive_asgd"

    def __init__(self, n, d, eta, spec, L_est):
        super().__init__(n, d, eta, spec)
        self.tau_C = spec.tau_C if spec.tau_C is not None else self.concurrency
        self.L_est = spec.L_est if spec.L_est is not None else L_est

    def deliver(self, client, payload, basis, t):
        tau = t - basis
        eta_t = delay_adaptive_step_size(tau, self.tau_C, self.L_est, self.eta, self.spec.adaptive_drop)
        return UpdateDecision(payload, eta_t, 1, tau, [(client, basis, 1.0)])


class FedBuff(Aggregator):
    kind = "fedbuff"

    def __init__(self, n, d, eta, spec):
        super().__init__(n, d, eta, spec)
        self.M = int(spec.M)
        self.acc = np.zeros(d)
        self.m = 0
        self.pending: List[Contribution] = []

    def deliver(self, client, payload, basis, t):
        self.acc = self.acc + payload
        self.m += 1
        self.pending.append((client, basis, 1.0 / self.M))
        if self.m < self.M:
            return None
        u = self.acc / self.M
        stale = max(t - b for _, b, _ in self.pending)
        decision = UpdateDecision(u, self.eta, self.M, stale, self.pending)
        self.acc = np.zeros(self.d)
        self.m = 0
        self.pending = []
        return decision

    def cache_nbytes(self):
        return int(self.acc.nbytes)


class Ca2fl(Aggregator):
    """Cache-calibrated buffered aggregation.

    ``v = h + (1/|S|) * sum_arrivals (payload - h_i)``, after which the
    global cache ``h`` is recomputed as the mean of the client caches.
    """

    kind = "ca2fl"

    def __init__(self, n, d, eta, spec):
        super().__init__(n, d, eta, spec)
        self.M = int(spec.M)
        self.h_i = np.zeros((n, d))
        self.h_basis = np.full(n, -1, dtype=np.int64)  # -1: cache still holds the zero init
        self.h = self.h_i.mean(axis=0)
        self.acc = np.zeros(d)
        self.m = 0
        self.S = set()
        self.pending: List[Contribution] = []
        self._window_basis = self.h_basis.copy()

    def deliver(self, client, payload, basis, t):
        self.acc = self.acc + (payload - self.h_i[client])
        self.pending.append((client, basis, 1.0))
        if self.h_basis[client] >= 0:
            self.pending.append((client, int(self.h_basis[client]), -1.0))
        self.h_i[client] = payload
        self.h_basis[client] = basis
        self.m += 1
        self.S.add(client)
        if self.m < self.M:
            return None
        k = len(self.S)
        v = self.h + self.acc / k
        contrib = [(c, b, w / k) for c, b, w in self.pending]
        contrib += [(i, int(self._window_basis[i]), 1.0 / self.n) for i in range(self.n) if self._window_basis[i] >= 0]
        stale = max(t - b for c, b, w in self.pending if w > 0)
        decision = UpdateDecision(v, self.eta, k, stale, contrib)
        self.h = self.h_i.mean(axis=0)
        self.acc = np.zeros(self.d)
        self.m = 0
        self.S = set()
        self.pending = []
        self._window_basis = self.h_basis.copy()
        return decision

    def cache_nbytes(self):
        return int(self.h_i.nbytes + self.h.nbytes + self.acc.nbytes)


def make_aggregator(spec: AggregatorSpec, n: int, d: int, eta: float, L_est: float = 1.0, rng=None) -> Aggregator:
    problems = validate_spec(spec, n)
    if problems:
        raise ConfigError("; ".join(problems))
    if spec.kind == "ace_direct":
        return AceDirect(n, d, eta, spec, rng)
    if spec.kind == "ace_incremental":
        return AceIncremental(n, d, eta, spec, rng)
    if spec.kind == "aced":
        return Aced(n, d, eta, spec, rng)
    if spec.kind == "vanilla_asgd":
        return VanillaAsgd(n, d, eta, spec)
    if spec.kind == "delay_adaptive_asgd":
        return DelayAdaptiveAsgd(n, d, eta, spec, L_est)
    if spec.kind == "fedbuff":
        return FedBuff(n, d, eta, spec)
    return Ca2fl(n, d, eta, spec)
