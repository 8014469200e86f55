"""Discrete-event engine for asynchronous federated training.

Wall-clock time exists only to order client completions. Staleness is
counted in server iterations: a gradient computed on the model broadcast at
iteration ``b`` and consumed at iteration ``t`` has staleness ``t - b``.

Each completion is delivered to the aggregator, which decides whether a
server iteration happens (buffered strategies accumulate ``M`` deliveries
first). After every delivery idle clients are handed the current model until
``concurrency`` clients are busy. All-client strategies run an
initialisation wave at time zero: every client's gradient at ``w^0`` is
collected, the first update forms ``w^1``, and everyone starts on ``w^1``.
"""

from __future__ import annotations

import csv
import heapq
import io
import json
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from aflsim.aggregators import AggregatorSpec, UpdateDecision, local_train, make_aggregator
from aflsim.core import ConfigError, ModelState, RngStreams, RunConfig, check_finite, content_hash, validate_config
from aflsim.probe import ErrorDecomposition, ModelHistory, ProbeSpec, check_mse_chain, decompose_error

TRACE_COLUMNS = ("t", "grad_norm_sq", "objective", "eta_t", "n_t", "max_staleness", "comms_total")


@dataclass(frozen=True)
class DelayModel:
    kind: str = "exponential"  # constant | per_client_constant
    beta: float = 5.0
    per_client: Optional[Tuple[float, ...]] = None

    def validate(self, n: int) -> List[str]:
        out = []
        if self.kind not in ("exponential", "constant", "per_client_constant"):
            out.append(f"delay.kind must be exponential, constant or per_client_constant; got {self.kind!r}")
        elif self.kind == "per_client_constant":
            if self.per_client is None or len(self.per_client) != n:
                out.append("per_client_constant delays need one duration per client")
            elif min(self.per_client) <= 0:
                out.append("per-client durations must be > 0")
        elif not self.beta > 0:
            out.append("delay.beta must be > 0")
        return out


def sample_delay(model: DelayModel, client: int, rng: np.random.Generator) -> float:
    """One compute duration for ``client``; ``rng`` should be that client's delay stream."""
    if model.kind == "exponential":
        return float(rng.exponential(model.beta))
    if model.kind == "constant":
        return float(model.beta)
    return float(model.per_client[client])


class EventQueue:
    """Completion events popped in ``(time, client, seq)`` order."""

    def __init__(self):
        self._heap: List[Tuple[float, int, int]] = []

    def push(self, time: float, client: int, seq: int) -> None:
        heapq.heappush(self._heap, (time, client, seq))

    def pop(self) -> Tuple[float, int, int]:
        return heapq.heappop(self._heap)

    def peek_time(self) -> float:
        return self._heap[0][0]

    def remove_client(self, client: int) -> Optional[Tuple[float, int, int]]:
        """Drop the pending event of ``client``, returning it if there was one."""
        found = None
        kept = []
        for ev in self._heap:
            if ev[1] == client:
                found = ev
            else:
                kept.append(ev)
        if found is not None:
            heapq.heapify(kept)
            self._heap = kept
        return found

    def clients(self) -> List[int]:
        return sorted(ev[1] for ev in self._heap)

    def __len__(self):
        return len(self._heap)


def apply_dropout(schedule: Sequence[Tuple[int, float]], queue: EventQueue, t_now: float, n: int, dropped: set) -> List[int]:
    """Permanently drop every scheduled client whose time is ``<= t_now``.

    Their pending completions are removed from ``queue`` and they are added
    to ``dropped``; returns the newly dropped ids.
    """
    newly = []
    for client, when in schedule:
        if when > t_now:
            break
        if not 0 <= client < n:
            raise ConfigError(f"dropout names unknown client {client}")
        if client in dropped:
            continue
        queue.remove_client(client)
        dropped.add(client)
        newly.append(client)
    return newly


@dataclass
class RunTrace:
    t: np.ndarray
    grad_norm_sq: np.ndarray
    objective: np.ndarray
    eta_t: np.ndarray
    n_t: np.ndarray
    max_staleness: np.ndarray
    comms_total: np.ndarray
    final: ModelState
    starved: bool = False
    # one row per consumed arrival: (iteration, client, staleness)
    consumed: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    updates: Optional[np.ndarray] = None
    decompositions: Optional[List[ErrorDecomposition]] = None
    cache_nbytes: int = 0
    extra: dict = field(default_factory=dict)

    def __len__(self):
        return int(self.t.shape[0])

    @property
    def comms(self) -> int:
        return int(self.comms_total[-1]) if len(self) else int(self.extra.get("init_comms", 0))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for k in range(len(self)):
            w.writerow(
                [
                    int(self.t[k]),
                    repr(float(self.grad_norm_sq[k])),
                    repr(float(self.objective[k])),
                    repr(float(self.eta_t[k])),
                    int(self.n_t[k]),
                    int(self.max_staleness[k]),
                    int(self.comms_total[k]),
                ]
            )
        return buf.getvalue()

    def content_hash(self) -> str:
        return content_hash(self.to_csv())

    @classmethod
    def from_csv(cls, text: str, starved: bool = False, final_weights=None) -> "RunTrace":
        """Rebuild a trace from :meth:`to_csv` output.

        The CSV holds per-iteration records only; pass the manifest's
        ``final_weights`` to recover the returned model as well.
        """
        rows = list(csv.DictReader(io.StringIO(text)))
        w_final = np.zeros(0) if final_weights is None else np.array(final_weights, dtype=np.float64)

        def col(name, typ):
            return np.array([typ(r[name]) for r in rows], dtype=typ)

        return cls(
            t=col("t", int),
            grad_norm_sq=col("grad_norm_sq", float),
            objective=col("objective", float),
            eta_t=col("eta_t", float),
            n_t=col("n_t", int),
            max_staleness=col("max_staleness", int),
            comms_total=col("comms_total", int),
            final=ModelState(w_final, len(rows)),
            starved=starved,
        )


def run_manifest(cfg: RunConfig, agg: AggregatorSpec, delays: DelayModel, obj, trace: RunTrace, extra: Optional[dict] = None) -> str:
    from dataclasses import asdict

    doc = {
        "config": asdict(cfg),
        "aggregator": asdict(agg),
        "delays": asdict(delays),
        "suite": obj.manifest(),
        "starved": trace.starved,
        "iterations": len(trace),
        "trace_hash": trace.content_hash(),
        # json floats round-trip float64 exactly
        "final_weights": [float(x) for x in trace.final.weights],
    }
    if extra:
        doc.update(extra)
    return json.dumps(doc, sort_keys=True, indent=2, default=float)


def _cap_victim(in_flight, ref, t, cap, per_iter, nxt=None):
    """Client to force back now so no in-use entry outlives ``cap``, or ``None``.

    Deadlines are ``ref + cap``; at most ``per_iter`` arrivals are consumed
    per server iteration. Earliest-deadline-first: force as soon as some
    prefix of the sorted deadlines has no slack left.

    All-client kinds pass the cached entries' basis as ``ref`` and the
    in-flight dispatch as ``nxt``: a returned result becomes the cached entry
    and needs its own replacement before ``nxt + cap``, so both deadlines
    compete for the same arrival slots.
    """
    live = np.flatnonzero(in_flight)
    if not live.size:
        return None
    first = ref[live] + cap
    deadlines = first if nxt is None else np.concatenate([first, nxt[live] + cap])
    need = t + np.arange(deadlines.size) // per_iter
    if np.any(np.sort(deadlines, kind="stable") <= need):
        return int(live[np.argmin(first)])
    return None


def run_simulation(
    cfg: RunConfig,
    obj,
    agg_spec: AggregatorSpec,
    delays: DelayModel,
    probe: Optional[ProbeSpec] = None,
    record_updates: bool = False,
    w0: Optional[np.ndarray] = None,
) -> RunTrace:
    problems = validate_config(cfg) + delays.validate(cfg.n_clients)
    if obj.n != cfg.n_clients or obj.d != cfg.dim:
        problems.append(f"objective has n={obj.n}, d={obj.d} but config says n={cfg.n_clients}, d={cfg.dim}")
    if probe is not None and agg_spec.local.K != 1:
        problems.append("the error probe supports K = 1 only")
    if problems:
        raise ConfigError("; ".join(problems))

    n, d, T = cfg.n_clients, cfg.dim, cfg.total_iters
    rng = RngStreams(cfg.seed)
    eta = cfg.eta
    agg = make_aggregator(agg_spec, n, d, eta, L_est=obj.L, rng=rng("quant"))
    agg.track = probe is not None
    per_iter = int(getattr(agg, "M", 1))
    local = agg_spec.local

    w = np.zeros(d) if w0 is None else np.array(w0, dtype=np.float64)
    t = 0
    now = 0.0

    history = None
    if probe is not None:
        cap = probe.capacity or min(2 * cfg.tau_max_admin + 1, T + 1)
        history = ModelHistory(cap, d)
        history.push(w, 0)
    decomps: List[ErrorDecomposition] = []

    queue = EventQueue()
    dropped: set = set()
    in_flight = np.zeros(n, dtype=bool)
    blocked = np.zeros(n, dtype=bool)
    gone = np.zeros(n, dtype=bool)
    dispatched = np.zeros((n, d))
    dispatch_iter = np.zeros(n, dtype=np.int64)
    latest_basis = np.zeros(n, dtype=np.int64)
    seq = np.zeros(n, dtype=np.int64)
    schedule = sorted(cfg.dropout_schedule, key=lambda p: p[1])
    time_drops = schedule if cfg.dropout_unit == "time" else []
    iter_drops = schedule if cfg.dropout_unit == "iter" else []

    rec_t, rec_g, rec_f, rec_eta, rec_n, rec_s, rec_c = [], [], [], [], [], [], []
    consumed: List[Tuple[int, int, int]] = []
    updates: List[np.ndarray] = []
    comms = 0

    def noise(i):
        return rng(f"noise:{i}")

    def dispatch(j):
        dispatched[j] = w
        dispatch_iter[j] = t
        in_flight[j] = True
        seq[j] += 1
        queue.push(now + sample_delay(delays, j, rng(f"delay:{j}")), j, int(seq[j]))

    def refill():
        busy = int(in_flight.sum())
        while busy < agg.concurrency:
            gone[list(dropped)] = True
            avail = np.flatnonzero(~in_flight & ~blocked & ~gone)
            if not avail.size:
                return
            j = int(avail[0]) if avail.size == 1 else int(avail[rng("schedule").integers(avail.size)])
            dispatch(j)
            busy += 1

    def server_step(dec: UpdateDecision):
        nonlocal w, t
        f_t, g_t = obj.global_objective_and_gradient(w)
        if history is not None:
            decomps.append(decompose_error(dec.update, dec.contributions, obj, history, latest_basis, t, local.eta_l))
        rec_t.append(t)
        rec_g.append(float(g_t @ g_t))
        rec_f.append(f_t)
        rec_eta.append(dec.eta)
        rec_n.append(dec.n_t)
        rec_s.append(dec.max_staleness)
        rec_c.append(comms)
        if record_updates:
            updates.append(np.zeros(d) if dec.update is None else np.array(dec.update))
        if dec.update is not None:
            w = w - dec.eta * dec.update
            check_finite(w, f"model at iteration {t + 1}")
        t += 1
        if history is not None:
            history.push(w, t)

    apply_dropout(time_drops, queue, now, n, dropped)
    starved = False
    if agg.init_wave:
        live = [i for i in range(n) if i not in dropped]
        if not live:
            starved = True
        else:
            payloads = np.zeros((n, d))
            for i in live:
                payloads[i] = local_train(obj, i, w, local, noise(i))
                consumed.append((0, i, 0))
            comms += len(live)
            server_step(agg.initialize(payloads))
            for i in live:
                dispatch(i)
    else:
        k = min(agg.concurrency, n - len(dropped))
        pool = [i for i in range(n) if i not in dropped]
        if k and k < len(pool):
            pool = sorted(int(x) for x in rng("schedule").choice(pool, k, replace=False))
        for i in pool[:k]:
            dispatch(i)

    while not starved and t < T:
        if iter_drops:
            for c in apply_dropout(iter_drops, queue, t, n, dropped):
                in_flight[c] = False
        forced = None
        if cfg.enforce_tau_cap:
            if agg.init_wave:
                c = _cap_victim(in_flight, latest_basis, t, cfg.tau_max_admin, per_iter, dispatch_iter)
            else:
                c = _cap_victim(in_flight, dispatch_iter, t, cfg.tau_max_admin, per_iter)
            if c is not None:
                ev = queue.remove_client(c)
                forced = (now, ev[1], ev[2])
        if forced is None:
            if time_drops and len(queue):
                for c in apply_dropout(time_drops, queue, queue.peek_time(), n, dropped):
                    in_flight[c] = False
            if not len(queue):
                starved = True
                break
            ev_time, i, _ = queue.pop()
        else:
            ev_time, i, _ = forced
        now = max(now, ev_time)
        in_flight[i] = False
        payload = local_train(obj, i, dispatched[i], local, noise(i))
        comms += 1
        basis = int(dispatch_iter[i])
        consumed.append((t, i, t - basis))
        decision = agg.deliver(i, payload, basis, t)
        latest_basis[i] = basis
        if agg.blocking:
            blocked[i] = True
        if decision is not None:
            server_step(decision)
            blocked[:] = False
        refill()

    return RunTrace(
        t=np.array(rec_t, dtype=np.int64),
        grad_norm_sq=np.array(rec_g),
        objective=np.array(rec_f),
        eta_t=np.array(rec_eta),
        n_t=np.array(rec_n, dtype=np.int64),
        max_staleness=np.array(rec_s, dtype=np.int64),
        comms_total=np.array(rec_c, dtype=np.int64),
        final=ModelState(w.copy(), t),
        starved=starved,
        consumed=np.array(consumed, dtype=np.int64).reshape(-1, 3),
        updates=np.array(updates) if record_updates else None,
        decompositions=decomps if probe is not None else None,
        cache_nbytes=agg.cache_nbytes(),
        extra={"dropped": sorted(dropped), "init_comms": n if agg.init_wave else 0},
    )


def probe_report(trace: RunTrace, strict: bool = True):
    if trace.decompositions is None:
        raise ValueError("trace was produced without a probe")
    return check_mse_chain(trace.decompositions, strict=strict)
