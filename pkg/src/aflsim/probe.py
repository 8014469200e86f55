"""Per-iteration error decomposition of the server update.

For an update ``u`` at iteration ``t`` the deviation from the ideal gradient
splits exactly as::

    u - gradF(w_t) = (u - u_bar) + (u_bar - gradF_stale) + (gradF_stale - gradF(w_t))
                        A: noise        B: bias                C: delay

``u_bar`` is the expectation of ``u`` over fresh data samples. It is
obtained by replaying the aggregator's linear combination with exact client
gradients at the stale models in place of the cached stochastic ones. That
substitution is exact for the ``gaussian_additive`` noise model and for
``minibatch`` noise with a single local step; with ``K > 1`` local steps the
expectation has no closed form, so the probe refuses to run.

``gradF_stale`` is the plain average over all ``n`` clients of
``grad F_i`` at the model each client last computed on.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from aflsim.aggregators import Contribution

ineq_tol = 1e-9
identity_tol = 1e-12


class HistoryUnderrun(RuntimeError):
    """A model needed by the probe has already been evicted from the ring."""


class Eq4Violation(AssertionError):
    """The per-iteration MSE bound or the vector identity failed."""


class ModelHistory:
    """Ring buffer of the most recent ``capacity`` server models."""

    def __init__(self, capacity: int, d: int):
        self.capacity = int(capacity)
        self.buf = np.zeros((self.capacity, d))
        self.latest = -1

    def push(self, w: np.ndarray, it: int) -> None:
        if it != self.latest + 1:
            raise ValueError(f"history must be pushed in order, got {it} after {self.latest}")
        self.buf[it % self.capacity] = w
        self.latest = it

    def get(self, it: int) -> np.ndarray:
        if it > self.latest or it < 0:
            raise KeyError(f"iteration {it} not in history (latest {self.latest})")
        if it <= self.latest - self.capacity:
            raise HistoryUnderrun(
                f"history underrun: model {it} needed at {self.latest}, ring holds {self.capacity}"
            )
        return self.buf[it % self.capacity]

    def gather(self, its: Sequence[int]) -> np.ndarray:
        return np.stack([self.get(int(i)) for i in its])


@dataclass
class ProbeSpec:
    capacity: int | None = None  # default 2 * tau_max_admin + 1, capped at T + 1
    strict: bool = True  # raise on an identity / bound violation


@dataclass
class ErrorDecomposition:
    t: int
    normA2: float
    normB2: float
    normC2: float
    mse: float
    grad_norm_sq: float
    drift: np.ndarray = field(repr=False)
    identity_residual: float = 0.0

    @property
    def mean_drift(self) -> float:
        return float(np.mean(self.drift))


def expected_update(contributions: Sequence[Contribution], obj, history: ModelHistory, eta_l: float, d: int) -> np.ndarray:
    """Replay ``sum(coef * payload)`` with exact gradients at each payload's basis model."""
    if not contributions:
        return np.zeros(d)
    clients = np.array([c for c, _, _ in contributions], dtype=np.int64)
    coefs = np.array([w for _, _, w in contributions])
    W = history.gather([b for _, b, _ in contributions])
    grads = np.stack([obj.true_gradient(int(i), W[k]) for k, i in enumerate(clients)])
    return eta_l * (coefs @ grads)


def decompose_error(
    u_t,
    contributions: Sequence[Contribution],
    obj,
    history: ModelHistory,
    latest_basis: np.ndarray,
    t: int,
    eta_l: float = 1.0,
) -> ErrorDecomposition:
    """Terms A, B, C, the squared error and per-client drift at iteration ``t``.

    ``u_t`` may be ``None`` for an iteration that keeps the model unchanged;
    it is then treated as the zero update.
    """
    d = obj.d
    w_t = history.get(t)
    u = np.zeros(d) if u_t is None else np.asarray(u_t)
    u_bar = expected_update(contributions, obj, history, eta_l, d)
    stale = history.gather(latest_basis)
    g_stale = obj.true_gradients_at(stale).mean(axis=0)
    _, g_now = obj.global_objective_and_gradient(w_t)
    A = u - u_bar
    B = u_bar - g_stale
    C = g_stale - g_now
    err = u - g_now
    resid = float(np.max(np.abs((A + B + C) - err))) if d else 0.0
    drift = np.sum((stale - w_t) ** 2, axis=1)
    return ErrorDecomposition(
        t=t,
        normA2=float(A @ A),
        normB2=float(B @ B),
        normC2=float(C @ C),
        mse=float(err @ err),
        grad_norm_sq=float(g_now @ g_now),
        drift=drift,
        identity_residual=resid,
    )


def violations(dec: ErrorDecomposition) -> List[str]:
    out = []
    bound = 3.0 * (dec.normA2 + dec.normB2 + dec.normC2) + ineq_tol
    if dec.mse > bound:
        out.append(f"t={dec.t}: mse {dec.mse:.6g} exceeds 3(A+B+C) = {bound:.6g}")
    scale = 1.0 + np.sqrt(dec.mse) + np.sqrt(dec.normA2) + np.sqrt(dec.normB2) + np.sqrt(dec.normC2)
    if dec.identity_residual > identity_tol * scale:
        out.append(f"t={dec.t}: A+B+C differs from u - gradF by {dec.identity_residual:.3g}")
    return out


@dataclass
class MseChainReport:
    n_iters: int
    violations: List[str]
    running_mse: np.ndarray
    running_grad_norm_sq: np.ndarray
    mean_normA2: float
    mean_normB2: float
    mean_normC2: float

    @property
    def ok(self) -> bool:
        return not self.violations


def check_mse_chain(decomps: Sequence[ErrorDecomposition], strict: bool = True) -> MseChainReport:
    """Check the per-iteration bound over a run and report the two running averages.

    With ``strict`` any violation raises :class:`Eq4Violation`; the bound is
    an algebraic consequence of the identity, so a violation is a bug.
    """
    bad = [v for dec in decomps for v in violations(dec)]
    if bad and strict:
        raise Eq4Violation("; ".join(bad[:5]))
    k = np.arange(1, len(decomps) + 1)
    mse = np.array([d.mse for d in decomps])
    gn = np.array([d.grad_norm_sq for d in decomps])

    def mean(attr):
        return float(np.mean([getattr(d, attr) for d in decomps])) if decomps else 0.0

    return MseChainReport(
        n_iters=len(decomps),
        violations=bad,
        running_mse=np.cumsum(mse) / k if len(k) else mse,
        running_grad_norm_sq=np.cumsum(gn) / k if len(k) else gn,
        mean_normA2=mean("normA2"),
        mean_normB2=mean("normB2"),
        mean_normC2=mean("normC2"),
    )


def estimate_term_a_variance(
    contributions: Sequence[Contribution],
    obj,
    stale_models: np.ndarray,
    samples: int,
    rng: np.random.Generator,
    eta_l: float = 1.0,
) -> float:
    """Monte Carlo ``E||u - u_bar||^2`` at frozen stale models.

    ``stale_models[k]`` is the model the ``k``-th contribution was computed
    on. Each contribution gets its own fresh sample per draw.
    """
    d = obj.d
    u = np.zeros((samples, d))
    u_bar = np.zeros(d)
    for k, (client, _, coef) in enumerate(contributions):
        w = stale_models[k]
        u += coef * obj.stochastic_gradient_batch(int(client), w, rng, samples)
        u_bar += coef * obj.true_gradient(int(client), w)
    diff = eta_l * (u - u_bar)
    return float(np.mean(np.sum(diff * diff, axis=1)))


def frozen_contributions(kind: str, n: int, M: int | None = None, rng: np.random.Generator | None = None) -> List[Contribution]:
    """A representative contribution pattern for each strategy, all at basis 0.

    ``ace_*`` and ``aced`` average every client; ``vanilla_asgd`` and
    ``delay_adaptive_asgd`` use one client; ``fedbuff`` averages ``M``
    distinct clients. ``rng`` picks which clients participate.
    """
    rng = rng or np.random.default_rng(0)
    if kind in ("ace_direct", "ace_incremental", "aced"):
        return [(i, 0, 1.0 / n) for i in range(n)]
    if kind in ("vanilla_asgd", "delay_adaptive_asgd"):
        return [(int(rng.integers(n)), 0, 1.0)]
    if kind in ("fedbuff", "ca2fl"):
        if M is None:
            raise ValueError(f"{kind} needs M")
        return [(int(i), 0, 1.0 / M) for i in rng.choice(n, M, replace=False)]
    raise ValueError(f"unknown aggregator kind {kind!r}")


DECOMP_COLUMNS = ("t", "A2", "B2", "C2", "mse", "grad_norm_sq", "mean_drift")


def decompositions_to_csv(decomps: Sequence[ErrorDecomposition]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(DECOMP_COLUMNS)
    for d in decomps:
        w.writerow([d.t, repr(d.normA2), repr(d.normB2), repr(d.normC2), repr(d.mse), repr(d.grad_norm_sq), repr(d.mean_drift)])
    return buf.getvalue()
