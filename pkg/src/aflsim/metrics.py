"""Run summaries, convergence-scaling fits and comparison tables."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np


@dataclass
class RunSummary:
    iterations: int
    avg_grad_norm_sq: float
    final_objective: float
    final_gap: float
    comms_total: int
    mean_staleness: float
    max_staleness: int
    mean_n_t: float
    partial: bool = False
    mean_A2: Optional[float] = None
    mean_B2: Optional[float] = None
    mean_C2: Optional[float] = None

    def as_row(self) -> dict:
        return asdict(self)


def summarize(trace, obj) -> RunSummary:
    """Summary of a run from its per-iteration records.

    The final objective is evaluated at the returned model when the trace
    carries one; a trace rebuilt from CSV falls back to the last recorded
    ``F(w^t)``.
    """
    T = len(trace)
    if trace.final.weights.size == obj.d:
        final_obj = obj.global_objective_and_gradient(trace.final.weights)[0]
    else:
        final_obj = float(trace.objective[-1]) if T else float("nan")
    out = RunSummary(
        iterations=T,
        avg_grad_norm_sq=float(np.mean(trace.grad_norm_sq)) if T else float("nan"),
        final_objective=final_obj,
        final_gap=final_obj - obj.F_star,
        comms_total=trace.comms,
        mean_staleness=float(np.mean(trace.max_staleness)) if T else 0.0,
        max_staleness=int(np.max(trace.max_staleness)) if T else 0,
        mean_n_t=float(np.mean(trace.n_t)) if T else 0.0,
        partial=bool(trace.starved),
    )
    if trace.decompositions:
        out.mean_A2 = float(np.mean([d.normA2 for d in trace.decompositions]))
        out.mean_B2 = float(np.mean([d.normB2 for d in trace.decompositions]))
        out.mean_C2 = float(np.mean([d.normC2 for d in trace.decompositions]))
    return out


@dataclass
class ScalingReport:
    points: List[Tuple[int, float]]
    slope: float
    intercept: float


def scaling_check(points: Iterable[Tuple[int, float]]) -> ScalingReport:
    """Least-squares slope of ``log(avg_grad_norm_sq)`` against ``log(T)``.

    Repeated ``T`` values (one per seed) are averaged before fitting.
    """
    by_T: Dict[int, List[float]] = {}
    for T, v in points:
        by_T.setdefault(int(T), []).append(float(v))
    if len(by_T) < 3:
        raise ValueError(f"need at least 3 distinct T values for a fit, got {len(by_T)}")
    Ts = sorted(by_T)
    means = [float(np.mean(by_T[T])) for T in Ts]
    slope, intercept = np.polyfit(np.log(Ts), np.log(means), 1)
    return ScalingReport(list(zip(Ts, means)), float(slope), float(intercept))


def summaries_to_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    if not rows:
        return ""
    cols = list(rows[0].keys())
    for r in rows[1:]:
        cols += [k for k in r if k not in cols]
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()
