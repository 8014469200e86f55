"""Resolved run descriptions, suite construction and single-run execution.

A :class:`RunSpec` is the fully resolved description of one simulation. Its
``run_id`` is a content hash of :meth:`RunSpec.resolved`, so the same
settings get the same id on every machine.
"""

from __future__ import annotations

import functools
import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Tuple

from aflsim.aggregators import AggregatorSpec, LocalTrainSpec, validate_spec
from aflsim.core import (
    ConfigError,
    RunConfig,
    StepSizeRule,
    content_hash,
    dropout_fraction,
    rng_stream,
    validate_config,
)
from aflsim.delaysim import DelayModel, RunTrace, run_simulation
from aflsim.objectives import NoiseSpec, make_logistic_suite, make_quadratic_suite
from aflsim.partition import Partition, sample_partition, synth_classification_dataset
from aflsim.probe import ProbeSpec


@dataclass(frozen=True)
class SuiteParams:
    kind: str = "quadratic"  # or "logistic"
    sigma2: float = 0.0
    noise_model: str = "gaussian_additive"
    batch_size: int = 32
    # quadratic
    dim: int = 10
    heterogeneity: float = 1.0
    condition: float = 10.0
    # logistic
    alpha: float = 0.1
    n_classes: int = 10
    d_feat: int = 10
    samples: int = 5000
    sep: float = 3.0
    ridge: float = 1e-3
    # None: use the run seed
    seed: Optional[int] = None

    def model_dim(self) -> int:
        if self.kind == "logistic":
            return (self.d_feat + 1) * self.n_classes
        return self.dim

    def resolved(self) -> dict:
        """Only the fields that influence this kind of suite."""
        common = ["kind", "sigma2", "noise_model", "seed"]
        if self.noise_model == "minibatch":
            common.append("batch_size")
        if self.kind == "logistic":
            keys = common + ["alpha", "n_classes", "d_feat", "samples", "sep", "ridge"]
        else:
            keys = common + ["dim", "heterogeneity", "condition"]
        return {k: getattr(self, k) for k in keys}


def validate_suite(s: SuiteParams) -> list:
    out = []
    if s.kind not in ("quadratic", "logistic"):
        out.append(f"suite.kind must be quadratic or logistic; got {s.kind!r}")
    if s.noise_model not in ("gaussian_additive", "minibatch"):
        out.append(f"suite.noise_model must be gaussian_additive or minibatch; got {s.noise_model!r}")
    if s.sigma2 < 0:
        out.append("suite.sigma2 must be ≥ 0")
    if s.kind == "quadratic" and s.noise_model == "minibatch":
        out.append("suite.noise_model=minibatch needs the logistic suite")
    if s.kind == "logistic":
        if not s.alpha > 0:
            out.append("suite.alpha must be > 0")
        if not s.ridge > 0:
            out.append("suite.ridge must be > 0")
    elif s.heterogeneity < 0:
        out.append("suite.heterogeneity must be ≥ 0")
    return out


@functools.lru_cache(maxsize=16)
def _build_suite_cached(params: SuiteParams, n: int, seed: int):
    noise = NoiseSpec(params.sigma2, params.noise_model, params.batch_size)
    if params.kind == "quadratic":
        return make_quadratic_suite(
            n, params.dim, params.heterogeneity, params.condition, rng_stream(seed, "suite"), noise
        ), None
    ds = synth_classification_dataset(params.n_classes, params.d_feat, params.samples, params.sep, rng_stream(seed, "data"))
    part = sample_partition(ds.labels, n, params.alpha, seed)
    return make_logistic_suite(ds, part, params.ridge, noise), part


def build_suite(params: SuiteParams, n: int, seed: int) -> Tuple[object, Optional[Partition]]:
    """Objective for ``n`` clients, plus the data partition for the logistic suite.

    Suites are memoised per process. The logistic suite solves for its minimiser
    on construction, which dominates short runs.
    """
    problems = validate_suite(params)
    if problems:
        raise ConfigError("; ".join(problems))
    s = params.seed if params.seed is not None else seed
    return _build_suite_cached(params, int(n), int(s))


@dataclass(frozen=True)
class RunSpec:
    cfg: RunConfig
    agg: AggregatorSpec
    delays: DelayModel
    suite: SuiteParams
    probe: bool = False
    # free-form labels carried into the comparison table (not hashed)
    tags: Tuple[Tuple[str, object], ...] = field(default=(), compare=False)

    def resolved(self) -> dict:
        cfg = asdict(self.cfg)
        cfg["eta"] = self.cfg.eta
        cfg["dropout_schedule"] = [list(p) for p in self.cfg.dropout_schedule]
        return {
            "config": cfg,
            "aggregator": asdict(self.agg),
            "delays": asdict(self.delays),
            "suite": self.suite.resolved(),
            "probe": self.probe,
        }

    @property
    def run_id(self) -> str:
        return content_hash(json.dumps(self.resolved(), sort_keys=True, default=float))

    def problems(self) -> list:
        out = validate_config(self.cfg) + validate_spec(self.agg, self.cfg.n_clients)
        out += self.delays.validate(self.cfg.n_clients) + validate_suite(self.suite)
        if self.cfg.dim != self.suite.model_dim():
            out.append(f"dim={self.cfg.dim} does not match the suite's model dimension {self.suite.model_dim()}")
        if self.probe and self.agg.local.K != 1:
            out.append("aggregator.K must be 1 when probing")
        return out


def make_run_spec(
    *,
    kind: str = "ace_direct",
    n: int = 20,
    T: int = 500,
    seed: int = 0,
    eta_c: float = 0.2,
    eta_rule: str = "sqrt_n_over_T",
    suite: SuiteParams = SuiteParams(),
    beta: float = 5.0,
    delay_kind: str = "exponential",
    per_client=None,
    K: int = 1,
    eta_l: float = 1.0,
    tau_algo: Optional[int] = None,
    M: Optional[int] = None,
    concurrency: Optional[int] = None,
    tau_C: Optional[int] = None,
    quantize8: bool = False,
    blocking: bool = False,
    dropout: Optional[Tuple[float, int]] = None,
    tau_max_admin: int = 1000,
    probe: bool = False,
    tags=(),
) -> RunSpec:
    """Convenience constructor; ``dropout`` is ``(fraction, iteration)``."""
    schedule = []
    if dropout is not None:
        frac, when = dropout
        schedule = dropout_fraction(n, frac, when, seed)
    cfg = RunConfig(
        n_clients=n,
        total_iters=T,
        eta_rule=StepSizeRule(eta_rule, eta_c),
        seed=seed,
        dim=suite.model_dim(),
        tau_max_admin=tau_max_admin,
        dropout_schedule=schedule,
        dropout_unit="iter",
    )
    agg = AggregatorSpec(
        kind=kind,
        local=LocalTrainSpec(K, eta_l),
        tau_algo=tau_algo,
        M=M,
        concurrency=concurrency,
        tau_C=tau_C,
        quantize8=quantize8,
        blocking=blocking,
    )
    delays = DelayModel(delay_kind, beta, tuple(per_client) if per_client is not None else None)
    return RunSpec(cfg, agg, delays, suite, probe, tuple(tags))


def execute_run(spec: RunSpec) -> Tuple[RunTrace, object, Optional[Partition]]:
    problems = spec.problems()
    if problems:
        raise ConfigError("; ".join(problems))
    obj, part = build_suite(spec.suite, spec.cfg.n_clients, spec.cfg.seed)
    probe = ProbeSpec(strict=False) if spec.probe else None
    trace = run_simulation(spec.cfg, obj, spec.agg, spec.delays, probe=probe)
    return trace, obj, part

