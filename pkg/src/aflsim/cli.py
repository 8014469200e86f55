"""Command-line front end: ``aflsim {run,sweep,scaling,ablate-tau,probe}``.

Settings are flat dotted keys (``aggregator.kind``, ``delays.beta`` ...).
Subcommand defaults are overridden by a ``key = value`` config file, which
is overridden by command-line flags. Comma-separated values on sweepable
keys expand into a cross product.
"""

from __future__ import annotations

import argparse
import configparser
import itertools
import json
import logging
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

from aflsim.aggregators import ALL_CLIENT_KINDS, BUFFERED_KINDS, KINDS
from aflsim.core import ConfigError
from aflsim.delaysim import run_manifest
from aflsim.experiments import RunSpec, SuiteParams, execute_run, make_run_spec
from aflsim.metrics import scaling_check, summaries_to_csv, summarize
from aflsim.probe import check_mse_chain, decompositions_to_csv

log = logging.getLogger("aflsim")

EXIT_OK, EXIT_USAGE, EXIT_VIOLATION = 0, 1, 2

PAPER_ALGOS = ("ace_direct", "aced", "fedbuff", "ca2fl", "vanilla_asgd", "delay_adaptive_asgd")

# key -> parser for one scalar value
KEYS = {
    "run.n": int,
    "run.T": int,
    "run.seeds": int,
    "run.seed_base": int,
    "run.eta_c": float,
    "run.eta_rule": str,
    "run.dropout": str,
    "run.tau_max_admin": int,
    "run.probe": "bool",
    "aggregator.kind": str,
    "aggregator.tau_algo": int,
    "aggregator.M": int,
    "aggregator.concurrency": int,
    "aggregator.tau_C": int,
    "aggregator.K": int,
    "aggregator.eta_l": float,
    "aggregator.quantize8": "bool",
    "aggregator.blocking": "bool",
    "delays.kind": str,
    "delays.beta": float,
    "suite.kind": str,
    "suite.dim": int,
    "suite.alpha": float,
    "suite.heterogeneity": float,
    "suite.sigma2": float,
    "suite.noise_model": str,
    "suite.condition": float,
    "suite.ridge": float,
    "suite.samples": int,
    "suite.sep": float,
}
# keys that may carry several values and expand into a cross product
SWEEP_KEYS = ("aggregator.kind", "suite.alpha", "suite.heterogeneity", "delays.beta", "aggregator.tau_algo", "run.T")

# kind-specific keys, dropped for kinds they do not apply to in multi-kind plans
APPLIES = {
    "aggregator.tau_algo": lambda k: k == "aced",
    "aggregator.M": lambda k: k in BUFFERED_KINDS,
    "aggregator.concurrency": lambda k: k not in ALL_CLIENT_KINDS,
    "aggregator.tau_C": lambda k: k == "delay_adaptive_asgd",
    "aggregator.quantize8": lambda k: k in ("ace_direct", "aced"),
    "aggregator.blocking": lambda k: k in BUFFERED_KINDS,
}

BASE_DEFAULTS = {
    "run.n": 20,
    "run.T": 500,
    "run.seeds": 1,
    "run.seed_base": 0,
    "run.eta_c": 0.2,
    "run.eta_rule": "sqrt_n_over_T",
    "run.tau_max_admin": 1000,
    "run.probe": False,
    "aggregator.kind": "ace_direct",
    "aggregator.K": 1,
    "aggregator.eta_l": 1.0,
    "aggregator.quantize8": False,
    "aggregator.blocking": False,
    "delays.kind": "exponential",
    "delays.beta": 5.0,
    "suite.kind": "quadratic",
    "suite.dim": 10,
    "suite.heterogeneity": 1.0,
    "suite.sigma2": 0.0,
}

COMMAND_DEFAULTS = {
    "run": {},
    "probe": {"run.probe": True},
    "sweep": {
        "aggregator.kind": list(PAPER_ALGOS),
        "suite.alpha": [0.1, 0.3],
        "delays.beta": [5.0, 30.0],
        "run.seeds": 5,
        "aggregator.M": 10,
        "aggregator.concurrency": 20,
        "aggregator.tau_algo": 50,
    },
    "scaling": {
        "run.T": [2000, 4000, 8000, 16000],
        "suite.sigma2": 0.5,
        "run.seeds": 10,
    },
    "ablate-tau": {
        "aggregator.kind": "aced",
        "run.dropout": "0.3@T/2",
        "run.seeds": 5,
    },
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _coerce(key: str, raw) -> object:
    kind = KEYS[key]
    if kind == "bool":
        if isinstance(raw, bool):
            return raw
        s = str(raw).strip().lower()
        if s in ("1", "true", "yes", "on"):
            return True
        if s in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"{key}: expected a boolean, got {raw!r}")
    try:
        return kind(raw.strip() if isinstance(raw, str) else raw)
    except ValueError:
        raise UsageError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None


def parse_value(key: str, raw) -> object:
    """Scalar, or list for comma-separated input on a sweepable key."""
    if key not in KEYS:
        raise UsageError(f"unknown config key {key!r}")
    if isinstance(raw, str) and "," in raw and key != "run.dropout":
        if key not in SWEEP_KEYS:
            raise UsageError(f"{key} takes a single value")
        return [_coerce(key, p) for p in raw.split(",") if p.strip()]
    if isinstance(raw, list):
        return [_coerce(key, p) for p in raw]
    return _coerce(key, raw)


def load_config(path: str) -> Dict[str, object]:
    """Read a ``key = value`` file (``#`` comments). Sections are optional and
    act as key prefixes, so ``[aggregator]`` + ``kind = aced`` equals
    ``aggregator.kind = aced``."""
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string("[__top__]\n" + text)
    except configparser.Error as exc:
        raise UsageError(f"malformed config {path}: {exc}") from None
    out = {}
    for section in cp.sections():
        for k, v in cp.items(section):
            key = k if section == "__top__" else f"{section}.{k}"
            out[key] = parse_value(key, v)
    return out


FLAG_KEYS = {
    "algo": "aggregator.kind",
    "n": "run.n",
    "T": "run.T",
    "dim": "suite.dim",
    "alpha": "suite.alpha",
    "zeta": "suite.heterogeneity",
    "beta": "delays.beta",
    "sigma2": "suite.sigma2",
    "eta_c": "run.eta_c",
    "tau_algo": "aggregator.tau_algo",
    "buffer_M": "aggregator.M",
    "concurrency": "aggregator.concurrency",
    "tau_C": "aggregator.tau_C",
    "K": "aggregator.K",
    "eta_l": "aggregator.eta_l",
    "dropout": "run.dropout",
    "seeds": "run.seeds",
    "suite": "suite.kind",
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="aflsim", description="Deterministic asynchronous federated learning simulator.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True
    helps = {
        "run": "single configuration (times --seeds)",
        "sweep": "algorithm x heterogeneity x delay grid",
        "scaling": "ACE convergence scaling over T",
        "ablate-tau": "ACED tau_algo ablation under dropout",
        "probe": "runs with the error-decomposition probe",
    }
    for name, text in helps.items():
        sp = sub.add_parser(name, help=text)
        sp.add_argument("--config", metavar="PATH")
        sp.add_argument("--algo", help=f"one or more of {', '.join(KINDS)}")
        sp.add_argument("--suite", help="quadratic or logistic")
        sp.add_argument("--n")
        sp.add_argument("--T")
        sp.add_argument("--dim")
        sp.add_argument("--alpha", help="Dirichlet concentration (logistic); quadratic maps it to heterogeneity 1/alpha")
        sp.add_argument("--zeta", help="quadratic heterogeneity level")
        sp.add_argument("--beta")
        sp.add_argument("--sigma2")
        sp.add_argument("--eta-c", dest="eta_c")
        sp.add_argument("--tau-algo", dest="tau_algo")
        sp.add_argument("--buffer-M", dest="buffer_M")
        sp.add_argument("--concurrency")
        sp.add_argument("--tau-C", dest="tau_C")
        sp.add_argument("--K")
        sp.add_argument("--eta-l", dest="eta_l")
        sp.add_argument("--quantize8", action="store_true", default=None)
        sp.add_argument("--dropout", help='"FRAC@ITER", ITER may be an integer or T/2')
        sp.add_argument("--seeds")
        sp.add_argument("--probe", action="store_true", default=None)
        sp.add_argument("--out", default="aflsim-out", metavar="DIR")
        sp.add_argument("--jobs", type=int, default=1)
    return p


@dataclass
class ExperimentPlan:
    command: str
    runs: List[RunSpec] = field(default_factory=list)
    out_dir: str = "aflsim-out"
    jobs: int = 1

    def __len__(self):
        return len(self.runs)


def resolve_settings(args):
    """Merged settings and the set of keys the user set (file or flags)."""
    settings = dict(BASE_DEFAULTS)
    settings.update(COMMAND_DEFAULTS.get(args.command, {}))
    given: Dict[str, object] = {}
    if getattr(args, "config", None):
        given.update(load_config(args.config))
    for attr, key in FLAG_KEYS.items():
        raw = getattr(args, attr, None)
        if raw is not None:
            given[key] = parse_value(key, raw)
    if getattr(args, "quantize8", None):
        given["aggregator.quantize8"] = True
    if getattr(args, "probe", None):
        given["run.probe"] = True
    settings.update(given)
    return settings, set(given)


def _as_list(v) -> list:
    return list(v) if isinstance(v, list) else [v]


def parse_dropout(text: str, T: int):
    """``"0.3@250"`` or ``"0.3@T/2"`` -> ``(0.3, 250)``."""
    try:
        frac_s, when_s = text.split("@")
        frac = float(frac_s)
        when_s = when_s.strip()
        if when_s.startswith("T/"):
            when = T // int(when_s[2:])
        elif when_s == "T":
            when = T
        else:
            when = int(when_s)
    except (ValueError, ZeroDivisionError):
        raise UsageError(f'run.dropout: expected "FRAC@ITER", got {text!r}') from None
    if not 0.0 <= frac <= 1.0:
        raise UsageError("run.dropout: fraction must lie in [0, 1]")
    return frac, when


def plan(args) -> ExperimentPlan:
    """Expand parsed arguments into a deterministic list of resolved runs."""
    s, explicit = resolve_settings(args)
    if s.get("suite.kind", "quadratic") not in ("quadratic", "logistic"):
        raise UsageError(f"suite.kind must be quadratic or logistic; got {s['suite.kind']!r}")
    kinds = _as_list(s["aggregator.kind"])
    for k in kinds:
        if k not in KINDS:
            raise UsageError(f"aggregator.kind: unknown aggregator {k!r}; choose from {', '.join(KINDS)}")
    multi = len(kinds) > 1
    logistic = s["suite.kind"] == "logistic"
    n = s["run.n"]

    # quadratic suites read the alpha axis as heterogeneity 1/alpha unless a
    # heterogeneity level was given explicitly
    use_alpha = logistic or ("suite.alpha" in s and "suite.heterogeneity" not in explicit)
    axes = {
        "kind": kinds,
        "alpha": _as_list(s.get("suite.alpha", 0.1)) if use_alpha else [None],
        "zeta": [None] if use_alpha else _as_list(s["suite.heterogeneity"]),
        "beta": _as_list(s["delays.beta"]),
        "T": _as_list(s["run.T"]),
        "tau_algo": _as_list(s.get("aggregator.tau_algo")),
    }
    seeds = range(s["run.seed_base"], s["run.seed_base"] + s["run.seeds"])

    runs = []
    for kind, alpha, zeta, beta, T, tau_algo in itertools.product(*axes.values()):
        if logistic:
            suite = SuiteParams(
                kind="logistic",
                sigma2=s["suite.sigma2"],
                noise_model=s.get("suite.noise_model", "minibatch"),
                alpha=float(alpha) if alpha is not None else 0.1,
                ridge=s.get("suite.ridge", 1e-3),
                samples=s.get("suite.samples", 5000),
                sep=s.get("suite.sep", 3.0),
            )
        else:
            h = (1.0 / alpha) if alpha is not None else zeta
            suite = SuiteParams(
                kind="quadratic",
                sigma2=s["suite.sigma2"],
                noise_model=s.get("suite.noise_model", "gaussian_additive"),
                dim=s["suite.dim"],
                heterogeneity=float(h),
                condition=s.get("suite.condition", 10.0),
            )
        kw = {}
        for key in ("aggregator.tau_algo", "aggregator.M", "aggregator.concurrency", "aggregator.tau_C",
                    "aggregator.quantize8", "aggregator.blocking"):
            val = tau_algo if key == "aggregator.tau_algo" else s.get(key)
            if multi and not APPLIES[key](kind):
                continue
            if val is None or val is False:
                continue
            kw[key.split(".")[1]] = val
        if "concurrency" in kw:
            kw["concurrency"] = min(kw["concurrency"], n)
        dropout = parse_dropout(s["run.dropout"], T) if s.get("run.dropout") else None
        grid = [tau_algo]
        if args.command == "ablate-tau" and tau_algo is None:
            grid = [1, 10, 50, 100 * T // 500]
        for ta in grid:
            if ta is not None and kind == "aced":
                kw["tau_algo"] = ta
            for seed in seeds:
                tags = (
                    ("algo", kind),
                    ("suite", suite.kind),
                    ("alpha", alpha),
                    ("zeta", suite.heterogeneity if not logistic else None),
                    ("beta", beta),
                    ("tau_algo", kw.get("tau_algo")),
                    ("seed", seed),
                )
                spec = make_run_spec(
                    kind=kind,
                    n=n,
                    T=T,
                    seed=seed,
                    eta_c=s["run.eta_c"],
                    eta_rule=s["run.eta_rule"],
                    suite=suite,
                    beta=beta,
                    delay_kind=s["delays.kind"],
                    K=s["aggregator.K"],
                    eta_l=s["aggregator.eta_l"],
                    dropout=dropout,
                    tau_max_admin=s["run.tau_max_admin"],
                    probe=bool(s["run.probe"]),
                    tags=tags,
                    **kw,
                )
                problems = spec.problems()
                if problems:
                    raise UsageError("; ".join(problems))
                runs.append(spec)
    ids = [r.run_id for r in runs]
    if len(set(ids)) != len(ids):
        raise UsageError("plan contains duplicate runs; check swept values for repeats")
    jobs = max(1, int(getattr(args, "jobs", 1) or 1))
    return ExperimentPlan(args.command, runs, getattr(args, "out", "aflsim-out"), jobs)


def _atomic_write(path: str, text: str) -> None:
    d = os.path.dirname(path)
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _run_one(spec: RunSpec, out_dir: str) -> dict:
    run_dir = os.path.join(out_dir, "runs", spec.run_id)
    done = os.path.join(run_dir, "summary.json")
    if os.path.exists(done):
        with open(done, encoding="utf-8") as fh:
            row = json.load(fh)
        row["_skipped"] = True
        return row
    trace, obj, part = execute_run(spec)
    summary = summarize(trace, obj)
    row = {"run_id": spec.run_id, **dict(spec.tags), "n": spec.cfg.n_clients, "T": spec.cfg.total_iters}
    row.update(summary.as_row())
    row["probe_violations"] = 0
    _atomic_write(os.path.join(run_dir, "trace.csv"), trace.to_csv())
    if trace.decompositions is not None:
        rep = check_mse_chain(trace.decompositions, strict=False)
        row["probe_violations"] = len(rep.violations)
        _atomic_write(os.path.join(run_dir, "decomposition.csv"), decompositions_to_csv(trace.decompositions))
    _atomic_write(os.path.join(run_dir, "suite.json"), json.dumps(obj.manifest(), sort_keys=True, indent=2, default=float))
    if part is not None:
        _atomic_write(os.path.join(run_dir, "partition.json"), part.to_json())
    extra = {"run_id": spec.run_id, "resolved": spec.resolved()}
    _atomic_write(os.path.join(run_dir, "manifest.json"), run_manifest(spec.cfg, spec.agg, spec.delays, obj, trace, extra))
    # written last: its presence marks the run as complete
    _atomic_write(done, json.dumps(row, indent=2, default=float))
    return row


def execute(p: ExperimentPlan) -> int:
    """Run every planned simulation, write outputs, return an exit status."""
    out = p.out_dir
    os.makedirs(out, exist_ok=True)
    if p.jobs > 1 and len(p.runs) > 1:
        with ProcessPoolExecutor(max_workers=p.jobs) as ex:
            rows = list(ex.map(_run_one, p.runs, itertools.repeat(out)))
    else:
        rows = [_run_one(spec, out) for spec in p.runs]
    for row in rows:
        state = "skipped" if row.pop("_skipped", False) else "done"
        extra = " STARVED" if row.get("partial") else ""
        log.info("%s %s %s gap=%.6g%s", state, row["run_id"], row.get("algo"), row["final_gap"], extra)
    rows.sort(key=lambda r: r["run_id"])
    _atomic_write(os.path.join(out, "comparison.csv"), summaries_to_csv(rows))
    if p.command == "scaling" and rows:
        by_kind: Dict[str, list] = {}
        for r in rows:
            by_kind.setdefault(r["algo"], []).append((r["T"], r["avg_grad_norm_sq"]))
        report = {}
        for kind, pts in sorted(by_kind.items()):
            try:
                rep = scaling_check(pts)
                report[kind] = {"slope": rep.slope, "intercept": rep.intercept, "points": rep.points}
            except ValueError as exc:
                report[kind] = {"error": str(exc)}
        _atomic_write(os.path.join(out, "scaling.json"), json.dumps(report, sort_keys=True, indent=2))
    bad = sum(int(r.get("probe_violations") or 0) for r in rows)
    if bad:
        log.error("%d probe violations detected", bad)
        return EXIT_VIOLATION
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        args = build_parser().parse_args(argv)
        p = plan(args)
    except (UsageError, ConfigError) as exc:
        print(f"aflsim: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return execute(p)


if __name__ == "__main__":
    sys.exit(main())
