import numpy as np
import pytest
from hypothesis import given, strategies as st

from aflsim.aggregators import AggregatorSpec
from aflsim.core import ConfigError, RunConfig, StepSizeRule, dropout_fraction, rng_stream
from aflsim.delaysim import DelayModel, EventQueue, RunTrace, apply_dropout, run_simulation, sample_delay
from aflsim.metrics import summarize
from aflsim.objectives import QuadraticSuite, NoiseSpec

from conftest import quad


def cfg_for(obj, T, **kw):
    return RunConfig(n_clients=obj.n, total_iters=T, dim=obj.d, **kw)


# ---- delays and queue ---------------------------------------------------


def test_sample_delay_kinds():
    rng = rng_stream(0, "delay:0")
    assert sample_delay(DelayModel("constant", 5.0), 0, rng) == 5.0
    assert sample_delay(DelayModel("per_client_constant", per_client=(1.0, 2.0, 3.0)), 2, rng) == 3.0


def test_exponential_mean():
    rng = rng_stream(0, "delay:0")
    x = np.array([sample_delay(DelayModel("exponential", 5.0), 0, rng) for _ in range(100_000)])
    assert x.min() > 0
    assert x.mean() == pytest.approx(5.0, rel=0.02)


def test_delay_model_validation():
    assert DelayModel("constant", 0.0).validate(2)
    assert DelayModel("per_client_constant", per_client=(1.0,)).validate(2)
    assert DelayModel("gamma").validate(2)
    assert DelayModel().validate(2) == []


@given(st.lists(st.tuples(st.sampled_from([1.0, 2.0, 2.5]), st.integers(0, 5), st.integers(0, 9)), min_size=1, max_size=40))
def test_queue_pops_lexicographically(events):
    q = EventQueue()
    for e in events:
        q.push(*e)
    out = [q.pop() for _ in range(len(events))]
    assert out == sorted(events)


def test_queue_remove_client():
    q = EventQueue()
    q.push(3.0, 1, 0)
    q.push(1.0, 2, 0)
    assert q.remove_client(1) == (3.0, 1, 0)
    assert q.remove_client(1) is None
    assert q.clients() == [2]


def test_apply_dropout():
    q = EventQueue()
    for c in range(3):
        q.push(float(c + 1), c, 1)
    dropped = set()
    assert apply_dropout([], q, 10.0, 3, dropped) == []
    assert len(q) == 3
    assert apply_dropout([(1, 2.0), (2, 5.0)], q, 2.0, 3, dropped) == [1]
    assert q.clients() == [0, 2]
    with pytest.raises(ConfigError):
        apply_dropout([(7, 0.0)], q, 1.0, 3, dropped)


# ---- hand-simulated event loop ------------------------------------------

# per-client constant delays (1, 2, 100), ACE, T=10.
# init wave consumes all three at iteration 0, then everyone starts at time 0
# on w^1. Ties at equal times are broken by client id.
HAND_CONSUMED = [
    (0, 0, 0), (0, 1, 0), (0, 2, 0),
    (1, 0, 0),  # time 1: client 0, basis 1
    (2, 0, 0),  # time 2: client 0 (tie with client 1, lower id first), basis 2
    (3, 1, 2),  # time 2: client 1, basis 1
    (4, 0, 1),  # time 3: client 0, basis 3
    (5, 0, 0),  # time 4: client 0 (tie), basis 5
    (6, 1, 2),  # time 4: client 1, basis 4
    (7, 0, 1),  # time 5: client 0, basis 6
    (8, 0, 0),  # time 6: client 0 (tie), basis 8
    (9, 1, 2),  # time 6: client 1, basis 7
]


def test_hand_event_table_ace():
    obj = quad(n=3, d=2)
    tr = run_simulation(cfg_for(obj, 10), obj, AggregatorSpec("ace_direct"), DelayModel("per_client_constant", per_client=(1.0, 2.0, 100.0)))
    assert [tuple(r) for r in tr.consumed.tolist()] == HAND_CONSUMED
    # client 2's cache entry is the init gradient at w^0 throughout
    assert tr.max_staleness.tolist() == list(range(10))
    assert tr.comms_total.tolist() == list(range(3, 13))
    assert tr.n_t.tolist() == [3] * 10


def test_tie_break_by_client_id():
    obj = quad(n=4, d=2)
    tr = run_simulation(cfg_for(obj, 8), obj, AggregatorSpec("vanilla_asgd"), DelayModel("constant", 1.0))
    # all four finish together each unit of time; processed in id order
    assert tr.consumed[:, 1].tolist() == [0, 1, 2, 3, 0, 1, 2, 3]
    assert tr.consumed[:, 2].tolist() == [0, 1, 2, 3, 3, 3, 3, 3]


def test_single_client_vanilla_is_sequential_gd():
    A = np.array([[[2.0, 0.5], [0.5, 1.0]]])
    obj = QuadraticSuite(A, np.array([[1.0, -1.0]]), NoiseSpec())
    cfg = RunConfig(n_clients=1, total_iters=25, dim=2, eta_rule=StepSizeRule("constant", 0.3))
    tr = run_simulation(cfg, obj, AggregatorSpec("vanilla_asgd"), DelayModel("constant", 1.0))
    w = np.zeros(2)
    for t in range(25):
        _, g = obj.global_objective_and_gradient(w)
        assert tr.grad_norm_sq[t] == pytest.approx(float(g @ g), rel=1e-12, abs=1e-300)
        w = w - 0.3 * obj.true_gradient(0, w)
    np.testing.assert_allclose(tr.final.weights, w, rtol=1e-12)
    assert np.all(tr.consumed[:, 2] == 0)


def test_fedbuff_synchronous_limit():
    obj = quad(n=6, d=3, sigma2=0.1)
    spec = AggregatorSpec("fedbuff", M=6, concurrency=6, blocking=True)
    tr = run_simulation(cfg_for(obj, 50), obj, spec, DelayModel("exponential", 5.0))
    assert np.all(tr.consumed[:, 2] == 0)
    assert np.all(tr.max_staleness == 0)
    # one gradient from every client per iteration
    per_iter = np.bincount(tr.consumed[:, 0], minlength=50)
    assert np.all(per_iter == 6)


def test_vanilla_equals_fedbuff_m1():
    obj = quad(n=8, d=3, sigma2=0.5)
    for mc in (None, 3):
        a = run_simulation(cfg_for(obj, 200), obj, AggregatorSpec("vanilla_asgd", concurrency=mc), DelayModel())
        b = run_simulation(cfg_for(obj, 200), obj, AggregatorSpec("fedbuff", M=1, concurrency=mc), DelayModel())
        assert a.to_csv() == b.to_csv()
        np.testing.assert_array_equal(a.final.weights, b.final.weights)


def test_single_slot_concurrency_has_no_staleness():
    obj = quad(n=10, d=2)
    tr = run_simulation(cfg_for(obj, 300), obj, AggregatorSpec("fedbuff", M=2, concurrency=1), DelayModel())
    # one client in flight: every result is computed on the current model
    assert np.all(tr.consumed[:, 2] == 0)
    assert len(set(tr.consumed[:, 1].tolist())) == 10


# ---- dropout ------------------------------------------------------------


def test_drop_everyone_at_start_starves():
    obj = quad(n=3, d=2)
    sched = [(c, 0.0) for c in range(3)]
    for kind in ("ace_direct", "vanilla_asgd"):
        tr = run_simulation(cfg_for(obj, 10, dropout_schedule=sched), obj, AggregatorSpec(kind), DelayModel())
        assert tr.starved and len(tr) == 0
        assert summarize(tr, obj).partial


def test_drop_everyone_midway_starves_with_partial_trace():
    obj = quad(n=3, d=2)
    sched = [(c, 5) for c in range(3)]
    tr = run_simulation(cfg_for(obj, 10, dropout_schedule=sched, dropout_unit="iter"), obj, AggregatorSpec("vanilla_asgd"), DelayModel())
    assert tr.starved and len(tr) == 5


def test_aced_active_count_drops_after_dropout():
    obj = quad(n=20, d=3)
    T, tau = 400, 60
    sched = dropout_fraction(20, 0.3, T // 2, seed=0)
    cfg = cfg_for(obj, T, dropout_schedule=sched, dropout_unit="iter")
    tr = run_simulation(cfg, obj, AggregatorSpec("aced", tau_algo=tau), DelayModel())
    dropped = {c for c, _ in sched}
    before = tr.n_t[T // 2 - 50 : T // 2].mean()
    after = tr.n_t[T // 2 + tau + 5 :]
    assert after.max() <= 20 - len(dropped)
    assert after.mean() < before
    late = tr.consumed[tr.consumed[:, 0] >= T // 2]
    assert not dropped & set(late[:, 1].tolist())


def test_time_unit_dropout():
    obj = quad(n=5, d=2)
    cfg = cfg_for(obj, 100, dropout_schedule=[(0, 3.0), (1, 3.0)])
    tr = run_simulation(cfg, obj, AggregatorSpec("vanilla_asgd"), DelayModel("constant", 1.0))
    assert tr.extra["dropped"] == [0, 1]
    assert not tr.starved
    assert set(tr.consumed[10:, 1].tolist()) == {2, 3, 4}


# ---- caps, accounting, determinism --------------------------------------


@pytest.mark.parametrize(
    "kind,kw", [("vanilla_asgd", {}), ("delay_adaptive_asgd", {}), ("fedbuff", {"M": 4, "concurrency": 10})]
)
def test_admin_cap_bounds_consumed_staleness(kind, kw):
    obj = quad(n=20, d=3)
    cfg = cfg_for(obj, 1500, tau_max_admin=25, enforce_tau_cap=True)
    tr = run_simulation(cfg, obj, AggregatorSpec(kind, **kw), DelayModel("exponential", 5.0))
    assert tr.consumed[:, 2].max() <= 25
    assert tr.max_staleness.max() <= 25


@pytest.mark.parametrize("kind", ["ace_direct", "ace_incremental", "aced"])
@pytest.mark.parametrize("cap", [40, 55])
def test_admin_cap_bounds_every_cached_entry(kind, cap):
    # each cached entry spans two round trips, so caps from 2n up are feasible
    obj = quad(n=20, d=3)
    for seed in range(3):
        cfg = cfg_for(obj, 1500, tau_max_admin=cap, enforce_tau_cap=True, seed=seed)
        tr = run_simulation(cfg, obj, AggregatorSpec(kind, tau_algo=1000 if kind == "aced" else None), DelayModel())
        assert tr.max_staleness.max() <= cap
        assert tr.consumed[:, 2].max() <= cap


def test_cap_off_by_default_lets_staleness_grow():
    obj = quad(n=20, d=3)
    tr = run_simulation(cfg_for(obj, 1500, tau_max_admin=40), obj, AggregatorSpec("ace_direct"), DelayModel())
    assert tr.max_staleness.max() > 40


def test_comms_accounting():
    obj = quad(n=7, d=2, sigma2=0.1)
    T = 120
    ace = run_simulation(cfg_for(obj, T), obj, AggregatorSpec("ace_direct"), DelayModel())
    assert ace.comms == 7 + T - 1
    assert np.all(np.diff(ace.comms_total) == 1)
    for kind in ("fedbuff", "ca2fl"):
        tr = run_simulation(cfg_for(obj, T), obj, AggregatorSpec(kind, M=3, concurrency=5), DelayModel())
        assert np.all(np.diff(tr.comms_total) == 3)
        assert tr.comms == 3 * T


def test_staleness_nonnegative_and_recorded_max():
    obj = quad(n=10, d=2)
    tr = run_simulation(cfg_for(obj, 300), obj, AggregatorSpec("vanilla_asgd"), DelayModel())
    assert tr.consumed[:, 2].min() >= 0
    assert tr.consumed[:, 2].max() == tr.max_staleness.max()


def test_determinism_and_csv_round_trip():
    obj = quad(n=6, d=3, sigma2=0.3)
    runs = [run_simulation(cfg_for(obj, 150, seed=4), obj, AggregatorSpec("ca2fl", M=2, concurrency=4), DelayModel()) for _ in range(2)]
    assert runs[0].to_csv() == runs[1].to_csv()
    back = RunTrace.from_csv(runs[0].to_csv())
    assert back.to_csv() == runs[0].to_csv()
    other = run_simulation(cfg_for(obj, 150, seed=5), obj, AggregatorSpec("ca2fl", M=2, concurrency=4), DelayModel())
    assert other.to_csv() != runs[0].to_csv()


def test_run_rejects_mismatched_objective():
    obj = quad(n=3, d=2)
    with pytest.raises(ConfigError):
        run_simulation(RunConfig(n_clients=4, total_iters=5, dim=2), obj, AggregatorSpec(), DelayModel())
    with pytest.raises(ConfigError):
        run_simulation(cfg_for(obj, 5), obj, AggregatorSpec("fedbuff"), DelayModel())
