import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from aflsim.core import (
    ConfigError,
    RngStreams,
    RunConfig,
    StepSizeRule,
    check_finite,
    content_hash,
    dropout_fraction,
    resolve_step_size,
    rng_stream,
    validate_config,
)


def test_step_size_table_rule():
    assert resolve_step_size(StepSizeRule("sqrt_n_over_T", 0.2), 100, 500) == pytest.approx(0.089443, abs=1e-6)


def test_step_size_constant_and_unit():
    assert resolve_step_size(StepSizeRule("constant", 0.05), 7, 9) == 0.05
    assert resolve_step_size(StepSizeRule("sqrt_n_over_T", 1.0), 4, 4) == 1.0


def test_step_size_rejects_bad_inputs():
    with pytest.raises(ConfigError):
        resolve_step_size(StepSizeRule("constant", 0.0), 1, 1)
    with pytest.raises(ConfigError):
        resolve_step_size(StepSizeRule("sqrt_n_over_T", 0.2), 0, 10)
    with pytest.raises(ConfigError):
        resolve_step_size(StepSizeRule("cosine", 0.2), 1, 1)


@given(st.integers(1, 1000), st.integers(1, 10_000))
def test_sqrt_rule_monotone(n, T):
    rule = StepSizeRule("sqrt_n_over_T", 0.2)
    eta = resolve_step_size(rule, n, T)
    assert resolve_step_size(rule, n, T + 1) < eta
    assert resolve_step_size(rule, n + 1, T) > eta
    assert eta == pytest.approx(0.2 * math.sqrt(n / T))


def test_validate_config_messages():
    assert validate_config(RunConfig()) == []
    assert validate_config(RunConfig(n_clients=0)) == ["n_clients must be ≥ 1"]
    assert validate_config(RunConfig(tau_max_admin=0)) == ["tau_max_admin must be ≥ 1"]
    probs = validate_config(RunConfig(total_iters=0, dim=0))
    assert "total_iters must be ≥ 1" in probs and "dim must be ≥ 1" in probs


def test_validate_config_dropout_schedule():
    probs = validate_config(RunConfig(n_clients=3, dropout_schedule=[(0, 5.0), (7, 1.0)]))
    assert any("non-decreasing" in p for p in probs)
    assert any("unknown client 7" in p for p in probs)


def test_rng_streams_reproducible_and_distinct():
    a = rng_stream(3, "noise:1").standard_normal(5)
    b = rng_stream(3, "noise:1").standard_normal(5)
    c = rng_stream(3, "noise:2").standard_normal(5)
    d = rng_stream(4, "noise:1").standard_normal(5)
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, c) and not np.allclose(a, d)


def test_rng_streams_independent_of_creation_order():
    s1 = RngStreams(9)
    s1("delay:0").random(3)
    x = s1("noise:0").random(4)
    s2 = RngStreams(9)
    y = s2("noise:0").random(4)
    np.testing.assert_array_equal(x, y)
    assert s2("noise:0") is s2("noise:0")


def test_rng_streams_uncorrelated():
    x = rng_stream(0, "a").standard_normal(20_000)
    y = rng_stream(0, "b").standard_normal(20_000)
    assert abs(np.corrcoef(x, y)[0, 1]) < 0.03


def test_content_hash_stable():
    assert content_hash("abc") == content_hash("abc")
    assert len(content_hash("abc")) == 16
    assert content_hash("abc") != content_hash("abd")


def test_check_finite():
    check_finite(np.ones(3), "x")
    with pytest.raises(FloatingPointError):
        check_finite(np.array([1.0, np.nan]), "x")


def test_dropout_fraction():
    sched = dropout_fraction(20, 0.3, 50, seed=1)
    assert len(sched) == 6
    assert all(w == 50 for _, w in sched)
    assert len({c for c, _ in sched}) == 6
    assert sched == dropout_fraction(20, 0.3, 50, seed=1)
    assert dropout_fraction(20, 0.0, 50, seed=1) == []
